//! Finite-difference drivers for every differentiable building block.
//!
//! Each driver assembles a fixed, seeded configuration of one block, runs the
//! central-difference comparison against the tape gradients, and returns the
//! report under a stable name so callers can print one line per check.

use fmc_core::blocks::akat::{akat_forward, asymmetric_attention, group_kan, AkatConfig, AkatParams};
use fmc_core::blocks::cpf::{cpf_forward, CpfConfig, CpfParams, PrParams};
use fmc_core::blocks::hsg::{hsg_forward, HsgConfig, HsgParams};
use fmc_core::blocks::mdfc::{mdfc_forward, MdfcConfig, MdfcParams};
use fmc_core::blocks::wave::{wave_forward, WaveConfig, WaveParams};
use fmc_core::error::{Error, Result};
use fmc_core::gradcheck::{finite_diff_check, FdOptions, FdReport};
use fmc_core::model::{build_model, detection_loss, model_forward, GtBox, ModelConfig};
use fmc_core::param::Bound;
use fmc_core::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct CheckOutcome {
    pub name: &'static str,
    pub report: FdReport,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{}: max rel err {:.3e} {}",
            self.name,
            self.report.max_rel,
            if self.report.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn akat_tensors(cfg: &AkatConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        Tensor::randn(&cfg.q_spec().weight_shape(), rng),
        Tensor::randn(&cfg.k_spec().weight_shape(), rng),
        Tensor::randn(&cfg.v_spec().weight_shape(), rng),
        Tensor::randn(&cfg.pos_spec().weight_shape(), rng),
        Tensor::randn(&cfg.out_spec().weight_shape(), rng),
        Tensor::randn(&[cfg.channels], rng),
        Tensor::ones(&[cfg.channels]),
        Tensor::zeros(&[cfg.channels]),
        Tensor::ones(&[cfg.channels]),
        Tensor::zeros(&[cfg.channels]),
        Tensor::randn(&[cfg.groups, cfg.grid.num_basis()], rng).map(|v| v * 0.3),
        Tensor::randn(&[cfg.groups], rng),
    ]
}

fn akat_params(ids: &[fmc_core::VarId]) -> AkatParams {
    AkatParams {
        q_w: ids[0],
        k_w: ids[1],
        v_w: ids[2],
        pos_w: ids[3],
        out_w: ids[4],
        out_b: ids[5],
        n1_g: ids[6],
        n1_b: ids[7],
        n2_g: ids[8],
        n2_b: ids[9],
        kan_alpha: ids[10],
        kan_base: ids[11],
    }
}

/// Gated block with the wavelet kernel on its compute stream, two levels
/// deep.
pub fn check_wave() -> Result<CheckOutcome> {
    let cfg = HsgConfig::new(10, 0.25)?;
    let wcfg = WaveConfig::new(cfg.compute, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(230);
    let inputs = vec![
        Tensor::randn(&[1, cfg.channels, 8, 8], &mut rng),
        Tensor::randn(&cfg.mix_spec().weight_shape(), &mut rng),
        Tensor::randn(&[cfg.expanded()], &mut rng),
        Tensor::randn(&cfg.fuse_spec().weight_shape(), &mut rng),
        Tensor::randn(&[cfg.channels], &mut rng),
        Tensor::randn(&wcfg.band_spec().weight_shape(), &mut rng),
        Tensor::randn(&wcfg.band_spec().weight_shape(), &mut rng),
    ];
    let opts = FdOptions { max_probes_per_input: 40, ..FdOptions::default() };
    let report = finite_diff_check(&inputs, opts, |tape, ids| {
        let p = HsgParams { mix_w: ids[1], mix_b: ids[2], fuse_w: ids[3], fuse_b: ids[4] };
        let wp = WaveParams { level_w: vec![ids[5], ids[6]] };
        let y = hsg_forward(tape, &cfg, &p, ids[0], |t, s| wave_forward(t, &wcfg, &wp, s))?;
        let sq = tape.mul(y, y)?;
        tape.sum_all(sq)
    })?;
    Ok(CheckOutcome { name: "hsg-wave", report })
}

/// Decoupled query/key attention with the positional path, on its own.
pub fn check_attention() -> Result<CheckOutcome> {
    let cfg = AkatConfig::new(8, 2, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(231);
    let mut inputs = vec![Tensor::randn(&[1, 8, 4, 4], &mut rng)];
    inputs.extend(akat_tensors(&cfg, &mut rng));
    let opts = FdOptions { max_probes_per_input: 40, ..FdOptions::default() };
    let report = finite_diff_check(&inputs, opts, |tape, ids| {
        let p = akat_params(&ids[1..]);
        let y = asymmetric_attention(tape, &cfg, &p, ids[0])?;
        let sq = tape.mul(y, y)?;
        tape.sum_all(sq)
    })?;
    Ok(CheckOutcome { name: "attention", report })
}

/// Grouped spline mixer on its own.
pub fn check_group_kan() -> Result<CheckOutcome> {
    let cfg = AkatConfig::new(8, 2, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(232);
    let mut inputs = vec![Tensor::randn(&[1, 8, 4, 4], &mut rng)];
    inputs.extend(akat_tensors(&cfg, &mut rng));
    let opts = FdOptions { max_probes_per_input: 40, ..FdOptions::default() };
    let report = finite_diff_check(&inputs, opts, |tape, ids| {
        let p = akat_params(&ids[1..]);
        let y = group_kan(tape, &cfg, &p, ids[0])?;
        let sq = tape.mul(y, y)?;
        tape.sum_all(sq)
    })?;
    Ok(CheckOutcome { name: "group-kan", report })
}

/// Full attention-plus-mixer block end to end.
pub fn check_akat_block() -> Result<CheckOutcome> {
    let cfg = AkatConfig::new(8, 2, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(233);
    let mut inputs = vec![Tensor::randn(&[1, 8, 4, 4], &mut rng)];
    inputs.extend(akat_tensors(&cfg, &mut rng));
    let opts = FdOptions { max_probes_per_input: 30, ..FdOptions::default() };
    let report = finite_diff_check(&inputs, opts, |tape, ids| {
        let p = akat_params(&ids[1..]);
        let y = akat_forward(tape, &cfg, &p, ids[0])?;
        let sq = tape.mul(y, y)?;
        tape.sum_all(sq)
    })?;
    Ok(CheckOutcome { name: "akat-block", report })
}

/// Partially convolved residual block in branch form.
pub fn check_cpf() -> Result<CheckOutcome> {
    let cfg = CpfConfig::new(8)?;
    let cp = cfg.partial_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(234);
    let inputs = vec![
        Tensor::randn(&[1, 8, 6, 6], &mut rng),
        Tensor::randn(&[cp, cp, 3, 3], &mut rng),
        Tensor::randn(&[cp, cp, 1, 1], &mut rng),
        Tensor::randn(&[cp], &mut rng),
        Tensor::randn(&[cp], &mut rng),
        Tensor::randn(&cfg.expand_spec().weight_shape(), &mut rng),
        Tensor::randn(&[cfg.channels * cfg.expansion], &mut rng),
        Tensor::randn(&cfg.contract_spec().weight_shape(), &mut rng),
        Tensor::randn(&[cfg.channels], &mut rng),
    ];
    let opts = FdOptions { max_probes_per_input: 40, ..FdOptions::default() };
    let report = finite_diff_check(&inputs, opts, |tape, ids| {
        let p = CpfParams {
            pr: PrParams::Branches { w3: ids[1], w1: ids[2], gamma: ids[3], b: ids[4] },
            expand_w: ids[5],
            expand_b: ids[6],
            contract_w: ids[7],
            contract_b: ids[8],
        };
        let y = cpf_forward(tape, &cfg, &p, ids[0])?;
        let sq = tape.mul(y, y)?;
        tape.sum_all(sq)
    })?;
    Ok(CheckOutcome { name: "cpf", report })
}

fn mdfc_tensors(cfg: &MdfcConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let scale = |t: Tensor| t.map(|v| v * 0.5);
    vec![
        scale(Tensor::randn(&cfg.sp2_spec().weight_shape(), rng)),
        Tensor::randn(&[cfg.half()], rng),
        scale(Tensor::randn(&cfg.sp1_spec().weight_shape(), rng)),
        Tensor::randn(&[cfg.half()], rng),
        scale(Tensor::randn(&cfg.fq_spec().weight_shape(), rng)),
        Tensor::randn(&[cfg.half()], rng),
        scale(Tensor::randn(&cfg.fq_spec().weight_shape(), rng)),
        Tensor::randn(&[cfg.half()], rng),
        scale(Tensor::randn(&cfg.fq_spec().weight_shape(), rng)),
        Tensor::randn(&[cfg.half()], rng),
        scale(Tensor::randn(&cfg.p1_proj_spec().weight_shape(), rng)),
        Tensor::randn(&[cfg.out_channels], rng),
        Tensor::randn(&cfg.gate_shape(), rng),
        scale(Tensor::randn(&cfg.ca_a_spec().weight_shape(), rng)),
        Tensor::randn(&[cfg.out_channels / 4], rng),
        scale(Tensor::randn(&cfg.ca_b_spec().weight_shape(), rng)),
        Tensor::randn(&[cfg.out_channels], rng),
        scale(Tensor::randn(&cfg.sobel_spec().weight_shape(), rng)),
        scale(Tensor::randn(&cfg.rf_proj_spec().weight_shape(), rng)),
        Tensor::randn(&[cfg.out_channels], rng),
        scale(Tensor::randn(&[cfg.half()], rng)),
        scale(Tensor::randn(&[cfg.half()], rng)),
    ]
}

fn mdfc_params(ids: &[fmc_core::VarId]) -> MdfcParams {
    MdfcParams {
        sp2_w: ids[0],
        sp2_b: ids[1],
        sp1_w: ids[2],
        sp1_b: ids[3],
        fq_pre_w: ids[4],
        fq_pre_b: ids[5],
        fq_a_w: ids[6],
        fq_a_b: ids[7],
        fq_b_w: ids[8],
        fq_b_b: ids[9],
        fq_nm_g: ids[20],
        fq_nm_b: ids[21],
        p1_w: ids[10],
        p1_b: ids[11],
        gate: ids[12],
        ca_a_w: ids[13],
        ca_a_b: ids[14],
        ca_b_w: ids[15],
        ca_b_b: ids[16],
        sob_w: ids[17],
        rf_w: ids[18],
        rf_b: ids[19],
        align: None,
    }
}

/// Both phases of the frequency-domain merge, spectral gate included.
pub fn check_mdfc() -> Result<CheckOutcome> {
    let cfg = MdfcConfig::new(8, 8, (4, 4))?;
    let mut rng = ChaCha8Rng::seed_from_u64(235);
    let mut inputs = vec![
        Tensor::randn(&[1, 8, 8, 8], &mut rng).map(|v| v * 0.5),
        Tensor::randn(&[1, 8, 4, 4], &mut rng).map(|v| v * 0.5),
    ];
    inputs.extend(mdfc_tensors(&cfg, &mut rng).into_iter().map(|t| t.map(|v| v * 0.5)));
    let opts = FdOptions { max_probes_per_input: 24, ..FdOptions::default() };
    let report = finite_diff_check(&inputs, opts, |tape, ids| {
        let p = mdfc_params(&ids[2..]);
        let y = mdfc_forward(tape, &cfg, &p, ids[0], ids[1])?;
        let sq = tape.mul(y, y)?;
        tape.sum_all(sq)
    })?;
    Ok(CheckOutcome { name: "mdfc", report })
}

/// The assembled detector against the detection loss, probed sparsely.
pub fn check_model() -> Result<CheckOutcome> {
    let cfg = ModelConfig::tiny((32, 32));
    let model = build_model(&cfg, 236)?;
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(237);
    let mut inputs = vec![Tensor::randn(&[1, 3, 32, 32], &mut rng)];
    inputs.extend(names.iter().map(|n| model.params.get(n).unwrap().clone()));
    let targets = vec![vec![
        GtBox { class: 0, cx: 0.3, cy: 0.4, w: 0.2, h: 0.2 },
        GtBox { class: 2, cx: 0.7, cy: 0.6, w: 0.8, h: 0.7 },
    ]];
    let opts = FdOptions { threshold: 1e-3, max_probes_per_input: 2, ..FdOptions::default() };
    let report = finite_diff_check(&inputs, opts, |tape, ids| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(ids[1..].iter().copied()));
        let trace = model_forward(tape, &cfg, &bound, ids[0])?;
        Ok(detection_loss(tape, &cfg, &trace.heads, &targets)?.total)
    })?;
    Ok(CheckOutcome { name: "model", report })
}

/// The drivers behind a selector name: `all` or one block.
pub fn checks_for(module: &str) -> Result<Vec<fn() -> Result<CheckOutcome>>> {
    Ok(match module {
        "all" => vec![
            check_wave,
            check_attention,
            check_group_kan,
            check_akat_block,
            check_cpf,
            check_mdfc,
            check_model,
        ],
        "wave" => vec![check_wave],
        "akat" => vec![check_attention, check_group_kan, check_akat_block],
        "cpf" => vec![check_cpf],
        "mdfc" => vec![check_mdfc],
        "model" => vec![check_model],
        other => {
            return Err(Error::config(
                "module",
                format!("unknown module {other:?}; expected all|wave|akat|cpf|mdfc|model"),
            ))
        }
    })
}
