//! Asymmetric attention with a spline feature transform for the deep stages.
//!
//! Queries and keys project to a reduced width while values keep full width,
//! a depthwise convolution of the values supplies a positional bias, and the
//! channel mixer is a grouped spline activation instead of an MLP. Both
//! sub-blocks are pre-normalized with their own residuals.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::param::{register_conv, register_norm, Bound, ParamStore};
use crate::spline::SplineGrid;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct AkatConfig {
    pub channels: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub heads: usize,
    pub groups: usize,
    pub grid: SplineGrid,
}

impl AkatConfig {
    /// Default shape: values keep the block width, queries and keys shrink
    /// to a quarter of it.
    pub fn new(channels: usize, heads: usize, groups: usize) -> Result<Self> {
        AkatConfig::with_dims(channels, channels / 4, channels, heads, groups)
    }

    pub fn with_dims(channels: usize, d_qk: usize, d_v: usize, heads: usize, groups: usize) -> Result<Self> {
        let cfg = AkatConfig {
            channels,
            d_qk,
            d_v,
            heads,
            groups,
            grid: SplineGrid::standard(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_qk > self.d_v {
            return Err(Error::config("d_qk", "query/key width cannot exceed the value width"));
        }
        if self.heads == 0 || self.d_qk % self.heads != 0 || self.d_v % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{} heads must divide d_qk {} and d_v {}", self.heads, self.d_qk, self.d_v),
            ));
        }
        if self.d_qk == 0 {
            return Err(Error::config("d_qk", "query/key width must be positive"));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::config(
                "groups",
                format!("{} groups must divide {} channels", self.groups, self.channels),
            ));
        }
        Ok(())
    }

    pub fn head_dim_qk(&self) -> usize {
        self.d_qk / self.heads
    }

    pub fn head_dim_v(&self) -> usize {
        self.d_v / self.heads
    }

    pub fn q_spec(&self) -> ConvSpec {
        ConvSpec::new(self.channels, self.d_qk, 1, 1, 0).no_bias()
    }

    pub fn k_spec(&self) -> ConvSpec {
        self.q_spec()
    }

    pub fn v_spec(&self) -> ConvSpec {
        ConvSpec::new(self.channels, self.d_v, 1, 1, 0).no_bias()
    }

    pub fn pos_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.d_v, 3, 1, 1).no_bias()
    }

    pub fn out_spec(&self) -> ConvSpec {
        ConvSpec::new(self.d_v, self.channels, 1, 1, 0)
    }
}

pub struct AkatParams {
    pub q_w: VarId,
    pub k_w: VarId,
    pub v_w: VarId,
    pub pos_w: VarId,
    pub out_w: VarId,
    pub out_b: VarId,
    pub n1_g: VarId,
    pub n1_b: VarId,
    pub n2_g: VarId,
    pub n2_b: VarId,
    pub kan_alpha: VarId,
    pub kan_base: VarId,
}

impl AkatParams {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(AkatParams {
            q_w: bound.id(&format!("{prefix}.q.w"))?,
            k_w: bound.id(&format!("{prefix}.k.w"))?,
            v_w: bound.id(&format!("{prefix}.v.w"))?,
            pos_w: bound.id(&format!("{prefix}.pos.w"))?,
            out_w: bound.id(&format!("{prefix}.out.w"))?,
            out_b: bound.id(&format!("{prefix}.out.b"))?,
            n1_g: bound.id(&format!("{prefix}.n1.g"))?,
            n1_b: bound.id(&format!("{prefix}.n1.bias"))?,
            n2_g: bound.id(&format!("{prefix}.n2.g"))?,
            n2_b: bound.id(&format!("{prefix}.n2.bias"))?,
            kan_alpha: bound.id(&format!("{prefix}.kan.alpha"))?,
            kan_base: bound.id(&format!("{prefix}.kan.base"))?,
        })
    }
}

pub fn register_akat(store: &mut ParamStore, prefix: &str, cfg: &AkatConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    register_conv(store, &format!("{prefix}.q"), &cfg.q_spec(), rng)?;
    register_conv(store, &format!("{prefix}.k"), &cfg.k_spec(), rng)?;
    register_conv(store, &format!("{prefix}.v"), &cfg.v_spec(), rng)?;
    register_conv(store, &format!("{prefix}.pos"), &cfg.pos_spec(), rng)?;
    register_conv(store, &format!("{prefix}.out"), &cfg.out_spec(), rng)?;
    register_norm(store, &format!("{prefix}.n1"), cfg.channels)?;
    register_norm(store, &format!("{prefix}.n2"), cfg.channels)?;
    let alpha = Tensor::randn(&[cfg.groups, cfg.grid.num_basis()], rng).map(|v| v * 0.1);
    store.insert(&format!("{prefix}.kan.alpha"), alpha)?;
    store.insert(&format!("{prefix}.kan.base"), Tensor::ones(&[cfg.groups]))
}

struct AttnParts {
    probs: VarId,
    v_tokens: VarId,
}

fn attention_parts(tape: &mut Tape, cfg: &AkatConfig, p: &AkatParams, x: VarId) -> Result<AttnParts> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape(
            "asymmetric_attention",
            format!("expected [N,{},H,W] input, got {:?}", cfg.channels, shape),
        ));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let t = h * w;
    let b = n * cfg.heads;

    let q = tape.conv2d(x, &cfg.q_spec(), p.q_w, None)?;
    let k = tape.conv2d(x, &cfg.k_spec(), p.k_w, None)?;
    let v = tape.conv2d(x, &cfg.v_spec(), p.v_w, None)?;
    let pos = tape.conv2d(v, &cfg.pos_spec(), p.pos_w, None)?;

    let pos_heads = tape.reshape(pos, &[n, cfg.heads, cfg.head_dim_v(), t])?;
    let pos_mean = tape.mean_axis(pos_heads, 2)?;
    let key_bias = tape.reshape(pos_mean, &[b, 1, t])?;

    let q3 = tape.reshape(q, &[b, cfg.head_dim_qk(), t])?;
    let k3 = tape.reshape(k, &[b, cfg.head_dim_qk(), t])?;
    let qt = tape.permute(q3, &[0, 2, 1])?;
    let logits = tape.matmul(qt, k3)?;
    let scaled = tape.mul_scalar(logits, 1.0 / (cfg.head_dim_qk() as f64).sqrt())?;
    let biased = tape.add(scaled, key_bias)?;
    let probs = tape.softmax(biased)?;

    let v3 = tape.reshape(v, &[b, cfg.head_dim_v(), t])?;
    let v_tokens = tape.permute(v3, &[0, 2, 1])?;
    Ok(AttnParts { probs, v_tokens })
}

/// Attention probabilities as `[N*heads, tokens, tokens]`, for diagnostics.
pub fn attention_weights(tape: &mut Tape, cfg: &AkatConfig, p: &AkatParams, x: VarId) -> Result<VarId> {
    Ok(attention_parts(tape, cfg, p, x)?.probs)
}

fn attn_core(tape: &mut Tape, cfg: &AkatConfig, p: &AkatParams, x: VarId) -> Result<VarId> {
    let shape = tape.value(x).shape().to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let parts = attention_parts(tape, cfg, p, x)?;
    let mixed = tape.matmul(parts.probs, parts.v_tokens)?;
    let back = tape.permute(mixed, &[0, 2, 1])?;
    let spatial = tape.reshape(back, &[n, cfg.d_v, h, w])?;
    tape.conv2d(spatial, &cfg.out_spec(), p.out_w, Some(p.out_b))
}

/// Attention with its own residual; no normalization inside.
pub fn asymmetric_attention(tape: &mut Tape, cfg: &AkatConfig, p: &AkatParams, x: VarId) -> Result<VarId> {
    let core = attn_core(tape, cfg, p, x)?;
    tape.add(x, core)
}

/// The grouped spline activation on its own.
pub fn group_kan(tape: &mut Tape, cfg: &AkatConfig, p: &AkatParams, x: VarId) -> Result<VarId> {
    tape.group_kan(x, p.kan_alpha, p.kan_base, &cfg.grid)
}

/// Pre-normalized attention sub-block: `x + attn(norm1(x))`.
pub fn attention_block(tape: &mut Tape, cfg: &AkatConfig, p: &AkatParams, x: VarId) -> Result<VarId> {
    let n1 = tape.channel_norm(x, p.n1_g, p.n1_b)?;
    let core = attn_core(tape, cfg, p, n1)?;
    tape.add(x, core)
}

/// Pre-normalized spline sub-block: `x + kan(norm2(x))`.
pub fn kan_block(tape: &mut Tape, cfg: &AkatConfig, p: &AkatParams, x: VarId) -> Result<VarId> {
    let n2 = tape.channel_norm(x, p.n2_g, p.n2_b)?;
    let core = tape.group_kan(n2, p.kan_alpha, p.kan_base, &cfg.grid)?;
    tape.add(x, core)
}

pub fn akat_forward(tape: &mut Tape, cfg: &AkatConfig, p: &AkatParams, x: VarId) -> Result<VarId> {
    let y1 = attention_block(tape, cfg, p, x)?;
    kan_block(tape, cfg, p, y1)
}

pub fn akat_forward_bound(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &AkatConfig,
    x: VarId,
) -> Result<VarId> {
    let p = AkatParams::bind(bound, prefix)?;
    akat_forward(tape, cfg, &p, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d;
    use crate::gradcheck::{finite_diff_check, FdOptions};
    use crate::spline::DEGREE;
    use rand_chacha::rand_core::SeedableRng;

    fn param_tensors(cfg: &AkatConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
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

    fn leaf_params(tape: &mut Tape, tensors: &[Tensor]) -> AkatParams {
        let ids: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        params_from_ids(&ids)
    }

    fn params_from_ids(ids: &[VarId]) -> AkatParams {
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

    #[test]
    fn single_token_attention_is_projected_value_plus_input() {
        let cfg = AkatConfig::new(8, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let tensors = param_tensors(&cfg, &mut rng);
        let x = Tensor::randn(&[2, 8, 1, 1], &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let xid = tape.leaf(x.clone()).unwrap();
        let y = asymmetric_attention(&mut tape, &cfg, &p, xid).unwrap();

        let v = conv2d(&x, &cfg.v_spec(), &tensors[2], None).unwrap();
        let mut want = conv2d(&v, &cfg.out_spec(), &tensors[4], Some(&tensors[5])).unwrap();
        for (o, xv) in want.data_mut().iter_mut().zip(x.data()) {
            *o += xv;
        }
        assert!(tape.value(y).max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn zero_keys_and_zero_bias_average_the_values() {
        let cfg = AkatConfig::with_dims(4, 1, 4, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut tensors = param_tensors(&cfg, &mut rng);
        tensors[1] = Tensor::zeros(&cfg.k_spec().weight_shape());
        tensors[3] = Tensor::zeros(&cfg.pos_spec().weight_shape());
        let x = Tensor::randn(&[1, 4, 2, 3], &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let xid = tape.leaf(x.clone()).unwrap();
        let y = asymmetric_attention(&mut tape, &cfg, &p, xid).unwrap();

        let v = conv2d(&x, &cfg.v_spec(), &tensors[2], None).unwrap();
        let mut mean = Tensor::zeros(&[1, 4, 1, 1]);
        for c in 0..4 {
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..3 {
                    acc += v.at4(0, c, i, j);
                }
            }
            mean.data_mut()[c] = acc / 6.0;
        }
        let proj = conv2d(&mean, &cfg.out_spec(), &tensors[4], Some(&tensors[5])).unwrap();
        for c in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    let got = tape.value(y).at4(0, c, i, j);
                    let want = proj.at4(0, c, 0, 0) + x.at4(0, c, i, j);
                    assert!((got - want).abs() <= 1e-12, "c{c} i{i} j{j}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn two_token_attention_matches_hand_computation() {
        let cfg = AkatConfig::with_dims(4, 1, 4, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let qw = Tensor::randn(&[1, 4, 1, 1], &mut rng);
        let kw = Tensor::randn(&[1, 4, 1, 1], &mut rng);
        let vw = Tensor::randn(&[4, 4, 1, 1], &mut rng);
        let pw = Tensor::randn(&[4, 1, 3, 3], &mut rng);
        let mut eye = Tensor::zeros(&[4, 4, 1, 1]);
        for c in 0..4 {
            eye.data_mut()[c * 4 + c] = 1.0;
        }
        let x = Tensor::randn(&[1, 4, 1, 2], &mut rng);

        let mut tape = Tape::new();
        let ids = vec![
            tape.leaf(qw.clone()).unwrap(),
            tape.leaf(kw.clone()).unwrap(),
            tape.leaf(vw.clone()).unwrap(),
            tape.leaf(pw.clone()).unwrap(),
            tape.leaf(eye).unwrap(),
            tape.leaf(Tensor::zeros(&[4])).unwrap(),
            tape.leaf(Tensor::ones(&[4])).unwrap(),
            tape.leaf(Tensor::zeros(&[4])).unwrap(),
            tape.leaf(Tensor::ones(&[4])).unwrap(),
            tape.leaf(Tensor::zeros(&[4])).unwrap(),
            tape.leaf(Tensor::zeros(&[2, 11])).unwrap(),
            tape.leaf(Tensor::zeros(&[2])).unwrap(),
        ];
        let p = params_from_ids(&ids);
        let xid = tape.leaf(x.clone()).unwrap();
        let y = asymmetric_attention(&mut tape, &cfg, &p, xid).unwrap();

        let xv = |c: usize, t: usize| x.at4(0, c, 0, t);
        let dot = |w: &Tensor, t: usize| (0..4).map(|c| w.data()[c] * xv(c, t)).sum::<f64>();
        let q = [dot(&qw, 0), dot(&qw, 1)];
        let k = [dot(&kw, 0), dot(&kw, 1)];
        let mut v = [[0.0; 2]; 4];
        for c in 0..4 {
            for t in 0..2 {
                v[c][t] = (0..4).map(|i| vw.data()[c * 4 + i] * xv(i, t)).sum();
            }
        }
        // Depthwise 3x3 with zero padding on a 1x2 plane: only the middle
        // kernel row touches real samples.
        let mut pbar = [0.0; 2];
        for c in 0..4 {
            let row = &pw.data()[c * 9 + 3..c * 9 + 6];
            let p0 = row[1] * v[c][0] + row[2] * v[c][1];
            let p1 = row[0] * v[c][0] + row[1] * v[c][1];
            pbar[0] += p0 / 4.0;
            pbar[1] += p1 / 4.0;
        }
        for tq in 0..2 {
            let l0 = q[tq] * k[0] + pbar[0];
            let l1 = q[tq] * k[1] + pbar[1];
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            let z = e0 + e1;
            let (a0, a1) = (e0 / z, e1 / z);
            for c in 0..4 {
                let want = a0 * v[c][0] + a1 * v[c][1] + xv(c, tq);
                let got = tape.value(y).at4(0, c, 0, tq);
                assert!((got - want).abs() <= 1e-12, "c{c} t{tq}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = AkatConfig::new(8, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let tensors = param_tensors(&cfg, &mut rng);
        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let x = tape.leaf(Tensor::randn(&[1, 8, 3, 3], &mut rng)).unwrap();
        let probs = attention_weights(&mut tape, &cfg, &p, x).unwrap();
        assert_eq!(tape.value(probs).shape(), &[2, 9, 9]);
        let sums = tape.sum_axis(probs, 2).unwrap();
        for s in tape.value(sums).data() {
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn reduced_query_key_width_saves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let narrow = AkatConfig::new(16, 2, 2).unwrap();
        let square = AkatConfig::with_dims(16, 16, 16, 2, 2).unwrap();
        let mut count = |cfg: &AkatConfig| -> usize {
            let mut store = ParamStore::new();
            register_akat(&mut store, "a", cfg, &mut rng).unwrap();
            store.get("a.q.w").unwrap().numel() + store.get("a.k.w").unwrap().numel()
        };
        assert!(count(&narrow) < count(&square));
    }

    #[test]
    fn kan_base_path_alone_is_silu() {
        let cfg = AkatConfig::new(4, 1, 2).unwrap();
        let mut tape = Tape::new();
        let alpha = tape.leaf(Tensor::zeros(&[2, 11])).unwrap();
        let base = tape.leaf(Tensor::ones(&[2])).unwrap();
        let vals = [-4.2, -1.3, -0.2, 0.0, 0.4, 1.9, 3.7, 0.8];
        let x = tape.leaf(Tensor::new(&[1, 4, 1, 2], vals.to_vec()).unwrap()).unwrap();
        let y = tape.group_kan(x, alpha, base, &cfg.grid).unwrap();
        for (got, v) in tape.value(y).data().iter().zip(vals) {
            let want = v / (1.0 + (-v).exp());
            assert!((got - want).abs() <= 1e-12);
        }
    }

    fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            let d = a[col][col];
            assert!(d.abs() > 1e-12, "singular collocation matrix");
            for row in col + 1..n {
                let f = a[row][col] / d;
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in row + 1..n {
                acc -= a[row][k] * x[k];
            }
            x[row] = acc / a[row][row];
        }
        x
    }

    fn basis_row(grid: &SplineGrid, x: f64) -> Vec<f64> {
        let mut row = vec![0.0; grid.num_basis()];
        let (first, vals) = grid.basis_nonzero(x);
        for (r, v) in vals.iter().enumerate() {
            row[first + r] = *v;
        }
        row
    }

    #[test]
    fn collocation_solved_coefficients_reproduce_identity() {
        let grid = SplineGrid::standard();
        let m = grid.num_basis();
        let points: Vec<f64> = (0..m).map(|i| -3.0 + 6.0 * i as f64 / (m - 1) as f64).collect();
        let a: Vec<Vec<f64>> = points.iter().map(|p| basis_row(&grid, *p)).collect();
        let alpha = gauss_solve(a, points.clone());

        let mut tape = Tape::new();
        let alpha_t = {
            let mut t = Tensor::zeros(&[1, m]);
            t.data_mut().copy_from_slice(&alpha);
            tape.leaf(t).unwrap()
        };
        let base = tape.leaf(Tensor::zeros(&[1])).unwrap();
        let step = 6.0 / 8.0;
        let margin = DEGREE as f64 * step;
        let xs: Vec<f64> = (0..=40)
            .map(|i| (-3.0 + margin) + (6.0 - 2.0 * margin) * i as f64 / 40.0)
            .collect();
        let x = tape.leaf(Tensor::new(&[1, 1, 1, xs.len()], xs.clone()).unwrap()).unwrap();
        let y = tape.group_kan(x, alpha_t, base, &grid).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&xs) {
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn single_coefficient_bump_matches_de_boor_recursion() {
        fn deboor(knots: &[f64], m: usize, k: usize, x: f64) -> f64 {
            if k == 0 {
                return if knots[m] <= x && x < knots[m + 1] { 1.0 } else { 0.0 };
            }
            let mut v = 0.0;
            let d1 = knots[m + k] - knots[m];
            if d1 > 0.0 {
                v += (x - knots[m]) / d1 * deboor(knots, m, k - 1, x);
            }
            let d2 = knots[m + k + 1] - knots[m + 1];
            if d2 > 0.0 {
                v += (knots[m + k + 1] - x) / d2 * deboor(knots, m + 1, k - 1, x);
            }
            v
        }
        let grid = SplineGrid::standard();
        let step = 0.75;
        let knots: Vec<f64> = (0..15).map(|i| -3.0 + (i as f64 - 3.0) * step).collect();
        let xs: Vec<f64> = (0..10).map(|i| -2.87 + 0.61 * i as f64).collect();
        for m in [0usize, 3, 5, 10] {
            let mut tape = Tape::new();
            let mut alpha = Tensor::zeros(&[1, 11]);
            alpha.data_mut()[m] = 1.0;
            let alpha = tape.leaf(alpha).unwrap();
            let base = tape.leaf(Tensor::zeros(&[1])).unwrap();
            let x = tape.leaf(Tensor::new(&[1, 1, 1, xs.len()], xs.clone()).unwrap()).unwrap();
            let y = tape.group_kan(x, alpha, base, &grid).unwrap();
            for (got, xv) in tape.value(y).data().iter().zip(&xs) {
                let want = deboor(&knots, m, DEGREE, *xv);
                assert!((got - want).abs() <= 1e-12, "basis {m} at {xv}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn same_group_channels_share_their_scalar_map() {
        let cfg = AkatConfig::new(4, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let alpha = Tensor::randn(&[2, 11], &mut rng);
        let base = Tensor::randn(&[2], &mut rng);
        let x = Tensor::randn(&[1, 4, 2, 2], &mut rng);
        let mut swapped = x.clone();
        for s in 0..4 {
            let v0 = x.data()[s];
            let v1 = x.data()[4 + s];
            swapped.data_mut()[s] = v1;
            swapped.data_mut()[4 + s] = v0;
        }
        let eval = |inp: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.leaf(alpha.clone()).unwrap();
            let b = tape.leaf(base.clone()).unwrap();
            let xid = tape.leaf(inp.clone()).unwrap();
            let y = tape.group_kan(xid, a, b, &cfg.grid).unwrap();
            tape.value(y).clone()
        };
        let plain = eval(&x);
        let perm = eval(&swapped);
        for s in 0..4 {
            assert_eq!(plain.data()[s], perm.data()[4 + s]);
            assert_eq!(plain.data()[4 + s], perm.data()[s]);
        }
    }

    #[test]
    fn spline_map_is_lipschitz_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        let grid = SplineGrid::standard();
        let alpha = Tensor::randn(&[1, 11], &mut rng);
        let base = Tensor::randn(&[1], &mut rng);
        let step = 0.75;
        let max_diff = alpha
            .data()
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0f64, f64::max);
        let lip = max_diff / step + 1.1 * base.data()[0].abs() + 1.0;
        let delta = 1e-6;
        let xs: Vec<f64> = (0..200).map(|i| -4.0 + 8.0 * i as f64 / 199.0).collect();
        let eval = |points: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(alpha.clone()).unwrap();
            let b = tape.leaf(base.clone()).unwrap();
            let x = tape.leaf(Tensor::new(&[1, 1, 1, points.len()], points.to_vec()).unwrap()).unwrap();
            let y = tape.group_kan(x, a, b, &grid).unwrap();
            tape.value(y).clone()
        };
        let lo = eval(&xs);
        let hi = eval(&xs.iter().map(|v| v + delta).collect::<Vec<_>>());
        for (a, b) in lo.data().iter().zip(hi.data()) {
            assert!((a - b).abs() <= lip * delta, "jump {} exceeds {}", (a - b).abs(), lip * delta);
        }
    }

    #[test]
    fn zeroed_sub_blocks_pass_the_input_through() {
        let cfg = AkatConfig::new(8, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(87);
        let mut tape = Tape::new();
        let zeros = |tape: &mut Tape, shape: &[usize]| tape.leaf(Tensor::zeros(shape)).unwrap();
        let ids = vec![
            zeros(&mut tape, &cfg.q_spec().weight_shape()),
            zeros(&mut tape, &cfg.k_spec().weight_shape()),
            zeros(&mut tape, &cfg.v_spec().weight_shape()),
            zeros(&mut tape, &cfg.pos_spec().weight_shape()),
            zeros(&mut tape, &cfg.out_spec().weight_shape()),
            zeros(&mut tape, &[8]),
            tape.leaf(Tensor::ones(&[8])).unwrap(),
            zeros(&mut tape, &[8]),
            tape.leaf(Tensor::ones(&[8])).unwrap(),
            zeros(&mut tape, &[8]),
            zeros(&mut tape, &[2, 11]),
            zeros(&mut tape, &[2]),
        ];
        let p = params_from_ids(&ids);
        let x = Tensor::randn(&[1, 8, 2, 2], &mut rng);
        let xid = tape.leaf(x.clone()).unwrap();
        let y = akat_forward(&mut tape, &cfg, &p, xid).unwrap();
        assert_eq!(tape.value(y).max_abs_diff(&x), 0.0);
    }

    #[test]
    fn forward_equals_the_sub_block_composition() {
        let cfg = AkatConfig::new(8, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let tensors = param_tensors(&cfg, &mut rng);
        let x = Tensor::randn(&[2, 8, 2, 3], &mut rng);

        let mut tape = Tape::new();
        let p = leaf_params(&mut tape, &tensors);
        let xid = tape.leaf(x.clone()).unwrap();
        let fused = akat_forward(&mut tape, &cfg, &p, xid).unwrap();

        let mut tape2 = Tape::new();
        let p2 = leaf_params(&mut tape2, &tensors);
        let xid2 = tape2.leaf(x).unwrap();
        let y1 = attention_block(&mut tape2, &cfg, &p2, xid2).unwrap();
        let y2 = kan_block(&mut tape2, &cfg, &p2, y1).unwrap();
        assert_eq!(tape.value(fused), tape2.value(y2));
    }

    #[test]
    fn block_passes_finite_differences() {
        let cfg = AkatConfig::new(8, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let mut inputs = vec![Tensor::randn(&[1, 8, 4, 4], &mut rng)];
        inputs.extend(param_tensors(&cfg, &mut rng));
        let opts = FdOptions { max_probes_per_input: 40, ..FdOptions::default() };
        let report = finite_diff_check(&inputs, opts, |tape, ids| {
            let p = params_from_ids(&ids[1..]);
            let y = akat_forward(tape, &cfg, &p, ids[0])?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn rejects_inconsistent_configs() {
        assert!(AkatConfig::with_dims(8, 16, 8, 2, 2).is_err());
        assert!(AkatConfig::with_dims(8, 3, 8, 2, 2).is_err());
        assert!(AkatConfig::new(8, 2, 3).is_err());
    }
}
