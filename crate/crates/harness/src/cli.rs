//! The `fmcdet` command-line front end.
//!
//! Exit codes: 0 on success, 1 on a contract or configuration violation
//! (including bad flags), 2 on I/O failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fmc_core::error::{Error, Result};
use fmc_core::freq::{decompose, fft2d};
use fmc_core::io::{load_checkpoint, read_tensor, save_checkpoint, write_tensor};
use fmc_core::model::{build_model, merge_all_reparam, model_forward, reflect_pad_to, Model};
use fmc_core::tape::Tape;
use fmc_core::Tensor;

use crate::checks::checks_for;
use crate::config::{model_from_config, model_to_config, FlatConfig};
use crate::data::{generate_dataset, Dataset, SceneSpec};
use crate::eval::ApSummary;
use crate::train::{evaluate_model, run_training, TrainSettings};

#[derive(Parser)]
#[command(name = "fmcdet", about = "Frequency-decoupled small-object detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify tape gradients against central differences
    Gradcheck {
        /// all, wave, akat, cpf, mdfc, or model
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Split a tensor file into frequency components
    Decompose {
        /// Tensor file, [C,H,W] or [N,C,H,W]
        #[arg(long)]
        input: PathBuf,
        /// hwt or fft
        #[arg(long)]
        mode: String,
        /// Pyramid depth for hwt; ignored by fft
        #[arg(long, default_value_t = 1)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collapse branch convolutions in a checkpoint into single kernels
    MergeReparam {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Render a synthetic dataset from a scene config
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write checkpoint plus metrics
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Confidence floor for decoded boxes
        #[arg(long, default_value_t = 0.05)]
        conf: f64,
    },
    /// Run one image through a checkpoint and dump an intermediate map
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        layer: String,
        /// Defaults to <layer>.fmct in the working directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse `args` and run the chosen subcommand, mapping errors to exit codes.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e @ Error::Io(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gradcheck { module } => cmd_gradcheck(&module),
        Cmd::Decompose { input, mode, depth, out } => cmd_decompose(&input, &mode, depth, &out),
        Cmd::MergeReparam { ckpt } => cmd_merge_reparam(&ckpt),
        Cmd::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Cmd::Train { config, data, out } => cmd_train(&config, &data, &out),
        Cmd::Eval { ckpt, data, conf } => cmd_eval(&ckpt, &data, conf).map(|s| println!("{s}")),
        Cmd::ExportFeatures { ckpt, input, layer, out } => {
            cmd_export_features(&ckpt, &input, &layer, out.as_deref())
        }
    }
}

fn cmd_gradcheck(module: &str) -> Result<()> {
    let mut ok = true;
    for check in checks_for(module)? {
        let outcome = check()?;
        println!("{}", outcome.line());
        ok &= outcome.report.passed();
    }
    if !ok {
        return Err(Error::contract("gradcheck", "tape gradients disagree with finite differences"));
    }
    Ok(())
}

/// Accept [C,H,W] or [N,C,H,W]; everything downstream wants rank 4.
fn load_as_batch(path: &Path) -> Result<Tensor> {
    let t = read_tensor(path)?;
    match t.rank() {
        4 => Ok(t),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        }
        r => Err(Error::shape(
            "decompose",
            format!("expected a rank 3 or 4 tensor, got rank {r}"),
        )),
    }
}

fn cmd_decompose(input: &Path, mode: &str, depth: usize, out: &Path) -> Result<()> {
    if depth == 0 {
        return Err(Error::config("depth", "depth must be at least 1"));
    }
    let x = load_as_batch(input)?;
    fs::create_dir_all(out)?;
    match mode {
        "hwt" => {
            let pyr = decompose(&x, depth)?;
            for (i, bands) in pyr.detail.iter().enumerate() {
                let l = i + 1;
                write_tensor(&out.join(format!("l{l}_lh.fmct")), &bands.lh)?;
                write_tensor(&out.join(format!("l{l}_hl.fmct")), &bands.hl)?;
                write_tensor(&out.join(format!("l{l}_hh.fmct")), &bands.hh)?;
            }
            write_tensor(&out.join("coarse_ll.fmct"), &pyr.coarse)?;
            println!("wrote {} detail levels plus coarse to {}", depth, out.display());
        }
        "fft" => {
            let sp = fft2d(&x)?;
            write_tensor(&out.join("re.fmct"), &sp.re)?;
            write_tensor(&out.join("im.fmct"), &sp.im)?;
            println!("wrote re/im spectra to {}", out.display());
        }
        other => {
            return Err(Error::config("mode", format!("unknown mode {other:?}; expected hwt|fft")))
        }
    }
    Ok(())
}

fn cmd_merge_reparam(ckpt: &Path) -> Result<()> {
    let mut store = load_checkpoint(ckpt)?;
    let merged = merge_all_reparam(&mut store)?;
    save_checkpoint(ckpt, &store)?;
    println!("merged {merged} branch blocks in {}", ckpt.display());
    Ok(())
}

fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path)?;
    let mut cfg = FlatConfig::parse(&text)?;
    let spec = SceneSpec::from_config(&mut cfg)?;
    let images = cfg.take_usize("dataset.images", 32)?;
    cfg.finish()?;
    generate_dataset(&spec, images, out)?;
    println!("wrote {images} images to {}", out.display());
    Ok(())
}

/// The checkpoint's model shape travels in a plain-text sidecar next to the
/// weights, written by `train` and read back by `eval`/`export-features`.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".cfg");
    PathBuf::from(s)
}

fn load_model(ckpt: &Path, default_extent: (usize, usize)) -> Result<Model> {
    let params = load_checkpoint(ckpt)?;
    let side = sidecar_path(ckpt);
    let text = fs::read_to_string(&side)
        .map_err(|e| Error::Io(format!("cannot read model sidecar {}: {e}", side.display())))?;
    let mut cfg = FlatConfig::parse(&text)?;
    let model_cfg = model_from_config(&mut cfg, default_extent)?;
    cfg.finish()?;
    Ok(Model { cfg: model_cfg, params })
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config)?;
    let mut cfg = FlatConfig::parse(&text)?;
    let data = Dataset::load(data_dir)?;
    let model_cfg = model_from_config(&mut cfg, data.extent)?;
    let settings = TrainSettings::from_config(&mut cfg)?;
    cfg.finish()?;

    let model = build_model(&model_cfg, settings.seed)?;
    let mut lines = Vec::new();
    let outcome = {
        let mut log = |line: &str| {
            println!("{line}");
            lines.push(line.to_string());
        };
        run_training(model, &settings, &data, &mut log)?
    };

    fs::create_dir_all(out)?;
    let ckpt = out.join("model.fmcw");
    save_checkpoint(&ckpt, &outcome.model.params)?;
    fs::write(sidecar_path(&ckpt), model_to_config(&model_cfg))?;
    fs::write(out.join("metrics.txt"), lines.join("\n") + "\n")?;
    println!("saved {}", ckpt.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data_dir: &Path, conf: f64) -> Result<ApSummary> {
    let data = Dataset::load(data_dir)?;
    let model = load_model(ckpt, data.extent)?;
    evaluate_model(&model, &data, conf, 0.5)
}

fn cmd_export_features(ckpt: &Path, input: &Path, layer: &str, out: Option<&Path>) -> Result<()> {
    let img = load_as_batch(input)?;
    let extent = (img.shape()[2], img.shape()[3]);
    let model = load_model(ckpt, extent)?;
    let img = if extent == model.cfg.input_extent {
        img
    } else {
        reflect_pad_to(&img, model.cfg.input_extent)?
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let image = tape.constant(img)?;
    let trace = model_forward(&mut tape, &model.cfg, &bound, image)?;
    let id = trace.feature(layer)?;
    let map = tape.value(id);

    let default = PathBuf::from(format!("{layer}.fmct"));
    let path = out.unwrap_or(&default);
    write_tensor(path, map)?;
    println!("wrote {} with shape {:?}", path.display(), map.shape());
    Ok(())
}
