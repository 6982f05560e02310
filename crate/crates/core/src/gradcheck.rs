//! Central-difference verification of tape gradients.
//!
//! The probe rebuilds the whole graph twice per perturbed element, so the
//! checked function must be a pure closure over its tensor inputs. Step size
//! scales with the magnitude of the probed value; the error metric is
//! relative to `max(1, |analytic|, |numeric|)` so near-zero gradients are
//! compared absolutely.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub threshold: f64,
    pub h_scale: f64,
    /// Cap on probed elements per input; `0` probes everything. Probes are
    /// spread evenly across the buffer, so large tensors stay affordable.
    pub max_probes_per_input: usize,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            threshold: 1e-4,
            h_scale: 1e-5,
            max_probes_per_input: 0,
        }
    }
}

/// Worst disagreement seen during a check.
#[derive(Clone, Copy, Debug)]
pub struct FdWorst {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug)]
pub struct FdReport {
    pub max_rel: f64,
    pub threshold: f64,
    pub probes: usize,
    pub worst: Option<FdWorst>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.threshold
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel err {:.3e} over {} probes (threshold {:.1e})",
            self.max_rel, self.probes, self.threshold
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst at input {} index {}: analytic {:.6e} vs numeric {:.6e}",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Compare tape gradients against central differences for every (sampled)
/// element of every input. `build` receives leaves in input order and must
/// return a scalar loss node.
pub fn finite_diff_check<F>(inputs: &[Tensor], opts: FdOptions, build: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let run = |tensors: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let ids = tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::contract("finite_diff_check", "loss must be a scalar"));
        }
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let per_input = ids.iter().map(|id| grads.get(*id).cloned()).collect();
        Ok((value, per_input))
    };

    let (_, analytic) = run(inputs)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = FdReport {
        max_rel: 0.0,
        threshold: opts.threshold,
        probes: 0,
        worst: None,
    };

    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = if opts.max_probes_per_input == 0 || n <= opts.max_probes_per_input {
            1
        } else {
            n.div_ceil(opts.max_probes_per_input)
        };
        let mut j = 0;
        while j < n {
            let x = input.data()[j];
            let h = opts.h_scale * x.abs().max(1.0);

            work[i].data_mut()[j] = x + h;
            let mut tape = Tape::new();
            let plus = eval_scalar(&mut tape, &work, &build)?;
            work[i].data_mut()[j] = x - h;
            let mut tape2 = Tape::new();
            let minus = eval_scalar(&mut tape2, &work, &build)?;
            work[i].data_mut()[j] = x;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.probes += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = Some(FdWorst {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
            j += stride;
        }
    }
    Ok(report)
}

fn eval_scalar<F>(tape: &mut Tape, tensors: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let ids = tensors
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(tape, &ids)?;
    Ok(tape.value(loss).data()[0])
}
