//! Gradient verification harness.
//!
//! Compares every parameter block's reverse-mode gradient against central
//! finite differences of the same loss. The finite-difference side only ever
//! runs forward passes, so the two routes stay independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{Architecture, ModelError};
use crate::tape::{finite_diff_grad, Mode, Tape};
use crate::tensor::Tensor;
use crate::train::bce_loss;

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-7 {
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}

/// Outcome of checking one parameter block.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

/// Checks every parameter block of `model` on a synthetic batch.
///
/// The loss is the multi-task BCE over random {0,1} labels. Forward passes
/// run in [`Mode::Frozen`] so repeated evaluation does not drift the
/// batch-norm running statistics. `corrupt_block`, when set, perturbs that
/// block's reverse-mode gradient before comparison, a self-test hook that
/// must make the check fail.
pub fn grad_check(
    model: &mut dyn Architecture,
    batch_size: usize,
    tolerance: f64,
    h: f64,
    seed: u64,
    corrupt_block: Option<&str>,
) -> Result<GradCheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = model.config().input_width;
    let features = Tensor::matrix(
        batch_size,
        width,
        (0..batch_size * width)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect(),
    );
    let labels: Vec<Vec<f64>> = model
        .tasks()
        .iter()
        .map(|_| {
            (0..batch_size)
                .map(|_| f64::from(rng.gen_bool(0.5)))
                .collect()
        })
        .collect();

    let loss_of = |model: &mut dyn Architecture| -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &features, Mode::Frozen)?;
        let probs: Vec<_> = trace.task_probs.iter().map(|(_, v)| *v).collect();
        let loss = bce_loss(&mut tape, &probs, &labels)?;
        Ok(tape.value(loss).item())
    };

    // Reverse-mode gradients for every block in one pass.
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &features, Mode::Frozen)?;
    let probs: Vec<_> = trace.task_probs.iter().map(|(_, v)| *v).collect();
    let loss = bce_loss(&mut tape, &probs, &labels)?;
    tape.backward(loss)?;

    let mut autodiff: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p| {
        let var = trace.binding[p.id];
        let g = tape
            .grad(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; p.value.len()]);
        autodiff.push((p.name.clone(), g));
    });
    if let Some(name) = corrupt_block {
        for (n, g) in autodiff.iter_mut() {
            if n == name {
                for v in g.iter_mut() {
                    *v += 1.0;
                }
            }
        }
    }

    // Finite differences, block by block.
    let names: Vec<String> = autodiff.iter().map(|(n, _)| n.clone()).collect();
    let mut blocks = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        let mut original = None;
        model.visit_params(&mut |p| {
            if &p.name == name {
                original = Some(p.value.clone());
            }
        });
        let original = original.expect("parameter disappeared between visits");

        let mut err = None;
        let fd = finite_diff_grad(
            |theta| {
                model.visit_params(&mut |p| {
                    if &p.name == name {
                        p.value = theta.clone().with_grad();
                    }
                });
                match loss_of(model) {
                    Ok(v) => v,
                    Err(e) => {
                        err = Some(e);
                        f64::NAN
                    }
                }
            },
            &original,
            h,
        );
        model.visit_params(&mut |p| {
            if &p.name == name {
                p.value = original.clone();
            }
        });
        if let Some(e) = err {
            return Err(e);
        }

        let max_rel = autodiff[idx]
            .1
            .iter()
            .zip(fd.data())
            .map(|(a, f)| rel_err(*a, *f))
            .fold(0.0, f64::max);
        blocks.push(BlockReport {
            name: name.clone(),
            len: original.len(),
            max_rel_err: max_rel,
            passed: max_rel < tolerance,
        });
    }

    Ok(GradCheckReport { blocks, tolerance })
}
