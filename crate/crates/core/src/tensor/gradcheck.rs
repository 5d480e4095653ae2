//! Central finite-difference verification of reverse-mode gradients.
//!
//! Checks run the whole graph in f64. The builder closure is re-invoked for
//! every probe, so stochastic ops (dropout) must derive their randomness from
//! a seed captured by the closure to see the same mask on every evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Probe configuration; defaults match the verification contract used
/// throughout this crate (step 1e-5, relative error 1e-3, 10 points).
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub points_per_leaf: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-3,
            points_per_leaf: 10,
            seed: 0x9e3779b9,
        }
    }
}

/// Worst probe observed by [`check`], for diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Compares autodiff gradients of `build`'s scalar output against central
/// finite differences at randomly sampled coordinates of every leaf.
///
/// `build` receives leaves in the order of `leaves` and must return the loss
/// variable. Leaves are marked `requires_grad` automatically.
pub fn check<F>(leaves: &[Tensor<f64>], opts: GradCheck, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).item()?;
        let mut grads = g.backward(loss)?;
        let out = vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .ok_or_else(|| Error::Usage("leaf missing gradient".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, out))
    };

    let (_, analytic) = eval(leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();

    for (li, leaf) in leaves.iter().enumerate() {
        let mut coords: Vec<usize> = (0..leaf.numel()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(opts.points_per_leaf.min(leaf.numel()));
        for &ci in &coords {
            let orig = leaf.data()[ci];
            work[li].data_mut()[ci] = orig + opts.step;
            let (loss_plus, _shape) = eval_loss(&work, &build)?;
            work[li].data_mut()[ci] = orig - opts.step;
            let (loss_minus, _) = eval_loss(&work, &build)?;
            work[li].data_mut()[ci] = orig;

            let fd = (loss_plus - loss_minus) / (2.0 * opts.step);
            let ad = analytic[li].data()[ci];
            let abs_err = (fd - ad).abs();
            let rel = abs_err / fd.abs().max(ad.abs()).max(1e-12);
            report.probes += 1;
            if abs_err > 1e-8 && rel > opts.tol {
                return Err(Error::Numeric(format!(
                    "gradient mismatch at leaf {li} coord {ci}: fd={fd:.9e} ad={ad:.9e} rel={rel:.3e}"
                )));
            }
            if rel > report.max_rel_err && abs_err > 1e-8 {
                report.max_rel_err = rel;
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(tensors: &[Tensor<f64>], build: &F) -> Result<(f64, ())>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok((g.value(loss).item()?, ()))
}
