//! Tape gradients of the pose loss against central finite differences.
//!
//! The loss runs the weight network on both clouds, soft rejection, the
//! unrolled solver and the Frobenius pose loss. Finite differences replay
//! the neighbor lists of the taped run, so both sides differentiate the same
//! smooth piece of the objective.

use rayon::prelude::*;
use thiserror::Error;

use crate::covariance::{estimate_covariances, CovarianceError, CovarianceParams};
use crate::geometry::{Mat3, PointCloud};
use crate::registration::{LmParams, MatchLog, Prepared, RegistrationError, WgicpProblem};
use crate::synthetic::{outlier_pair, OutlierParams};
use crate::autodiff::Tape;
use crate::weights::{pipeline_loss, WeightModel, NUM_PARAMS};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub problems: usize,
    pub points: usize,
    pub iterations: usize,
    pub k_d: usize,
    pub seed: u64,
    /// Relative central-difference step, `h = step * max(1, |x|)`.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub error_floor: f64,
    pub check_model: bool,
    /// Scales every tape gradient by 1.5; used to see the check fail.
    pub corrupt_adjoint: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            problems: 20,
            points: 50,
            iterations: 5,
            k_d: 4,
            seed: 0,
            step: 1e-5,
            error_floor: 1e-6,
            check_model: true,
            corrupt_adjoint: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    SourceWeight(usize),
    TargetWeight(usize),
    Parameter(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub problem: usize,
    pub wrt: Wrt,
    pub tape: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub median_relative_error: f64,
    pub checked: usize,
    pub worst: Option<Comparison>,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    if a == b {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// One seeded problem: an outlier pair with covariances, or isotropic
/// covariances when it is too small to estimate them.
pub fn problem(seed: u64, points: usize) -> Result<(PointCloud, PointCloud, crate::geometry::RigidTransform), GradcheckError> {
    let pair = outlier_pair(
        seed,
        &OutlierParams {
            points,
            ..Default::default()
        },
    );
    let with_cov = |c: PointCloud| -> Result<PointCloud, GradcheckError> {
        if c.len() >= 3 {
            let params = CovarianceParams {
                k_neighbors: c.len().min(10),
                ..Default::default()
            };
            Ok(estimate_covariances(&c, &params)?)
        } else {
            let n = c.len();
            Ok(c.with_covariances(vec![Mat3::identity(); n]).expect("matching count"))
        }
    };
    Ok((with_cov(pair.source)?, with_cov(pair.target)?, pair.gt))
}

/// Step reductions tried when a finite-difference step crosses a kink.
const MAX_SHRINKS: usize = 4;

fn step_size(x: f64, step: f64) -> f64 {
    step * x.abs().max(1.0)
}

pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport, GradcheckError> {
    let mut errors: Vec<Comparison> = Vec::new();
    for k in 0..config.problems {
        let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
        errors.extend(check_problem(k, seed, config)?);
    }
    let mut rel: Vec<f64> = errors.iter().map(|c| c.relative_error).collect();
    rel.sort_by(f64::total_cmp);
    let median = if rel.is_empty() {
        0.0
    } else if rel.len() % 2 == 1 {
        rel[rel.len() / 2]
    } else {
        0.5 * (rel[rel.len() / 2 - 1] + rel[rel.len() / 2])
    };
    let worst = errors.iter().copied().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error));
    Ok(GradcheckReport {
        max_relative_error: worst.map_or(0.0, |c| c.relative_error),
        median_relative_error: median,
        checked: errors.len(),
        worst,
    })
}

fn check_problem(index: usize, seed: u64, config: &GradcheckConfig) -> Result<Vec<Comparison>, GradcheckError> {
    let (source, target, gt) = problem(seed, config.points)?;
    let model = WeightModel::new(seed);
    let prep: Prepared = WgicpProblem::new(source.clone(), target.clone())
        .with_k_d(config.k_d)
        .with_lm(LmParams::differentiable().with_iterations(config.iterations))
        .prepare()?;

    let cs = model.forward(source.points());
    let ct = model.forward(target.points());
    let tape = Tape::new();
    let ws = tape.vars(&cs.weights);
    let wt = tape.vars(&ct.weights);
    let mut log = MatchLog::recording();
    let (loss, _) = pipeline_loss(&prep, &ws, &wt, &gt, &mut log)?;
    let grads = tape.backward(loss);
    let corrupt = if config.corrupt_adjoint { 1.5 } else { 1.0 };
    let dws: Vec<f64> = grads.wrt_all(&ws).iter().map(|g| g * corrupt).collect();
    let dwt: Vec<f64> = grads.wrt_all(&wt).iter().map(|g| g * corrupt).collect();

    let eval = |sw: &[f64], tw: &[f64]| -> Result<f64, RegistrationError> {
        let (l, _) = pipeline_loss(&prep, sw, tw, &gt, &mut log.replay())?;
        Ok(l)
    };
    let compare = |wrt: Wrt, tape: f64, plus: f64, minus: f64, h: f64| {
        let fd = (plus - minus) / (2.0 * h);
        Comparison {
            problem: index,
            wrt,
            tape,
            finite_difference: fd,
            relative_error: relative_error(tape, fd, config.error_floor),
        }
    };

    let n_s = cs.weights.len();
    let n_t = ct.weights.len();
    let weight_checks: Vec<Comparison> = (0..n_s + n_t)
        .into_par_iter()
        .map(|k| -> Result<Comparison, RegistrationError> {
            let (mut sw, mut tw) = (cs.weights.clone(), ct.weights.clone());
            let (slot, tape_grad, wrt) = if k < n_s {
                (&mut sw[k], dws[k], Wrt::SourceWeight(k))
            } else {
                (&mut tw[k - n_s], dwt[k - n_s], Wrt::TargetWeight(k - n_s))
            };
            let x = *slot;
            let h = step_size(x, config.step);
            *slot = x + h;
            let plus = eval(&sw, &tw)?;
            let (mut sw2, mut tw2) = (cs.weights.clone(), ct.weights.clone());
            if k < n_s {
                sw2[k] = x - h;
            } else {
                tw2[k - n_s] = x - h;
            }
            let minus = eval(&sw2, &tw2)?;
            Ok(compare(wrt, tape_grad, plus, minus, h))
        })
        .collect::<Result<_, _>>()?;

    let mut out = weight_checks;
    if config.check_model {
        let mut dparams = model.backward(&cs, &dws);
        for (p, q) in dparams.iter_mut().zip(model.backward(&ct, &dwt)) {
            *p += q;
        }
        let params = model.params();
        let param_checks: Vec<Comparison> = (0..NUM_PARAMS)
            .into_par_iter()
            .map(|j| -> Result<Comparison, RegistrationError> {
                // Shrink the step until neither side crosses a ReLU or max-pool switch.
                let mut h = step_size(params[j], config.step);
                let (mut sp, mut tp, mut sm, mut tm);
                let mut shrinks = 0;
                loop {
                    let (a, a_ok) = model.forward_perturbed_checked(&cs, j, h);
                    let (b, b_ok) = model.forward_perturbed_checked(&ct, j, h);
                    let (c, c_ok) = model.forward_perturbed_checked(&cs, j, -h);
                    let (d, d_ok) = model.forward_perturbed_checked(&ct, j, -h);
                    (sp, tp, sm, tm) = (a, b, c, d);
                    if (a_ok && b_ok && c_ok && d_ok) || shrinks == MAX_SHRINKS {
                        break;
                    }
                    h *= 0.1;
                    shrinks += 1;
                }
                // Identical weights give identical losses, so the difference is exactly zero.
                if sp == sm && tp == tm {
                    return Ok(compare(Wrt::Parameter(j), dparams[j], 0.0, 0.0, h));
                }
                Ok(compare(Wrt::Parameter(j), dparams[j], eval(&sp, &tp)?, eval(&sm, &tm)?, h))
            })
            .collect::<Result<_, _>>()?;
        out.extend(param_checks);
    }
    Ok(out)
}
