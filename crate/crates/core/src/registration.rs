//! ICP, GICP and weighted GICP solvers.
//!
//! All solvers minimize a sum of per-correspondence Mahalanobis terms
//! `d^T M^-1 d`, `d = b - T a`, over a left-multiplied twist update
//! `T <- exp(delta) T`. The fast path ([`Gate::HardLm`]) is a classic
//! accept/reject Levenberg-Marquardt loop; the differentiable path
//! ([`Gate::SmoothGated`]) runs a fixed number of gated iterations generic
//! over [`Real`], so it can be recorded on a tape.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Real, Tape, Var};
use crate::geometry::{Mat3, PointCloud, RigidTransform, Twist};
use crate::knn::{scaled_distance, softmax_in_place, KdIndex, DEFAULT_K_D, SMALL_K};
use crate::lie::{self, skew, skew_t, transpose, Pose};

/// Objectives above this (or non-finite) abort the solve.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
/// Floor on the Marquardt diagonal so that flat directions still get damped.
pub const DIAG_FLOOR: f64 = 1e-12;
/// Below this many source points the fast path stays single-threaded.
const PAR_THRESHOLD: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    HardLm,
    SmoothGated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub lambda0: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub max_iterations: usize,
    pub update_tol: f64,
    pub gate: Gate,
    /// Objective scale of the smooth gate, applied to per-point objectives.
    pub gate_scale: f64,
    /// Use the gate with its sign flipped, `sigmoid(lookahead - current)`,
    /// for the transform update.
    pub flipped_gate: bool,
}

impl Default for LmParams {
    fn default() -> Self {
        Self::fast()
    }
}

impl LmParams {
    pub fn fast() -> Self {
        Self {
            lambda0: 1e-4,
            lambda_min: 1e-7,
            lambda_max: 1e2,
            max_iterations: 64,
            update_tol: 1e-5,
            gate: Gate::HardLm,
            gate_scale: 1.0,
            flipped_gate: false,
        }
    }

    pub fn differentiable() -> Self {
        Self {
            max_iterations: 20,
            gate: Gate::SmoothGated,
            ..Self::fast()
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.max_iterations = iterations;
        self
    }

    pub fn validate(&self) -> Result<(), RegistrationError> {
        let ok = self.lambda_min > 0.0
            && self.lambda_min <= self.lambda0
            && self.lambda0 <= self.lambda_max
            && self.max_iterations >= 1
            && self.update_tol >= 0.0
            && self.gate_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RegistrationError::InvalidParams(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective before the first iteration and after each one.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("{0} cloud is empty")]
    EmptyCloud(&'static str),
    #[error("{0} cloud has no covariances")]
    MissingCovariances(&'static str),
    #[error("objective {objective:e} diverged at iteration {iteration}")]
    Diverged { iteration: usize, objective: f64 },
    #[error("damped normal equations are singular")]
    SingularNormalEquations,
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("k_d must be at least 1")]
    ZeroK,
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Numeric(#[from] AutodiffError),
}

/// Source `A`, target `B` and the knobs of the weighted objective.
#[derive(Debug, Clone)]
pub struct WgicpProblem {
    pub source: PointCloud,
    pub target: PointCloud,
    pub k_d: usize,
    pub knn_temperature: f64,
    pub lm: LmParams,
    pub initial: RigidTransform,
}

impl WgicpProblem {
    pub fn new(source: PointCloud, target: PointCloud) -> Self {
        Self {
            source,
            target,
            k_d: DEFAULT_K_D,
            knn_temperature: 1.0,
            lm: LmParams::fast(),
            initial: RigidTransform::identity(),
        }
    }

    pub fn with_k_d(mut self, k_d: usize) -> Self {
        self.k_d = k_d;
        self
    }

    pub fn with_lm(mut self, lm: LmParams) -> Self {
        self.lm = lm;
        self
    }

    pub fn with_initial(mut self, initial: RigidTransform) -> Self {
        self.initial = initial;
        self
    }

    pub fn source_weights(&self) -> Vec<f64> {
        self.source.weights().map_or_else(|| vec![1.0; self.source.len()], <[f64]>::to_vec)
    }

    pub fn target_weights(&self) -> Vec<f64> {
        self.target.weights().map_or_else(|| vec![1.0; self.target.len()], <[f64]>::to_vec)
    }

    pub fn prepare(&self) -> Result<Prepared, RegistrationError> {
        Prepared::new(self)
    }
}

fn flat(m: &Mat3) -> [f64; 9] {
    std::array::from_fn(|k| m[(k / 3, k % 3)])
}

/// A problem with its target index built, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    src: Vec<[f64; 3]>,
    src_cov: Vec<[f64; 9]>,
    tgt: Vec<[f64; 3]>,
    tgt_cov: Vec<[f64; 9]>,
    index: KdIndex,
    k_d: usize,
    temperature: f64,
    lm: LmParams,
    initial: RigidTransform,
}

impl Prepared {
    fn new(problem: &WgicpProblem) -> Result<Self, RegistrationError> {
        problem.lm.validate()?;
        if problem.k_d == 0 {
            return Err(RegistrationError::ZeroK);
        }
        let (src, src_cov) = cloud_arrays(&problem.source, "source")?;
        let (tgt, tgt_cov) = cloud_arrays(&problem.target, "target")?;
        let index = KdIndex::build(&problem.target).map_err(|_| RegistrationError::EmptyCloud("target"))?;
        Ok(Self {
            src,
            src_cov,
            tgt,
            tgt_cov,
            index,
            k_d: problem.k_d,
            temperature: problem.knn_temperature,
            lm: problem.lm.clone(),
            initial: problem.initial,
        })
    }

    pub fn source_len(&self) -> usize {
        self.src.len()
    }

    pub fn target_len(&self) -> usize {
        self.tgt.len()
    }

    pub fn lm(&self) -> &LmParams {
        &self.lm
    }

    pub fn set_lm(&mut self, lm: LmParams) {
        self.lm = lm;
    }
}

fn cloud_arrays(cloud: &PointCloud, which: &'static str) -> Result<(Vec<[f64; 3]>, Vec<[f64; 9]>), RegistrationError> {
    if cloud.is_empty() {
        return Err(RegistrationError::EmptyCloud(which));
    }
    let covs = cloud.covariances().ok_or(RegistrationError::MissingCovariances(which))?;
    Ok((
        cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
        covs.iter().map(flat).collect(),
    ))
}

/// Neighbor lists used by successive evaluations of the differentiable
/// solver. Replaying a log re-evaluates the same smooth piece of the
/// otherwise piecewise objective.
#[derive(Debug, Clone, Default)]
pub struct MatchLog {
    entries: Arc<Vec<Vec<u32>>>,
    cursor: usize,
    replay: bool,
}

impl MatchLog {
    pub fn recording() -> Self {
        Self::default()
    }

    /// A copy that replays the recorded neighbor lists from the start.
    pub fn replay(&self) -> Self {
        Self {
            entries: Arc::clone(&self.entries),
            cursor: 0,
            replay: true,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Matching {
    /// Closest target point only, unit inner weight.
    Single,
    /// Softmax over `k` neighbors.
    Soft { k: usize, temperature: f64 },
}

/// Objective with Gauss-Newton Hessian `h` (row-major 6x6) and gradient `g`
/// with respect to the twist `(rot, trans)`.
#[derive(Debug, Clone)]
struct Linearization<S> {
    objective: S,
    h: [S; 36],
    g: [S; 6],
}

/// Per-source contribution: objective, H_rr, H_tr, sum(c M^-1), g_r, sum(c M^-1 d).
const BLOCK: usize = 34;

fn pack_block<S: Real>(obj: S, p: &[S; 3], wbar: &[S; 9], rbar: &[S; 3], out: &mut [S]) {
    let pm = skew(p);
    let pt = skew_t(p);
    let hrr = S::matmul3(&pt, &S::matmul3(wbar, &pm));
    let htr = S::matmul3(wbar, &pt);
    let gr = S::matvec3(&pt, rbar);
    out[0] = obj;
    out[1..10].copy_from_slice(&hrr);
    out[10..19].copy_from_slice(&htr);
    out[19..28].copy_from_slice(wbar);
    out[28..31].copy_from_slice(&gr);
    out[31..34].copy_from_slice(rbar);
}

fn assemble<S: Real>(sums: &[S; BLOCK]) -> Linearization<S> {
    let z = S::constant(0.0);
    let mut h = [z; 36];
    for r in 0..3 {
        for c in 0..3 {
            h[6 * r + c] = sums[1 + 3 * r + c];
            h[6 * (r + 3) + c] = sums[10 + 3 * r + c];
            h[6 * c + r + 3] = sums[10 + 3 * r + c];
            h[6 * (r + 3) + c + 3] = sums[19 + 3 * r + c];
        }
    }
    let g = [sums[28], sums[29], sums[30], -sums[31], -sums[32], -sums[33]];
    Linearization { objective: sums[0], h, g }
}

/// Correspondence terms of source point `i` at `pose`, against target
/// neighbors `nbrs`. Writes the objective alone when `out` has length 1 and
/// the full block when it has length `BLOCK`.
#[allow(clippy::too_many_arguments)]
fn source_terms<S: Real>(
    prep: &Prepared,
    i: usize,
    pose: &Pose<S>,
    rt: &[S; 9],
    nbrs: &[u32],
    matching: Matching,
    src_w: Option<&[S]>,
    tgt_w: Option<&[S]>,
    out: &mut [S],
) -> Result<(), AutodiffError> {
    let derivs = out.len() == BLOCK;
    let z = S::constant(0.0);
    let a = prep.src[i].map(S::constant);
    let p = pose.apply(&a);
    let ca = prep.src_cov[i].map(S::constant);
    let crot = S::matmul3(&S::matmul3(&pose.rotation, &ca), rt);
    let k = nbrs.len();
    let mut stack = ([z; SMALL_K], [z; SMALL_K], [z; 9 * SMALL_K], [z; 3 * SMALL_K]);
    let mut heap;
    let (qs, c, minvs, mds): (&mut [S], &mut [S], &mut [S], &mut [S]) = if k <= SMALL_K {
        let (q, c, m, d) = &mut stack;
        (&mut q[..k], &mut c[..k], &mut m[..9 * k], &mut d[..3 * k])
    } else {
        heap = (vec![z; k], vec![z; k], vec![z; 9 * k], vec![z; 3 * k]);
        let (q, c, m, d) = &mut heap;
        (&mut q[..], &mut c[..], &mut m[..], &mut d[..])
    };
    let soft = match matching {
        Matching::Soft { temperature, .. } if k > 1 => Some(temperature),
        _ => None,
    };
    for (n, &j) in nbrs.iter().enumerate() {
        let j = j as usize;
        let b = prep.tgt[j];
        let d = [S::constant(b[0]) - p[0], S::constant(b[1]) - p[1], S::constant(b[2]) - p[2]];
        let cb = &prep.tgt_cov[j];
        let m: [S; 9] = std::array::from_fn(|e| crot[e] + cb[e]);
        let minv = S::inverse3(&m)?;
        let md = S::matvec3(&minv, &d);
        qs[n] = S::dot(&d, &md);
        if let Some(temperature) = soft {
            c[n] = scaled_distance(S::norm2(&d), tgt_w.map(|w| w[j]), temperature);
        }
        if derivs {
            minvs[9 * n..9 * n + 9].copy_from_slice(&minv);
            mds[3 * n..3 * n + 3].copy_from_slice(&md);
        }
    }
    let c = if soft.is_some() {
        softmax_in_place(c);
        c
    } else {
        c[0] = S::constant(1.0);
        &mut c[..1]
    };
    if let Some(w) = src_w {
        for x in c.iter_mut() {
            *x = *x * w[i];
        }
    }
    let objective = S::dot(c, &qs[..c.len()]);
    if derivs {
        let mut wbar = [z; 9];
        let mut rbar = [z; 3];
        S::lincomb_into(c, &minvs[..9 * c.len()], &mut wbar);
        S::lincomb_into(c, &mds[..3 * c.len()], &mut rbar);
        pack_block(objective, &p, &wbar, &rbar, out);
    } else {
        out[0] = objective;
    }
    Ok(())
}

fn neighbors(prep: &Prepared, p: [f64; 3], matching: Matching) -> Vec<u32> {
    let k = match matching {
        Matching::Single => 1,
        Matching::Soft { k, .. } => k,
    };
    let q = crate::geometry::Point3::new(p[0], p[1], p[2]);
    prep.index.query(&q, k).iter().map(|n| n.index as u32).collect()
}

fn source_position<S: Real>(prep: &Prepared, pose: &Pose<S>, i: usize) -> [f64; 3] {
    let r = &pose.rotation;
    let t = &pose.translation;
    let a = prep.src[i];
    std::array::from_fn(|e| r[3 * e].value() * a[0] + r[3 * e + 1].value() * a[1] + r[3 * e + 2].value() * a[2] + t[e].value())
}

/// Sequential evaluation, generic over the scalar type. With a log,
/// neighbor lists are recorded or replayed.
fn evaluate<S: Real>(
    prep: &Prepared,
    pose: &Pose<S>,
    matching: Matching,
    src_w: Option<&[S]>,
    tgt_w: Option<&[S]>,
    derivs: bool,
    mut log: Option<&mut MatchLog>,
) -> Result<Linearization<S>, RegistrationError> {
    let n = prep.src.len();
    let rt = transpose(&pose.rotation);
    let replay_index = match log.as_deref_mut() {
        Some(l) if l.replay => {
            assert!(l.cursor < l.entries.len(), "match log exhausted");
            l.cursor += 1;
            Some(l.cursor - 1)
        }
        _ => None,
    };
    let k = match matching {
        Matching::Single => 1,
        Matching::Soft { k, .. } => k.min(prep.tgt.len()),
    };
    let mut recorded = Vec::new();
    let width = if derivs { BLOCK } else { 1 };
    let mut cols: Vec<S> = vec![S::constant(0.0); width * n];
    for (i, row) in cols.chunks_exact_mut(width).enumerate() {
        match (replay_index, log.as_deref()) {
            (Some(e), Some(l)) => {
                let nbrs = &l.entries[e][i * k..(i + 1) * k];
                source_terms(prep, i, pose, &rt, nbrs, matching, src_w, tgt_w, row)?
            }
            _ => {
                let nbrs = neighbors(prep, source_position(prep, pose, i), matching);
                if log.is_some() {
                    recorded.extend_from_slice(&nbrs);
                }
                source_terms(prep, i, pose, &rt, &nbrs, matching, src_w, tgt_w, row)?
            }
        }
    }
    if let Some(l) = log {
        if !l.replay {
            Arc::make_mut(&mut l.entries).push(recorded);
        }
    }
    Ok(finish(&cols, width, derivs))
}

/// Column sums of the row-major `n x width` term table.
fn finish<S: Real>(rows: &[S], width: usize, derivs: bool) -> Linearization<S> {
    let sums = S::column_sums(rows, width);
    if derivs {
        assemble(&sums.try_into().expect("block sums"))
    } else {
        let z = S::constant(0.0);
        Linearization {
            objective: sums[0],
            h: [z; 36],
            g: [z; 6],
        }
    }
}

/// Parallel `f64` evaluation; per-point terms are reduced in index order so
/// the result does not depend on the thread count.
fn evaluate_f64(
    prep: &Prepared,
    pose: &Pose<f64>,
    matching: Matching,
    src_w: Option<&[f64]>,
    tgt_w: Option<&[f64]>,
    derivs: bool,
) -> Result<Linearization<f64>, RegistrationError> {
    let n = prep.src.len();
    if n < PAR_THRESHOLD {
        return evaluate(prep, pose, matching, src_w, tgt_w, derivs, None);
    }
    let rt = transpose(&pose.rotation);
    let width = if derivs { BLOCK } else { 1 };
    let mut cols = vec![0.0; width * n];
    cols.par_chunks_mut(width).enumerate().try_for_each(|(i, row)| {
        let nbrs = neighbors(prep, source_position(prep, pose, i), matching);
        source_terms(prep, i, pose, &rt, &nbrs, matching, src_w, tgt_w, row)
    })?;
    Ok(finish(&cols, width, derivs))
}

/// Solves `(H + lambda diag(H)) delta = -g`.
fn damped_step<S: Real>(h: &[S; 36], g: &[S; 6], lambda: S) -> Result<[S; 6], RegistrationError> {
    let mut a = *h;
    for k in 0..6 {
        a[7 * k] = h[7 * k] + h[7 * k].max_floor(DIAG_FLOOR) * lambda;
    }
    let rhs: Vec<S> = g.iter().map(|&x| -x).collect();
    let x = S::solve(&a, &rhs).map_err(|_| RegistrationError::SingularNormalEquations)?;
    Ok(x.try_into().expect("6 entries"))
}

fn twist_norm(delta: &[f64; 6]) -> f64 {
    delta.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_objective(objective: f64, iteration: usize) -> Result<(), RegistrationError> {
    if objective.is_finite() && objective <= DIVERGENCE_LIMIT {
        Ok(())
    } else {
        Err(RegistrationError::Diverged { iteration, objective })
    }
}

/// Accept/reject Levenberg-Marquardt. `eval` returns the linearization at
/// a pose with correspondences recomputed there.
fn hard_lm<F>(eval: F, init: &RigidTransform, lm: &LmParams) -> Result<RegistrationResult, RegistrationError>
where
    F: Fn(&Pose<f64>) -> Result<Linearization<f64>, RegistrationError>,
{
    lm.validate()?;
    let mut pose = Pose::constant(init);
    let mut cur = eval(&pose)?;
    check_objective(cur.objective, 0)?;
    let mut trace = vec![cur.objective];
    let mut lambda = lm.lambda0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < lm.max_iterations {
        let delta = damped_step(&cur.h, &cur.g, lambda)?;
        if twist_norm(&delta) < lm.update_tol {
            converged = true;
            break;
        }
        let candidate = lie::exp(&delta).compose(&pose);
        let look = eval(&candidate)?;
        iterations += 1;
        check_objective(look.objective, iterations)?;
        if look.objective < cur.objective {
            pose = candidate;
            cur = look;
            lambda = (lambda / 10.0).max(lm.lambda_min);
        } else {
            lambda *= 10.0;
        }
        trace.push(cur.objective);
        if lambda > lm.lambda_max {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        transform: pose.value(),
        final_objective: cur.objective,
        iterations,
        converged,
        objective_trace: trace,
    })
}

fn nonempty(source: &PointCloud, target: &PointCloud) -> Result<(), RegistrationError> {
    if source.is_empty() {
        return Err(RegistrationError::EmptyCloud("source"));
    }
    if target.is_empty() {
        return Err(RegistrationError::EmptyCloud("target"));
    }
    Ok(())
}

/// Point-to-point ICP, `sum |b_i - T a_i|^2` over closest points.
pub fn align_icp(source: &PointCloud, target: &PointCloud, lm: &LmParams) -> Result<RegistrationResult, RegistrationError> {
    align_icp_from(source, target, lm, &RigidTransform::identity())
}

pub fn align_icp_from(
    source: &PointCloud,
    target: &PointCloud,
    lm: &LmParams,
    init: &RigidTransform,
) -> Result<RegistrationResult, RegistrationError> {
    nonempty(source, target)?;
    let index = KdIndex::build(target).map_err(|_| RegistrationError::EmptyCloud("target"))?;
    let src: Vec<[f64; 3]> = source.points().iter().map(|p| [p.x, p.y, p.z]).collect();
    let tgt = target.points();
    let eval = |pose: &Pose<f64>| -> Result<Linearization<f64>, RegistrationError> {
        let block = |(a, row): (&[f64; 3], &mut [f64])| {
            let p = pose.apply(a);
            let nn = index.query(&crate::geometry::Point3::new(p[0], p[1], p[2]), 1)[0].index;
            let b = tgt[nn];
            let d = [b.x - p[0], b.y - p[1], b.z - p[2]];
            let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            pack_block(f64::dot(&d, &d), &p, &eye, &d, row)
        };
        let mut rows = vec![0.0; BLOCK * src.len()];
        if src.len() < PAR_THRESHOLD {
            src.iter().zip(rows.chunks_exact_mut(BLOCK)).for_each(block);
        } else {
            src.par_iter().zip(rows.par_chunks_mut(BLOCK)).for_each(block);
        }
        let sums: [f64; BLOCK] = f64::column_sums(&rows, BLOCK).try_into().expect("block sums");
        Ok(assemble(&sums))
    };
    hard_lm(eval, init, lm)
}

/// GICP with closest-point correspondences; weights are ignored.
pub fn align_gicp(problem: &WgicpProblem) -> Result<RegistrationResult, RegistrationError> {
    let prep = problem.prepare()?;
    hard_lm(
        |pose| evaluate_f64(&prep, pose, Matching::Single, None, None, true),
        &prep.initial,
        &prep.lm,
    )
}

fn soft(prep: &Prepared) -> Matching {
    Matching::Soft {
        k: prep.k_d,
        temperature: prep.temperature,
    }
}

fn check_weights(prep: &Prepared, src_w: &[f64], tgt_w: &[f64]) -> Result<(), RegistrationError> {
    if src_w.len() != prep.src.len() {
        return Err(RegistrationError::WeightCount {
            expected: prep.src.len(),
            got: src_w.len(),
        });
    }
    if tgt_w.len() != prep.tgt.len() {
        return Err(RegistrationError::WeightCount {
            expected: prep.tgt.len(),
            got: tgt_w.len(),
        });
    }
    Ok(())
}

/// Weighted GICP. `HardLm` runs the fast solver; `SmoothGated` runs the
/// fixed-length differentiable iteration on plain floats.
pub fn align_wgicp(problem: &WgicpProblem) -> Result<RegistrationResult, RegistrationError> {
    let prep = problem.prepare()?;
    let src_w = problem.source_weights();
    let tgt_w = problem.target_weights();
    check_weights(&prep, &src_w, &tgt_w)?;
    match prep.lm.gate {
        Gate::HardLm => hard_lm(
            |pose| evaluate_f64(&prep, pose, soft(&prep), Some(&src_w), Some(&tgt_w), true),
            &prep.initial,
            &prep.lm,
        ),
        Gate::SmoothGated => {
            let out = unroll_wgicp(&prep, &src_w, &tgt_w, &mut MatchLog::recording())?;
            let transform = out.pose.value();
            let last = evaluate_f64(&prep, &out.pose, soft(&prep), Some(&src_w), Some(&tgt_w), false)?.objective;
            let mut trace = out.objective_trace;
            trace.push(last);
            Ok(RegistrationResult {
                transform,
                final_objective: last,
                iterations: prep.lm.max_iterations,
                converged: out.last_step_norm < prep.lm.update_tol,
                objective_trace: trace,
            })
        }
    }
}

/// GICP objective at `t` with closest-point matching.
pub fn gicp_objective(problem: &WgicpProblem, t: &RigidTransform) -> Result<f64, RegistrationError> {
    let prep = problem.prepare()?;
    Ok(evaluate_f64(&prep, &Pose::constant(t), Matching::Single, None, None, false)?.objective)
}

/// Weighted objective at `t` using the problem's weights (ones if absent).
pub fn wgicp_objective(problem: &WgicpProblem, t: &RigidTransform) -> Result<f64, RegistrationError> {
    let prep = problem.prepare()?;
    let src_w = problem.source_weights();
    let tgt_w = problem.target_weights();
    check_weights(&prep, &src_w, &tgt_w)?;
    Ok(evaluate_f64(&prep, &Pose::constant(t), soft(&prep), Some(&src_w), Some(&tgt_w), false)?.objective)
}

/// Weighted objective recorded on the tape of the supplied weights.
pub fn wgicp_objective_var<'t>(
    prep: &Prepared,
    t: &Pose<Var<'t>>,
    src_w: &[Var<'t>],
    tgt_w: &[Var<'t>],
) -> Result<Var<'t>, RegistrationError> {
    Ok(evaluate(prep, t, soft(prep), Some(src_w), Some(tgt_w), false, None)?.objective)
}

/// One damped step at `t` with damping `lambda`, and the objective after
/// applying it.
pub fn lm_step(problem: &WgicpProblem, t: &RigidTransform, lambda: f64) -> Result<(Twist, f64), RegistrationError> {
    let prep = problem.prepare()?;
    let src_w = problem.source_weights();
    let tgt_w = problem.target_weights();
    check_weights(&prep, &src_w, &tgt_w)?;
    let pose = Pose::constant(t);
    let lin = evaluate_f64(&prep, &pose, soft(&prep), Some(&src_w), Some(&tgt_w), true)?;
    let delta = damped_step(&lin.h, &lin.g, lambda)?;
    let next = lie::exp(&delta).compose(&pose);
    let look = evaluate_f64(&prep, &next, soft(&prep), Some(&src_w), Some(&tgt_w), false)?.objective;
    Ok((Twist::from_slice(&delta), look))
}

/// `sigmoid((current - lookahead) / scale)`: near 1 for a strong
/// improvement, near 0 for a step that makes things worse.
pub fn smooth_gate(current: f64, lookahead: f64, scale: f64) -> f64 {
    crate::autodiff::sigmoid((current - lookahead) / scale)
}

/// Damping after a gated step: `lambda_min` for a fully accepted step,
/// `lambda_max` for a fully rejected one.
pub fn gated_lambda(gate: f64, lm: &LmParams) -> f64 {
    lm.lambda_min + (lm.lambda_max - lm.lambda_min) * (1.0 - gate)
}

#[derive(Debug, Clone)]
pub struct Unrolled<S> {
    pub pose: Pose<S>,
    /// Objective at the start of each iteration.
    pub objective_trace: Vec<f64>,
    pub gates: Vec<f64>,
    pub last_step_norm: f64,
}

/// Fixed-length smooth-gated iteration, differentiable in the weights.
/// Neighbor lists are taken from `log` when it replays, and recorded into
/// it otherwise.
pub fn unroll_wgicp<S: Real>(
    prep: &Prepared,
    src_w: &[S],
    tgt_w: &[S],
    log: &mut MatchLog,
) -> Result<Unrolled<S>, RegistrationError> {
    let lm = &prep.lm;
    lm.validate()?;
    if src_w.len() != prep.src.len() || tgt_w.len() != prep.tgt.len() {
        return Err(RegistrationError::WeightCount {
            expected: prep.src.len() + prep.tgt.len(),
            got: src_w.len() + tgt_w.len(),
        });
    }
    let matching = soft(prep);
    let norm = prep.src.len() as f64 * lm.gate_scale;
    let mut pose: Pose<S> = Pose::constant(&prep.initial);
    let mut lambda = S::constant(lm.lambda0);
    let mut trace = Vec::with_capacity(lm.max_iterations);
    let mut gates = Vec::with_capacity(lm.max_iterations);
    let mut last_step_norm = f64::INFINITY;
    for iteration in 0..lm.max_iterations {
        let lin = evaluate(prep, &pose, matching, Some(src_w), Some(tgt_w), true, Some(log))?;
        check_objective(lin.objective.value(), iteration)?;
        trace.push(lin.objective.value());
        let delta = damped_step(&lin.h, &lin.g, lambda)?;
        let candidate = lie::exp(&delta).compose(&pose);
        let look = evaluate(prep, &candidate, matching, Some(src_w), Some(tgt_w), false, Some(log))?.objective;
        check_objective(look.value(), iteration + 1)?;
        let gate = ((lin.objective - look) / norm).sigmoid();
        gates.push(gate.value());
        lambda = (S::constant(1.0) - gate) * (lm.lambda_max - lm.lambda_min) + lm.lambda_min;
        let step_gate = if lm.flipped_gate { S::constant(1.0) - gate } else { gate };
        let step: [S; 6] = delta.map(|x| x * step_gate);
        last_step_norm = twist_norm(&step.map(|x| x.value()));
        pose = lie::exp(&step).compose(&pose);
    }
    Ok(Unrolled {
        pose,
        objective_trace: trace,
        gates,
        last_step_norm,
    })
}

#[derive(Debug, Clone)]
pub struct PoseGradients {
    pub transform: RigidTransform,
    pub loss: f64,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

/// Gradient of `|T_est - gt|_F` with respect to every source and target
/// weight, through the differentiable solver. The problem's `lm` is used as
/// given, so set it to [`LmParams::differentiable`] (or a shorter unroll).
pub fn pose_gradients(problem: &WgicpProblem, gt: &RigidTransform) -> Result<PoseGradients, RegistrationError> {
    let prep = problem.prepare()?;
    let tape = Tape::new();
    let sw = tape.vars(&problem.source_weights());
    let tw = tape.vars(&problem.target_weights());
    let out = unroll_wgicp(&prep, &sw, &tw, &mut MatchLog::recording())?;
    let loss = lie::frobenius_distance(&out.pose, gt);
    let grads = tape.backward(loss);
    Ok(PoseGradients {
        transform: out.pose.value(),
        loss: loss.value(),
        source: grads.wrt_all(&sw),
        target: grads.wrt_all(&tw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{estimate_covariances, CovarianceParams};
    use crate::geometry::{Point3, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half_identity_cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::from_xyz(points)
            .unwrap()
            .with_covariances(vec![Mat3::identity() * 0.5; n])
            .unwrap()
    }

    #[test]
    fn single_pair_hand_value() {
        let src = half_identity_cloud(vec![[0.0, 0.0, 0.0]]);
        let tgt = half_identity_cloud(vec![[1.0, 0.0, 0.0]]);
        let p = WgicpProblem::new(src, tgt);
        assert_eq!(gicp_objective(&p, &RigidTransform::identity()).unwrap(), 1.0);
        assert_eq!(wgicp_objective(&p, &RigidTransform::identity()).unwrap(), 1.0);
    }

    #[test]
    fn two_point_soft_hand_value() {
        // one source point at the origin, targets at distance 0 and 1
        let src = half_identity_cloud(vec![[0.0, 0.0, 0.0]]);
        let tgt = half_identity_cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let p = WgicpProblem::new(src, tgt).with_k_d(2);
        let w1 = (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        let expected = w1 * 1.0;
        let got = wgicp_objective(&p, &RigidTransform::identity()).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((w1 - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn singular_information_is_reported() {
        let src = PointCloud::from_xyz(vec![[0.0; 3]]).unwrap().with_covariances(vec![Mat3::zeros()]).unwrap();
        let tgt = src.clone();
        let p = WgicpProblem::new(src, tgt);
        assert!(matches!(
            gicp_objective(&p, &RigidTransform::identity()),
            Err(RegistrationError::Numeric(AutodiffError::SingularMatrix { .. }))
        ));
    }

    fn blob(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(-2.0..2.0);
                let v: f64 = rng.gen_range(-2.0..2.0);
                match rng.gen_range(0..3) {
                    0 => [u, v, 0.2 * u.sin()],
                    1 => [u, 1.5 + 0.1 * v.cos(), v.abs()],
                    _ => [-1.8 + 0.1 * u, u, v.abs()],
                }
            })
            .collect();
        estimate_covariances(&PointCloud::from_xyz(pts).unwrap(), &CovarianceParams::default()).unwrap()
    }

    #[test]
    fn lm_step_limits() {
        let src = blob(1, 200);
        let t = RigidTransform::from_axis_angle(&Vec3::z(), 0.05, Vec3::new(0.05, 0.0, 0.02));
        let tgt = src.transformed(&t);
        let p = WgicpProblem::new(src.clone(), tgt);
        let (small, _) = lm_step(&p, &RigidTransform::identity(), 1e8).unwrap();
        let (big, _) = lm_step(&p, &RigidTransform::identity(), 1e-8).unwrap();
        assert!(small.norm() < 1e-6 * big.norm());

        let same = WgicpProblem::new(src.clone(), src).with_k_d(1);
        let (zero, look) = lm_step(&same, &RigidTransform::identity(), 1e-4).unwrap();
        assert_eq!(zero.norm(), 0.0);
        assert_eq!(look, 0.0);
    }

    #[test]
    fn linear_one_point_problem_one_step() {
        // a single pair with identity information: translation-only optimum
        // is reached by one Gauss-Newton step on the translation block
        let src = half_identity_cloud(vec![[0.0, 0.0, 0.0]]);
        let tgt = half_identity_cloud(vec![[0.3, -0.2, 0.1]]);
        let p = WgicpProblem::new(src, tgt);
        let (delta, look) = lm_step(&p, &RigidTransform::identity(), 1e-12).unwrap();
        let t = delta.exp();
        let moved = t.apply(&Point3::origin());
        assert!((moved - Point3::new(0.3, -0.2, 0.1)).norm() < 1e-6);
        assert!(look < 1e-12);
    }

    #[test]
    fn gate_values() {
        assert_eq!(smooth_gate(3.0, 3.0, 1.0), 0.5);
        let lm = LmParams::fast();
        assert_eq!(gated_lambda(0.5, &lm), lm.lambda_min + 0.5 * (lm.lambda_max - lm.lambda_min));
        let g = smooth_gate(10.0, 0.0, 1.0);
        assert!(g > 0.9999);
        assert!((gated_lambda(g, &lm) - lm.lambda_min) < 1e-2);
        assert!(smooth_gate(0.0, 10.0, 1.0) < 1e-4);
    }

    #[test]
    fn identical_clouds_stay_at_identity() {
        let c = blob(2, 300);
        let p = WgicpProblem::new(c.clone(), c);
        let single = p.clone().with_k_d(1);
        for r in [align_gicp(&p).unwrap(), align_wgicp(&single).unwrap()] {
            assert!((r.transform.to_matrix() - nalgebra::Matrix4::identity()).norm() < 1e-6);
            assert_eq!(r.objective_trace.len(), r.iterations + 1);
        }
        // soft neighborhoods move the optimum slightly off identity
        let r = align_wgicp(&p).unwrap();
        assert!(r.transform.translation().norm() < 5e-3 && r.transform.angle() < 5e-3);
        assert!(r.final_objective <= r.objective_trace[0]);
        let icp = align_icp(&p.source, &p.target, &LmParams::fast()).unwrap();
        assert_eq!(icp.final_objective, 0.0);
    }

    #[test]
    fn icp_recovers_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = rand_scene(&mut rng, 500);
        let t = RigidTransform::from_axis_angle(&Vec3::new(0.2, 0.3, 1.0).normalize(), 10f64.to_radians(), Vec3::new(0.3, -0.1, 0.05));
        let tgt = src.transformed(&t);
        let r = align_icp(&src, &tgt, &LmParams::fast()).unwrap();
        let e = r.transform.inverse().compose(&t);
        assert!(e.translation().norm() < 1e-3, "{:?}", e);
        assert!(e.angle().to_degrees() < 0.1);
    }

    fn rand_scene(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(-2.0..2.0);
                let v: f64 = rng.gen_range(0.0..1.5);
                match rng.gen_range(0..4) {
                    0 => [u, rng.gen_range(-2.0..2.0), 0.0],
                    1 => [u, 2.0, v],
                    2 => [-2.0, u, v],
                    _ => [0.5 + 0.3 * u.cos(), 0.5 + 0.3 * u.sin(), v],
                }
            })
            .collect();
        PointCloud::from_xyz(pts).unwrap()
    }

    #[test]
    fn differentiable_matches_fast_when_converged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = estimate_covariances(&rand_scene(&mut rng, 300), &CovarianceParams::default()).unwrap();
        let t = RigidTransform::from_axis_angle(&Vec3::z(), 2f64.to_radians(), Vec3::new(0.05, 0.02, 0.0));
        let tgt = src.transformed(&t);
        let fast = align_wgicp(&WgicpProblem::new(src.clone(), tgt.clone())).unwrap();
        // a vanishing gate scale saturates every gate
        let mut lm = LmParams::differentiable().with_iterations(40);
        lm.gate_scale = 1e-12;
        let diff = align_wgicp(&WgicpProblem::new(src, tgt).with_lm(lm)).unwrap();
        assert!((fast.transform.to_matrix() - diff.transform.to_matrix()).norm() < 1e-6);
        assert!((fast.transform.to_matrix() - t.to_matrix()).norm() < 1e-2);
    }

    #[test]
    fn duplicate_points_get_equal_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = rand_scene(&mut rng, 40);
        let mut pts = base.points().to_vec();
        pts.push(pts[7]);
        let params = CovarianceParams {
            k_neighbors: 8,
            ..Default::default()
        };
        let src = estimate_covariances(&PointCloud::new(pts).unwrap(), &params).unwrap();
        let t = RigidTransform::from_axis_angle(&Vec3::z(), 0.03, Vec3::new(0.05, 0.0, 0.0));
        let tgt = estimate_covariances(&base.transformed(&t), &params).unwrap();
        let p = WgicpProblem::new(src, tgt).with_lm(LmParams::differentiable().with_iterations(5));
        let g = pose_gradients(&p, &t).unwrap();
        let last = g.source.len() - 1;
        assert!((g.source[7] - g.source[last]).abs() < 1e-9 * g.source[7].abs().max(1.0));
    }

    #[test]
    fn empty_cloud_errors() {
        let c = blob(7, 50);
        let empty = PointCloud::default();
        assert_eq!(align_icp(&empty, &c, &LmParams::fast()), Err(RegistrationError::EmptyCloud("source")));
        assert!(matches!(
            align_wgicp(&WgicpProblem::new(c, empty.with_covariances(vec![]).unwrap())),
            Err(RegistrationError::EmptyCloud("target"))
        ));
    }
}
