//! Per-point weight network, outlier rejection and training.
//!
//! The network is a reduced PointNet: a shared per-point encoder
//! 3 -> 32 -> 64 (ReLU), a max-pooled 64-dim global feature, and a head
//! 128 -> 64 (ReLU) -> 1 (sigmoid) applied to `[point feature; global]`.
//! Its forward pass caches activations and the backward pass is written out
//! by hand; the solver part of the pipeline is differentiated on the tape.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Real, Tape};
use crate::geometry::{Point3, PointCloud, RigidTransform};
use crate::lie::{self, Pose};
use crate::registration::{unroll_wgicp, LmParams, MatchLog, Prepared, RegistrationError, WgicpProblem};

pub const IN: usize = 3;
pub const ENC1: usize = 32;
pub const FEAT: usize = 64;
pub const HEAD: usize = 64;

/// (rows, cols) of every parameter block, in storage order.
pub const LAYER_SHAPES: [(usize, usize); 8] = [
    (ENC1, IN),
    (ENC1, 1),
    (FEAT, ENC1),
    (FEAT, 1),
    (HEAD, 2 * FEAT),
    (HEAD, 1),
    (1, HEAD),
    (1, 1),
];

const fn offsets() -> [usize; 9] {
    let mut out = [0; 9];
    let mut k = 0;
    while k < 8 {
        out[k + 1] = out[k] + LAYER_SHAPES[k].0 * LAYER_SHAPES[k].1;
        k += 1;
    }
    out
}

const OFF: [usize; 9] = offsets();
pub const NUM_PARAMS: usize = OFF[8];

const W1: usize = OFF[0];
const B1: usize = OFF[1];
const W2: usize = OFF[2];
const B2: usize = OFF[3];
const H1: usize = OFF[4];
const C1: usize = OFF[5];
const H2: usize = OFF[6];
const C2: usize = OFF[7];

const MAGIC: &[u8; 8] = b"WGICPNET";
pub const FORMAT_VERSION: u32 = 1;
/// Floor on the per-cloud standard deviation in [`soft_reject`].
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("cannot predict weights for an empty cloud")]
    EmptyCloud,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a weight model checkpoint")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: layer shapes {found:?} do not match {expected:?}")]
    ShapeMismatch {
        path: PathBuf,
        found: Vec<(usize, usize)>,
        expected: Vec<(usize, usize)>,
    },
    #[error("{path}: checkpoint truncated at byte {offset}")]
    Truncated { path: PathBuf, offset: usize },
    #[error("loss became {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("solver failed at step {step}: {source}")]
    Solver {
        step: usize,
        #[source]
        source: RegistrationError,
    },
    #[error("learning rate must be positive or zero, got {0}")]
    InvalidLearningRate(f64),
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightModel {
    params: Vec<f64>,
    seed: u64,
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    x: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    argmax: Vec<usize>,
    u: Vec<f64>,
    z: Vec<f64>,
    o: Vec<f64>,
    pub weights: Vec<f64>,
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).fold(b[0], |acc, (a, c)| acc + a * c)
}

impl WeightModel {
    /// Glorot-uniform weights and zero biases.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; NUM_PARAMS];
        for (k, &(rows, cols)) in LAYER_SHAPES.iter().enumerate() {
            if cols == 1 && k % 2 == 1 {
                continue;
            }
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for p in &mut params[OFF[k]..OFF[k + 1]] {
                *p = rng.gen_range(-limit..limit);
            }
        }
        Self { params, seed }
    }

    pub fn from_params(params: Vec<f64>, seed: u64) -> Self {
        assert_eq!(params.len(), NUM_PARAMS, "parameter count");
        Self { params, seed }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<Vec<f64>, WeightsError> {
        if cloud.is_empty() {
            return Err(WeightsError::EmptyCloud);
        }
        Ok(self.forward(cloud.points()).weights)
    }

    pub fn forward(&self, points: &[Point3]) -> ForwardCache {
        let x: Vec<f64> = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        self.forward_flat(x)
    }

    fn forward_flat(&self, x: Vec<f64>) -> ForwardCache {
        let p = &self.params;
        let n = x.len() / IN;
        let mut h1 = vec![0.0; n * ENC1];
        let mut a2 = vec![0.0; n * FEAT];
        let mut f = vec![0.0; n * FEAT];
        for i in 0..n {
            let xi = &x[IN * i..IN * (i + 1)];
            for o in 0..ENC1 {
                h1[ENC1 * i + o] = relu(affine(&p[W1 + IN * o..W1 + IN * (o + 1)], &p[B1 + o..], xi));
            }
            let hi = &h1[ENC1 * i..ENC1 * (i + 1)];
            for o in 0..FEAT {
                let a = affine(&p[W2 + ENC1 * o..W2 + ENC1 * (o + 1)], &p[B2 + o..], hi);
                a2[FEAT * i + o] = a;
                f[FEAT * i + o] = relu(a);
            }
        }
        let mut g = vec![f64::NEG_INFINITY; FEAT];
        let mut argmax = vec![0; FEAT];
        for i in 0..n {
            for c in 0..FEAT {
                if f[FEAT * i + c] > g[c] {
                    g[c] = f[FEAT * i + c];
                    argmax[c] = i;
                }
            }
        }
        // global part of the head pre-activation, shared by every point
        let hg: Vec<f64> = (0..HEAD)
            .map(|k| {
                let row = &p[H1 + 2 * FEAT * k + FEAT..H1 + 2 * FEAT * (k + 1)];
                affine(row, &p[C1 + k..], &g)
            })
            .collect();
        let mut u = vec![0.0; n * HEAD];
        let mut z = vec![0.0; n * HEAD];
        let mut o = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let fi = &f[FEAT * i..FEAT * (i + 1)];
            let mut acc = p[C2];
            for k in 0..HEAD {
                let row = &p[H1 + 2 * FEAT * k..H1 + 2 * FEAT * k + FEAT];
                let uk = row.iter().zip(fi).fold(hg[k], |s, (a, b)| s + a * b);
                u[HEAD * i + k] = uk;
                let zk = relu(uk);
                z[HEAD * i + k] = zk;
                acc += p[H2 + k] * zk;
            }
            o[i] = acc;
            weights[i] = crate::autodiff::sigmoid(acc);
        }
        ForwardCache {
            n,
            x,
            h1,
            a2,
            f,
            g,
            argmax,
            u,
            z,
            o,
            weights,
        }
    }

    /// Gradient of `sum_i dw[i] * weights[i]` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, dw: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let n = cache.n;
        assert_eq!(dw.len(), n);
        let mut grad = vec![0.0; NUM_PARAMS];
        let mut df = vec![0.0; n * FEAT];
        let mut du_sum = vec![0.0; HEAD];
        for i in 0..n {
            let w = cache.weights[i];
            let d_o = dw[i] * w * (1.0 - w);
            if d_o == 0.0 {
                continue;
            }
            grad[C2] += d_o;
            let fi = &cache.f[FEAT * i..FEAT * (i + 1)];
            for k in 0..HEAD {
                grad[H2 + k] += d_o * cache.z[HEAD * i + k];
                if cache.u[HEAD * i + k] <= 0.0 {
                    continue;
                }
                let du = d_o * p[H2 + k];
                du_sum[k] += du;
                let row = H1 + 2 * FEAT * k;
                for c in 0..FEAT {
                    grad[row + c] += du * fi[c];
                    df[FEAT * i + c] += du * p[row + c];
                }
            }
        }
        for k in 0..HEAD {
            let du = du_sum[k];
            grad[C1 + k] += du;
            if du == 0.0 {
                continue;
            }
            let row = H1 + 2 * FEAT * k + FEAT;
            for c in 0..FEAT {
                grad[row + c] += du * cache.g[c];
                df[FEAT * cache.argmax[c] + c] += du * p[row + c];
            }
        }
        let mut dh1 = vec![0.0; ENC1];
        for i in 0..n {
            dh1.iter_mut().for_each(|v| *v = 0.0);
            let hi = &cache.h1[ENC1 * i..ENC1 * (i + 1)];
            let mut any = false;
            for o in 0..FEAT {
                if cache.a2[FEAT * i + o] <= 0.0 {
                    continue;
                }
                let da = df[FEAT * i + o];
                if da == 0.0 {
                    continue;
                }
                any = true;
                grad[B2 + o] += da;
                let row = W2 + ENC1 * o;
                for m in 0..ENC1 {
                    grad[row + m] += da * hi[m];
                    dh1[m] += da * p[row + m];
                }
            }
            if !any {
                continue;
            }
            let xi = &cache.x[IN * i..IN * (i + 1)];
            for o in 0..ENC1 {
                if hi[o] <= 0.0 {
                    continue;
                }
                let da = dh1[o];
                grad[B1 + o] += da;
                for m in 0..IN {
                    grad[W1 + IN * o + m] += da * xi[m];
                }
            }
        }
        grad
    }

    /// Output weights with parameter `index` shifted by `delta`, recomputing
    /// only the activations that parameter reaches.
    pub fn forward_perturbed(&self, cache: &ForwardCache, index: usize, delta: f64) -> Vec<f64> {
        self.forward_perturbed_checked(cache, index, delta).0
    }

    /// Like [`WeightModel::forward_perturbed`], also reporting whether every
    /// ReLU and max-pool selection matches `cache`, so the perturbed output
    /// lies on the same smooth piece.
    pub fn forward_perturbed_checked(&self, cache: &ForwardCache, index: usize, delta: f64) -> (Vec<f64>, bool) {
        let p = &self.params;
        let n = cache.n;
        let active = |a: &f64, b: &f64| (*a > 0.0) == (*b > 0.0);
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| active(x, y));
        if index < W2 {
            let mut shifted = self.clone();
            shifted.params[index] += delta;
            let c = shifted.forward_flat(cache.x.clone());
            let smooth = same(&c.h1, &cache.h1) && same(&c.f, &cache.f) && c.argmax == cache.argmax && same(&c.u, &cache.u);
            return (c.weights, smooth);
        }
        let mut o = cache.o.clone();
        let mut smooth = true;
        // head output after replacing column `k` of the hidden layer
        let mut update_hidden = |o: &mut [f64], k: usize, du: &dyn Fn(usize) -> f64| {
            for i in 0..n {
                let old = cache.z[HEAD * i + k];
                let pre = cache.u[HEAD * i + k] + du(i);
                smooth &= active(&pre, &cache.u[HEAD * i + k]);
                o[i] += p[H2 + k] * (relu(pre) - old);
            }
        };
        if index < H1 {
            let (c, m) = if index < B2 {
                ((index - W2) / ENC1, Some((index - W2) % ENC1))
            } else {
                (index - B2, None)
            };
            let f_new: Vec<f64> = (0..n)
                .map(|i| {
                    let step = m.map_or(delta, |m| delta * cache.h1[ENC1 * i + m]);
                    relu(cache.a2[FEAT * i + c] + step)
                })
                .collect();
            let (mut g_new, mut arg) = (f64::NEG_INFINITY, 0);
            for (i, &v) in f_new.iter().enumerate() {
                if v > g_new {
                    g_new = v;
                    arg = i;
                }
            }
            let mut smooth = arg == cache.argmax[c] && (0..n).all(|i| active(&f_new[i], &cache.f[FEAT * i + c]));
            let dg = g_new - cache.g[c];
            let mut u = cache.u.clone();
            for k in 0..HEAD {
                let wf = p[H1 + 2 * FEAT * k + c];
                let wg = p[H1 + 2 * FEAT * k + FEAT + c];
                for i in 0..n {
                    u[HEAD * i + k] += wf * (f_new[i] - cache.f[FEAT * i + c]) + wg * dg;
                }
            }
            smooth &= same(&u, &cache.u);
            for i in 0..n {
                o[i] = (0..HEAD).fold(p[C2], |acc, k| acc + p[H2 + k] * relu(u[HEAD * i + k]));
            }
            return (o.into_iter().map(crate::autodiff::sigmoid).collect(), smooth);
        } else if index < C1 {
            let k = (index - H1) / (2 * FEAT);
            let m = (index - H1) % (2 * FEAT);
            let input = |i: usize| {
                if m < FEAT {
                    cache.f[FEAT * i + m]
                } else {
                    cache.g[m - FEAT]
                }
            };
            update_hidden(&mut o, k, &|i| delta * input(i));
        } else if index < H2 {
            update_hidden(&mut o, index - C1, &|_| delta);
        } else if index < C2 {
            let k = index - H2;
            for i in 0..n {
                o[i] += delta * cache.z[HEAD * i + k];
            }
        } else {
            o.iter_mut().for_each(|v| *v += delta);
        }
        (o.into_iter().map(crate::autodiff::sigmoid).collect(), smooth)
    }

    /// Writes the versioned checkpoint. Parameters are stored as
    /// little-endian `f64` in declaration order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightsError> {
        let path = path.as_ref();
        let io = |source| WeightsError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut buf = Vec::with_capacity(8 + 4 + 4 + 64 + 8 + 8 * NUM_PARAMS);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(LAYER_SHAPES.len() as u32).to_le_bytes());
        for (r, c) in LAYER_SHAPES {
            buf.extend_from_slice(&(r as u32).to_le_bytes());
            buf.extend_from_slice(&(c as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for v in &self.params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&buf).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightsError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| WeightsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8], WeightsError> {
            let s = bytes.get(*at..*at + n).ok_or(WeightsError::Truncated {
                path: path.to_path_buf(),
                offset: *at,
            })?;
            *at += n;
            Ok(s)
        };
        let u32_at = |at: &mut usize| -> Result<u32, WeightsError> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap())) };
        if take(&mut at, 8)? != MAGIC {
            return Err(WeightsError::BadMagic { path: path.to_path_buf() });
        }
        let version = u32_at(&mut at)?;
        if version != FORMAT_VERSION {
            return Err(WeightsError::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let layers = u32_at(&mut at)? as usize;
        let mut found = Vec::with_capacity(layers.min(64));
        for _ in 0..layers {
            let r = u32_at(&mut at)? as usize;
            let c = u32_at(&mut at)? as usize;
            found.push((r, c));
        }
        if found != LAYER_SHAPES {
            return Err(WeightsError::ShapeMismatch {
                path: path.to_path_buf(),
                found,
                expected: LAYER_SHAPES.to_vec(),
            });
        }
        let seed = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let mut params = Vec::with_capacity(NUM_PARAMS);
        for _ in 0..NUM_PARAMS {
            params.push(f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()));
        }
        if at != bytes.len() {
            return Err(WeightsError::ShapeMismatch {
                path: path.to_path_buf(),
                found,
                expected: LAYER_SHAPES.to_vec(),
            });
        }
        Ok(Self { params, seed })
    }
}

/// Standardizes the weights of one cloud and squashes them:
/// `sigmoid((w - mean) / max(std, SIGMA_FLOOR))`.
pub fn soft_reject<S: Real>(weights: &[S]) -> Vec<S> {
    assert!(!weights.is_empty(), "soft_reject needs at least one weight");
    let n = weights.len() as f64;
    let w0 = weights[0].value();
    // mean taken relative to the first weight, so equal inputs give an exact
    // zero numerator
    let shifted: Vec<S> = weights.iter().map(|&w| w - w0).collect();
    let mean = S::sum(&shifted) / n + w0;
    let centered: Vec<S> = weights.iter().map(|&w| w - mean).collect();
    let var = S::dot(&centered, &centered) / n;
    let sigma = var.max_floor(SIGMA_FLOOR * SIGMA_FLOOR).sqrt().expect("nonnegative");
    centered.iter().map(|&c| (c / sigma).sigmoid()).collect()
}

/// Number of points kept when rejecting the fraction `r` of `n`,
/// `ceil((1 - r) n)`. `r n` within rounding of an integer is snapped to it, so
/// decimal ratios such as 0.3 behave as written.
pub fn survivor_count(n: usize, r: f64) -> usize {
    assert!((0.0..1.0).contains(&r), "rejection ratio must lie in [0, 1)");
    let rn = r * n as f64;
    let nearest = rn.round();
    let rejected = if (rn - nearest).abs() <= 1e-9 * (n.max(1) as f64) {
        nearest
    } else {
        rn.floor()
    };
    n - rejected as usize
}

/// Keeps the `ceil((1 - r) n)` highest-weight points (ties to the lower
/// index), in their original order.
pub fn hard_reject(cloud: &PointCloud, weights: &[f64], r: f64) -> PointCloud {
    assert_eq!(weights.len(), cloud.len());
    let keep = survivor_count(cloud.len(), r);
    if keep == cloud.len() {
        return cloud.clone();
    }
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    cloud.select(&kept)
}

/// `|M(est) - M(gt)|_F` over homogeneous 4x4 matrices.
pub fn pose_loss(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    lie::frobenius_distance(&Pose::<f64>::constant(est), gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Frame pairs per optimizer step.
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Applied at inference time by callers; training always uses soft
    /// rejection.
    pub rejection_ratio: f64,
    pub k_d: usize,
    /// Softmax temperature of the soft correspondences, in meters.
    pub knn_temperature: f64,
    /// Differentiable solver settings (smooth gating, fixed iteration count).
    pub solver: LmParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            batch: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            rejection_ratio: 0.0,
            k_d: crate::knn::DEFAULT_K_D,
            knn_temperature: 1.0,
            solver: LmParams::differentiable(),
        }
    }
}

/// One training example: `source` is frame t, `target` frame t-1, and `gt`
/// maps source coordinates into the target frame. Both clouds carry
/// covariances.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: RigidTransform,
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Loss and parameter gradient of one pair through soft rejection and the
/// differentiable solver.
#[derive(Debug, Clone)]
pub struct PairGradient {
    pub loss: f64,
    pub transform: RigidTransform,
    pub params: Vec<f64>,
    pub source_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
}

/// Forward/backward through the whole pipeline for one prepared pair.
pub fn pair_gradient(
    model: &WeightModel,
    prep: &Prepared,
    source: &[Point3],
    target: &[Point3],
    gt: &RigidTransform,
) -> Result<PairGradient, RegistrationError> {
    let cs = model.forward(source);
    let ct = model.forward(target);
    let tape = Tape::new();
    let ws = tape.vars(&cs.weights);
    let wt = tape.vars(&ct.weights);
    let (loss, pose) = pipeline_loss(prep, &ws, &wt, gt, &mut MatchLog::recording())?;
    let grads = tape.backward(loss);
    let dws = grads.wrt_all(&ws);
    let dwt = grads.wrt_all(&wt);
    let mut params = model.backward(&cs, &dws);
    for (p, q) in params.iter_mut().zip(model.backward(&ct, &dwt)) {
        *p += q;
    }
    Ok(PairGradient {
        loss: loss.value(),
        transform: pose,
        params,
        source_weights: dws,
        target_weights: dwt,
    })
}

/// Pose loss of the solver run on soft-rejected raw weights.
pub fn pipeline_loss<S: Real>(
    prep: &Prepared,
    source_weights: &[S],
    target_weights: &[S],
    gt: &RigidTransform,
    log: &mut MatchLog,
) -> Result<(S, RigidTransform), RegistrationError> {
    let sw = soft_reject(source_weights);
    let tw = soft_reject(target_weights);
    let out = unroll_wgicp(prep, &sw, &tw, log)?;
    Ok((lie::frobenius_distance(&out.pose, gt), out.pose.value()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: WeightModel,
    /// Mean loss of each epoch.
    pub loss_history: Vec<f64>,
}

pub fn prepare_pair(pair: &TrainPair, config: &TrainConfig) -> Result<Prepared, RegistrationError> {
    let mut problem = WgicpProblem::new(pair.source.clone(), pair.target.clone())
        .with_k_d(config.k_d)
        .with_lm(config.solver.clone());
    problem.knn_temperature = config.knn_temperature;
    problem.prepare()
}

pub fn train(model: &WeightModel, dataset: &[TrainPair], config: &TrainConfig) -> Result<TrainOutcome, WeightsError> {
    if !(config.learning_rate >= 0.0) || !config.learning_rate.is_finite() {
        return Err(WeightsError::InvalidLearningRate(config.learning_rate));
    }
    if dataset.is_empty() {
        return Err(WeightsError::EmptyDataset);
    }
    let prepared: Vec<Prepared> = dataset
        .iter()
        .map(|p| prepare_pair(p, config))
        .collect::<Result<_, _>>()
        .map_err(|source| WeightsError::Solver { step: 0, source })?;
    let mut model = model.clone();
    let mut adam = Adam::new(NUM_PARAMS, config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batch = config.batch.max(1);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; NUM_PARAMS];
            for &k in chunk {
                let pair = &dataset[k];
                let g = pair_gradient(&model, &prepared[k], pair.source.points(), pair.target.points(), &pair.gt)
                    .map_err(|source| WeightsError::Solver { step, source })?;
                if !g.loss.is_finite() || g.params.iter().any(|v| !v.is_finite()) {
                    return Err(WeightsError::Diverged { step, loss: g.loss });
                }
                epoch_loss += g.loss;
                for (a, b) in grad.iter_mut().zip(&g.params) {
                    *a += b / chunk.len() as f64;
                }
            }
            adam.step(model.params_mut(), &grad);
            step += 1;
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

/// Loss history as text, one value per line.
pub fn format_loss_history(history: &[f64]) -> String {
    history.iter().map(|v| format!("{v}\n")).collect()
}
