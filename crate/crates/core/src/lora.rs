//! Low-rank adapted linear layer in double precision.
//!
//! The layer computes `h = W x + (alpha / r) * U (D x)` where `W` (d×k) is
//! frozen, `D` (r×k) is the down-projection and `U` (d×r) the up-projection.
//! The low-rank update `U D` has the shape of `W` and is never materialized
//! on the forward path.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Standard deviation of the down-projection at initialization.
pub const INIT_STD: f64 = 0.02;

/// Central finite-difference step. Both losses are at most quadratic in any
/// single adapter entry, so a wide step costs no truncation error.
pub const FD_STEP: f64 = 1e-3;

/// Gradient entries smaller than this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum LoraError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("rank {r} outside 1..={max}")]
    RankOutOfRange { r: usize, max: usize },
    #[error("scaling factor must be positive and finite, got {0}")]
    InvalidAlpha(f64),
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

#[derive(Debug, Clone)]
pub struct LoraLinear {
    base: DMatrix<f64>,
    up: DMatrix<f64>,
    down: DMatrix<f64>,
    alpha: f64,
}

/// Gradients of a loss with respect to the two trainable factors. The
/// frozen base weight has no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub up: DMatrix<f64>,
    pub down: DMatrix<f64>,
}

/// Scalar loss on the layer output.
#[derive(Debug, Clone)]
pub enum Loss {
    /// `c · h`
    Linear(DVector<f64>),
    /// `0.5 * |h - target|^2`
    SquaredError(DVector<f64>),
}

impl Loss {
    pub fn value(&self, h: &DVector<f64>) -> f64 {
        match self {
            Loss::Linear(c) => c.dot(h),
            Loss::SquaredError(t) => 0.5 * (h - t).norm_squared(),
        }
    }

    /// dL/dh
    pub fn output_grad(&self, h: &DVector<f64>) -> DVector<f64> {
        match self {
            Loss::Linear(c) => c.clone(),
            Loss::SquaredError(t) => h - t,
        }
    }

    fn len(&self) -> usize {
        match self {
            Loss::Linear(v) | Loss::SquaredError(v) => v.len(),
        }
    }
}

fn check_rank(d: usize, k: usize, r: usize) -> Result<(), LoraError> {
    let max = d.min(k);
    if r == 0 || r > max {
        return Err(LoraError::RankOutOfRange { r, max });
    }
    Ok(())
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl LoraLinear {
    /// Wraps a frozen base weight with a rank-`r` adapter: the
    /// down-projection is Gaussian(0, 0.02²) and the up-projection zero,
    /// so the initial update is exactly zero.
    pub fn new(base: DMatrix<f64>, r: usize, alpha: f64, seed: u64) -> Result<Self, LoraError> {
        let (d, k) = base.shape();
        check_rank(d, k, r)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let down = gaussian(r, k, INIT_STD, &mut rng);
        Self::from_parts(base, DMatrix::zeros(d, r), down, alpha)
    }

    pub fn from_parts(
        base: DMatrix<f64>,
        up: DMatrix<f64>,
        down: DMatrix<f64>,
        alpha: f64,
    ) -> Result<Self, LoraError> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LoraError::InvalidAlpha(alpha));
        }
        let (d, k) = base.shape();
        let r = up.ncols();
        check_rank(d, k, r)?;
        if up.nrows() != d || down.nrows() != r || down.ncols() != k {
            return Err(LoraError::DimensionMismatch {
                expected: format!("up {d}x{r}, down {r}x{k}"),
                actual: format!("up {}, down {}", shape(&up), shape(&down)),
            });
        }
        Ok(Self { base, up, down, alpha })
    }

    /// Base, up and down all drawn from a unit Gaussian (down scaled by
    /// 1/sqrt(k)); a non-trivial layer for numerical checks.
    pub fn random(d: usize, k: usize, r: usize, alpha: f64, seed: u64) -> Result<Self, LoraError> {
        check_rank(d, k, r)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = gaussian(d, k, 1.0, &mut rng);
        let up = gaussian(d, r, 1.0, &mut rng);
        let down = gaussian(r, k, 1.0 / (k as f64).sqrt(), &mut rng);
        Self::from_parts(base, up, down, alpha)
    }

    pub fn d(&self) -> usize {
        self.base.nrows()
    }

    pub fn k(&self) -> usize {
        self.base.ncols()
    }

    pub fn rank(&self) -> usize {
        self.up.ncols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// alpha / r
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    pub fn up(&self) -> &DMatrix<f64> {
        &self.up
    }

    pub fn down(&self) -> &DMatrix<f64> {
        &self.down
    }

    /// SHA-256 over the bit patterns of the base weight.
    pub fn base_checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in self.base.iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hasher.finalize().into()
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<(), LoraError> {
        if x.len() != self.k() {
            return Err(LoraError::DimensionMismatch {
                expected: format!("input of length {}", self.k()),
                actual: format!("length {}", x.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, LoraError> {
        self.check_input(x)?;
        let projected = &self.down * x;
        Ok(&self.base * x + (&self.up * projected) * self.scale())
    }

    /// The unscaled low-rank update `U D` (d×k).
    pub fn delta(&self) -> DMatrix<f64> {
        &self.up * &self.down
    }

    /// `W + (alpha/r) U D`, a plain matrix equivalent to the adapter.
    pub fn merge(&self) -> DMatrix<f64> {
        &self.base + self.delta() * self.scale()
    }

    pub fn gradients(&self, x: &DVector<f64>, loss: &Loss) -> Result<LoraGrads, LoraError> {
        let h = self.forward(x)?;
        if loss.len() != self.d() {
            return Err(LoraError::DimensionMismatch {
                expected: format!("loss over {} outputs", self.d()),
                actual: format!("{} outputs", loss.len()),
            });
        }
        let g = loss.output_grad(&h) * self.scale();
        let projected = &self.down * x;
        Ok(LoraGrads {
            up: &g * projected.transpose(),
            down: (self.up.transpose() * &g) * x.transpose(),
        })
    }

    /// One gradient-descent step on the trainable factors only.
    pub fn sgd_step(&mut self, x: &DVector<f64>, loss: &Loss, lr: f64) -> Result<f64, LoraError> {
        let grads = self.gradients(x, loss)?;
        self.up -= grads.up * lr;
        self.down -= grads.down * lr;
        Ok(loss.value(&self.forward(x)?))
    }
}

#[derive(Debug, Clone, Copy)]
enum Factor {
    Up,
    Down,
}

impl LoraLinear {
    fn entry_mut(&mut self, factor: Factor, i: usize, j: usize) -> &mut f64 {
        match factor {
            Factor::Up => &mut self.up[(i, j)],
            Factor::Down => &mut self.down[(i, j)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic factor gradients with central finite differences.
pub fn grad_check(layer: &LoraLinear, x: &DVector<f64>, loss: &Loss) -> Result<GradCheck, LoraError> {
    let grads = layer.gradients(x, loss)?;
    let mut probe = layer.clone();
    let mut max_rel_error: f64 = 0.0;
    let mut entries = 0;

    let numeric = |probe: &mut LoraLinear, factor: Factor, i: usize, j: usize| -> Result<f64, LoraError> {
        let original = *probe.entry_mut(factor, i, j);
        *probe.entry_mut(factor, i, j) = original + FD_STEP;
        let plus = loss.value(&probe.forward(x)?);
        *probe.entry_mut(factor, i, j) = original - FD_STEP;
        let minus = loss.value(&probe.forward(x)?);
        *probe.entry_mut(factor, i, j) = original;
        Ok((plus - minus) / (2.0 * FD_STEP))
    };

    for (factor, analytic) in [(Factor::Up, &grads.up), (Factor::Down, &grads.down)] {
        for i in 0..analytic.nrows() {
            for j in 0..analytic.ncols() {
                let n = numeric(&mut probe, factor, i, j)?;
                max_rel_error = max_rel_error.max(rel_error(analytic[(i, j)], n));
                entries += 1;
            }
        }
    }
    Ok(GradCheck { max_rel_error, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamSavings {
    pub full_count: usize,
    pub lora_count: usize,
    pub ratio: f64,
}

/// Trainable parameters of a full d×k update versus a rank-r adapter.
pub fn param_savings(d: usize, k: usize, r: usize) -> Result<ParamSavings, LoraError> {
    check_rank(d, k, r)?;
    let full_count = d * k;
    let lora_count = r * (d + k);
    Ok(ParamSavings {
        full_count,
        lora_count,
        ratio: lora_count as f64 / full_count as f64,
    })
}

/// Summary printed by the demo: merge agreement, gradient check, a short
/// training run on the adapter and the parameter table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub alpha: f64,
    pub seed: u64,
    /// |merge()·x - forward(x)| / |forward(x)|
    pub merge_rel_error: f64,
    pub grad_check: GradCheck,
    pub losses: Vec<f64>,
    pub base_checksum: String,
    pub base_unchanged: bool,
    pub savings: ParamSavings,
}

pub fn demo(d: usize, k: usize, r: usize, seed: u64, steps: usize) -> Result<DemoReport, LoraError> {
    let alpha = r as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let unit = |n: usize, rng: &mut ChaCha8Rng| gaussian(n, 1, 1.0, rng).column(0).into_owned();

    let layer = LoraLinear::random(d, k, r, alpha, seed)?;
    let x = unit(k, &mut rng);
    let h = layer.forward(&x)?;
    let merged = layer.merge() * &x;
    let merge_rel_error = (&merged - &h).norm() / h.norm().max(f64::MIN_POSITIVE);
    let grad_check = grad_check(&layer, &x, &Loss::SquaredError(unit(d, &mut rng)))?;

    let mut trained = LoraLinear::new(layer.base().clone(), r, alpha, seed.wrapping_add(1))?;
    let before = trained.base_checksum();
    // target near the base output, reachable by a small low-rank correction
    let target = trained.base() * &x + unit(d, &mut rng) * 0.5;
    let loss = Loss::SquaredError(target);
    let lr = 0.5 / x.norm_squared();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(trained.sgd_step(&x, &loss, lr)?);
    }
    let after = trained.base_checksum();

    Ok(DemoReport {
        d,
        k,
        r,
        alpha,
        seed,
        merge_rel_error,
        grad_check,
        losses,
        base_checksum: after.iter().map(|b| format!("{b:02x}")).collect(),
        base_unchanged: before == after,
        savings: param_savings(d, k, r)?,
    })
}
