//! Generative models with binary latents: noisy-OR, binary sparse coding
//! (BSC) and spike-and-slab sparse coding (SSSC).
//!
//! Every model exposes the same surface to the variational machinery:
//! a log-pseudo-joint (log-joint minus the parameter-only constant), the
//! constant itself, streaming sufficient statistics for the M-step, and
//! ancestral sampling.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::data::{DataRow, DataSet};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::state::BinaryState;

mod bsc;
mod noisy_or;
mod sssc;

pub use bsc::{BscParams, BscStats};
pub use noisy_or::{NoisyOrParams, NoisyOrStats};
pub use sssc::{ActiveInference, SsscParams, SsscStats};

/// Stand-in for `log 0` in the noisy-OR zero-state case.
pub const LARGE_NEG: f64 = -1e30;
/// Noisy-OR weights are kept in `[EPS_W, 1 - EPS_W]`.
pub const EPS_W: f64 = 1e-6;
pub const SIGMA2_FLOOR: f64 = 1e-9;
/// Prior activations are kept in `[PI_CLAMP, 1 - PI_CLAMP]`.
pub const PI_CLAMP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    NoisyOr,
    Bsc,
    Sssc,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::NoisyOr => 0,
            ModelKind::Bsc => 1,
            ModelKind::Sssc => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::NoisyOr),
            1 => Some(ModelKind::Bsc),
            2 => Some(ModelKind::Sssc),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::NoisyOr => "noisy-or",
            ModelKind::Bsc => "bsc",
            ModelKind::Sssc => "sssc",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "noisy-or" | "noisyor" | "nor" => Ok(ModelKind::NoisyOr),
            "bsc" | "ebsc" => Ok(ModelKind::Bsc),
            "sssc" | "es3c" | "spike-and-slab" => Ok(ModelKind::Sssc),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

/// Which second moment enters the SSSC variance update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SigmaUpdate {
    /// `Tr Σ [y yᵀ - W <sz><sz>ᵀ Wᵀ]`.
    #[default]
    OuterOfMeans,
    /// `Σ <|y - W (s⊙z)|²>`, i.e. uses `<sz szᵀ>`.
    SecondMoment,
}

impl FromStr for SigmaUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "outer-of-means" | "printed" => Ok(SigmaUpdate::OuterOfMeans),
            "second-moment" | "exact" => Ok(SigmaUpdate::SecondMoment),
            other => Err(Error::Config(format!("unknown sigma update '{other}'"))),
        }
    }
}

impl fmt::Display for SigmaUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmaUpdate::OuterOfMeans => "outer-of-means",
            SigmaUpdate::SecondMoment => "second-moment",
        })
    }
}

/// How the SSSC slab mean and covariance are re-estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SlabUpdate {
    /// Active-coordinate averages `Σ<sz> / Σ<s>` and the elementwise
    /// quotient for `Ψ`.
    #[default]
    Printed,
    /// Moments of the full slab vector, inactive coordinates taken from the
    /// conditional prior; never lowers the free energy.
    Exact,
}

impl FromStr for SlabUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "printed" => Ok(SlabUpdate::Printed),
            "exact" => Ok(SlabUpdate::Exact),
            other => Err(Error::Config(format!("unknown slab update '{other}'"))),
        }
    }
}

impl fmt::Display for SlabUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SlabUpdate::Printed => "printed",
            SlabUpdate::Exact => "exact",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MStepOptions {
    /// Lower bound applied to each `π_h` (noisy-OR and SSSC).
    pub pi_floor: Option<f64>,
    pub sigma_update: SigmaUpdate,
    pub slab_update: SlabUpdate,
}

/// Interface shared by the three models.
pub trait GenerativeModel: Clone + Send + Sync + fmt::Debug {
    type Stats: Send;

    fn kind(&self) -> ModelKind;

    /// `H`
    fn latent_dim(&self) -> usize;

    /// `D`
    fn observed_dim(&self) -> usize;

    /// Parameter-only part `C(Θ)` of the log-joint for a datapoint with
    /// `observed` observed coordinates.
    fn log_constant(&self, observed: usize) -> f64;

    fn log_pseudo_joint(&self, state: &BinaryState, row: DataRow<'_>) -> Result<f64>;

    fn log_pseudo_joints(&self, states: &[BinaryState], row: DataRow<'_>) -> Result<Vec<f64>> {
        states.iter().map(|s| self.log_pseudo_joint(s, row)).collect()
    }

    /// Expected number of active units under the prior.
    fn sparsity(&self) -> f64;

    fn new_stats(&self, data: &DataSet, opts: &MStepOptions) -> Self::Stats;

    /// Add one datapoint's truncated-posterior expectations; `weights` are
    /// the normalised posterior weights of `states`.
    fn accumulate(
        &self,
        stats: &mut Self::Stats,
        row: DataRow<'_>,
        states: &[BinaryState],
        weights: &[f64],
    ) -> Result<()>;

    fn merge_stats(&self, into: &mut Self::Stats, other: Self::Stats);

    fn m_step(&self, stats: Self::Stats, opts: &MStepOptions) -> Result<Self>;

    /// Post-M-step safeguard; returns a warning when parameters were reset.
    fn stabilize(self) -> Result<(Self, Option<String>)> {
        Ok((self, None))
    }

    /// Draw `n` datapoints; returns the data and the generating binary latents.
    fn sample(&self, n: usize, rng: &mut StreamRng) -> (DataSet, Vec<BinaryState>);

    fn to_params(&self) -> ModelParams;
}

/// Parameters of any of the three models.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    NoisyOr(NoisyOrParams),
    Bsc(BscParams),
    Sssc(SsscParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::NoisyOr(_) => ModelKind::NoisyOr,
            ModelParams::Bsc(_) => ModelKind::Bsc,
            ModelParams::Sssc(_) => ModelKind::Sssc,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            ModelParams::NoisyOr(p) => p.latent_dim(),
            ModelParams::Bsc(p) => p.latent_dim(),
            ModelParams::Sssc(p) => p.latent_dim(),
        }
    }

    pub fn observed_dim(&self) -> usize {
        match self {
            ModelParams::NoisyOr(p) => p.observed_dim(),
            ModelParams::Bsc(p) => p.observed_dim(),
            ModelParams::Sssc(p) => p.observed_dim(),
        }
    }

    /// The dictionary / weight matrix `W` (`D × H`).
    pub fn w(&self) -> &DMatrix<f64> {
        match self {
            ModelParams::NoisyOr(p) => p.w(),
            ModelParams::Bsc(p) => p.w(),
            ModelParams::Sssc(p) => p.w(),
        }
    }

    /// Per-unit prior activations (BSC's shared `π` repeated `H` times).
    pub fn priors(&self) -> Vec<f64> {
        match self {
            ModelParams::NoisyOr(p) => p.pi().to_vec(),
            ModelParams::Bsc(p) => vec![p.pi(); p.latent_dim()],
            ModelParams::Sssc(p) => p.pi().to_vec(),
        }
    }

    pub fn log_pseudo_joint(&self, state: &BinaryState, row: DataRow<'_>) -> Result<f64> {
        match self {
            ModelParams::NoisyOr(p) => p.log_pseudo_joint(state, row),
            ModelParams::Bsc(p) => p.log_pseudo_joint(state, row),
            ModelParams::Sssc(p) => p.log_pseudo_joint(state, row),
        }
    }

    pub fn log_constant(&self, observed: usize) -> f64 {
        match self {
            ModelParams::NoisyOr(p) => p.log_constant(observed),
            ModelParams::Bsc(p) => p.log_constant(observed),
            ModelParams::Sssc(p) => p.log_constant(observed),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> (DataSet, Vec<BinaryState>) {
        match self {
            ModelParams::NoisyOr(p) => p.sample(n, rng),
            ModelParams::Bsc(p) => p.sample(n, rng),
            ModelParams::Sssc(p) => p.sample(n, rng),
        }
    }
}

/// Column `h` of a column-major matrix.
#[inline]
pub(crate) fn column(w: &DMatrix<f64>, h: usize) -> &[f64] {
    let d = w.nrows();
    &w.as_slice()[h * d..(h + 1) * d]
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Wᵀ y` and `|y|²` of a fully observed row, shared by all states of a
/// batch. Entries equal the per-state [`dot`] products bit for bit.
pub(crate) struct Projection {
    pub wty: Vec<f64>,
    pub yy: f64,
}

impl Projection {
    pub fn new(w: &DMatrix<f64>, y: &[f64]) -> Self {
        Projection {
            wty: (0..w.ncols()).map(|h| dot(column(w, h), y)).collect(),
            yy: dot(y, y),
        }
    }
}

pub(crate) fn check_dim(row: DataRow<'_>, state: &BinaryState, d: usize, h: usize) -> Result<()> {
    if row.dim() != d || state.len() != h {
        return Err(Error::Dimension(format!(
            "model has D={d}, H={h}; got datapoint of length {} and state of length {}",
            row.dim(),
            state.len()
        )));
    }
    Ok(())
}

pub(crate) fn clamp_prior(pi: f64, floor: Option<f64>) -> f64 {
    let lo = floor.map_or(PI_CLAMP, |f| f.max(PI_CLAMP));
    pi.clamp(lo, 1.0 - PI_CLAMP)
}

/// Per-datapoint sparse second moment: the union of active units across
/// the weighted states and the `u × u` moment on that support.
pub(crate) struct SupportMoment {
    pub support: Vec<usize>,
    pub moment: Vec<f64>,
}

impl SupportMoment {
    pub fn new(states: &[BinaryState], h: usize) -> Self {
        let mut mark = vec![false; h];
        for s in states {
            for i in s.active() {
                mark[i] = true;
            }
        }
        let support: Vec<usize> = (0..h).filter(|&i| mark[i]).collect();
        let u = support.len();
        SupportMoment {
            support,
            moment: vec![0.0; u * u],
        }
    }

    /// Position of each latent index within the support (usize::MAX if absent).
    pub fn positions(&self, h: usize) -> Vec<usize> {
        let mut pos = vec![usize::MAX; h];
        for (p, &i) in self.support.iter().enumerate() {
            pos[i] = p;
        }
        pos
    }

    /// Add `moment` into the `H × H` matrix `target`.
    pub fn add_into(&self, target: &mut DMatrix<f64>) {
        let u = self.support.len();
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                target[(i, j)] += self.moment[a * u + b];
            }
        }
    }
}

/// M-step row solve for a masked or unmasked design: `W_d = B_d A_d⁻¹` with
/// a relative ridge; rows whose gram has zero trace keep their old values.
pub(crate) fn solve_dictionary(
    cross: &DMatrix<f64>,
    gram_full: &DMatrix<f64>,
    gram_rows: Option<&[DMatrix<f64>]>,
    old: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    use crate::linalg::{add_relative_ridge, solve_right_spd};
    let (d, h) = old.shape();
    match gram_rows {
        None => {
            let mut a = gram_full.clone();
            if a.trace() <= 0.0 {
                return Ok(old.clone());
            }
            add_relative_ridge(&mut a);
            solve_right_spd(cross, &a)
        }
        Some(rows) => {
            let mut w = old.clone();
            for dd in 0..d {
                let mut a = gram_full + &rows[dd];
                if a.trace() <= 0.0 {
                    continue;
                }
                add_relative_ridge(&mut a);
                let b = cross.rows(dd, 1).into_owned();
                let row = solve_right_spd(&b, &a)?;
                for hh in 0..h {
                    w[(dd, hh)] = row[(0, hh)];
                }
            }
            Ok(w)
        }
    }
}

/// Residual sum `Σ_d [yy_d - 2 W_d·B_d + W_d A_d W_dᵀ]` for the updated `W`.
pub(crate) fn expected_residual(
    w: &DMatrix<f64>,
    yy: &[f64],
    cross: &DMatrix<f64>,
    gram_full: &DMatrix<f64>,
    gram_rows: Option<&[DMatrix<f64>]>,
) -> f64 {
    let (d, _) = w.shape();
    let mut total = 0.0;
    // rows share the full gram; add per-row parts when present
    let wg = w * gram_full;
    for dd in 0..d {
        let wd = w.row(dd);
        let mut quad = wg.row(dd).dot(&wd);
        if let Some(rows) = gram_rows {
            quad += (wd * &rows[dd]).dot(&wd);
        }
        total += yy[dd] - 2.0 * wd.dot(&cross.row(dd)) + quad;
    }
    total
}
