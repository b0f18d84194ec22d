//! Posterior-predictive reconstruction of data coordinates from truncated
//! posteriors: `ŷ_d = W_d <s>` for BSC and `ŷ_d = W_d <s ⊙ z>` for SSSC.

use crate::data::DataRow;
use crate::error::{Error, Result};
use crate::model::{BscParams, GenerativeModel, ModelParams, SsscParams};
use crate::variational::LatentStateSet;

/// Estimated values for a subset of coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub coords: Vec<usize>,
    pub values: Vec<f64>,
}

/// Models with a posterior-predictive mean estimator.
pub trait Reconstruct: GenerativeModel {
    /// Estimate `targets` of the datapoint `row` whose set is `set`.
    fn reconstruct(&self, set: &LatentStateSet, row: DataRow<'_>, targets: &[usize]) -> Result<Reconstruction>;
}

fn check_targets(targets: &[usize], d: usize) -> Result<()> {
    match targets.iter().find(|&&t| t >= d) {
        Some(t) => Err(Error::Dimension(format!("target coordinate {t} outside D={d}"))),
        None => Ok(()),
    }
}

fn project(w: &nalgebra::DMatrix<f64>, latent_mean: &[f64], targets: &[usize]) -> Reconstruction {
    let values = targets
        .iter()
        .map(|&d| w.row(d).iter().zip(latent_mean).map(|(a, b)| a * b).sum())
        .collect();
    Reconstruction {
        coords: targets.to_vec(),
        values,
    }
}

/// `ŷ_d = W_d <s>` over the truncated posterior.
pub fn estimate_bsc(set: &LatentStateSet, params: &BscParams, targets: &[usize]) -> Result<Reconstruction> {
    check_targets(targets, params.observed_dim())?;
    if set.is_empty() {
        return Err(Error::EmptySelection("empty state set".into()));
    }
    let h = params.latent_dim();
    let mut mean = vec![0.0; h];
    for (s, w) in set.states().iter().zip(set.weights()) {
        for i in s.active() {
            mean[i] += w;
        }
    }
    Ok(project(params.w(), &mean, targets))
}

/// `ŷ_d = W_d Σ_s q(s) κ_s`, with `κ_s` the slab posterior mean given the
/// observed part of `row`.
pub fn estimate_sssc(set: &LatentStateSet, params: &SsscParams, row: DataRow<'_>, targets: &[usize]) -> Result<Reconstruction> {
    check_targets(targets, params.observed_dim())?;
    if set.is_empty() {
        return Err(Error::EmptySelection("empty state set".into()));
    }
    let h = params.latent_dim();
    let mut mean = vec![0.0; h];
    for (s, w) in set.states().iter().zip(set.weights()) {
        let inf = params.active_inference(s, row, false)?;
        for (k, &i) in inf.active.iter().enumerate() {
            mean[i] += w * inf.kappa[k];
        }
    }
    Ok(project(params.w(), &mean, targets))
}

impl Reconstruct for BscParams {
    fn reconstruct(&self, set: &LatentStateSet, _row: DataRow<'_>, targets: &[usize]) -> Result<Reconstruction> {
        estimate_bsc(set, self, targets)
    }
}

impl Reconstruct for SsscParams {
    fn reconstruct(&self, set: &LatentStateSet, row: DataRow<'_>, targets: &[usize]) -> Result<Reconstruction> {
        estimate_sssc(set, self, row, targets)
    }
}

/// Dispatch over the model variants; noisy-OR has no estimator.
pub fn estimate(params: &ModelParams, set: &LatentStateSet, row: DataRow<'_>, targets: &[usize]) -> Result<Reconstruction> {
    match params {
        ModelParams::Bsc(p) => estimate_bsc(set, p, targets),
        ModelParams::Sssc(p) => estimate_sssc(set, p, row, targets),
        ModelParams::NoisyOr(_) => Err(Error::InvalidParam("noisy-OR has no reconstruction estimator".into())),
    }
}
