use nalgebra::DMatrix;
use rand::Rng;

use super::{check_dim, clamp_prior, GenerativeModel, MStepOptions, ModelKind, ModelParams, EPS_W, LARGE_NEG};
use crate::data::{DataRow, DataSet};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::state::BinaryState;

/// Noisy-OR Bayes net: Bernoulli(π_h) latents, binary observables with
/// `p(y_d = 1 | s) = N_d(s) = 1 - Π_h (1 - W_dh s_h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyOrParams {
    pi: Vec<f64>,
    w: DMatrix<f64>,
    log_odds: Vec<f64>,
    // log(1 - W) and 1 / (1 - W), row-major
    log1m_w: Vec<f64>,
    inv1m_w: Vec<f64>,
}

impl NoisyOrParams {
    pub fn new(pi: Vec<f64>, w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() != pi.len() {
            return Err(Error::Dimension(format!(
                "W has {} columns but pi has {} entries",
                w.ncols(),
                pi.len()
            )));
        }
        if let Some(p) = pi.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidParam(format!("noisy-OR prior {p} outside (0,1)")));
        }
        if let Some(v) = w.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidParam(format!("noisy-OR weight {v} outside [0,1]")));
        }
        let log_odds = pi.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let row_major = w.transpose();
        let log1m_w = row_major.iter().map(|v| (-v).ln_1p()).collect();
        let inv1m_w = row_major.iter().map(|v| 1.0 / (1.0 - v)).collect();
        Ok(NoisyOrParams {
            pi,
            w,
            log_odds,
            log1m_w,
            inv1m_w,
        })
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// `log(1 - N_d(s))` for every observed coordinate, via `Σ_h log(1 - W_dh)`.
    fn log_off(&self, active: &[usize], d: usize) -> f64 {
        let row = &self.log1m_w[d * self.pi.len()..(d + 1) * self.pi.len()];
        active.iter().map(|&h| row[h]).sum()
    }
}

/// `log N_d` from `log(1 - N_d)`.
#[inline]
fn log_on(log_off: f64) -> f64 {
    (-log_off.exp_m1()).ln()
}

#[derive(Clone, Debug)]
pub struct NoisyOrStats {
    n: usize,
    sum_s: Vec<f64>,
    num: DMatrix<f64>,
    den: DMatrix<f64>,
}

impl GenerativeModel for NoisyOrParams {
    type Stats = NoisyOrStats;

    fn kind(&self) -> ModelKind {
        ModelKind::NoisyOr
    }

    fn latent_dim(&self) -> usize {
        self.pi.len()
    }

    fn observed_dim(&self) -> usize {
        self.w.nrows()
    }

    fn log_constant(&self, _observed: usize) -> f64 {
        self.pi.iter().map(|p| (-p).ln_1p()).sum()
    }

    fn log_pseudo_joint(&self, state: &BinaryState, row: DataRow<'_>) -> Result<f64> {
        check_dim(row, state, self.observed_dim(), self.latent_dim())?;
        if state.is_zero() {
            let any_on = row.observed().any(|d| row.y[d] != 0.0);
            return Ok(if any_on { LARGE_NEG } else { 0.0 });
        }
        let active = state.active_list();
        let mut total: f64 = active.iter().map(|&h| self.log_odds[h]).sum();
        for d in row.observed() {
            let off = self.log_off(&active, d);
            let y = row.y[d];
            if y != 0.0 {
                total += y * log_on(off);
            }
            if y != 1.0 {
                total += (1.0 - y) * off;
            }
        }
        Ok(total)
    }

    fn sparsity(&self) -> f64 {
        self.pi.iter().sum()
    }

    fn new_stats(&self, _data: &DataSet, _opts: &MStepOptions) -> NoisyOrStats {
        let (d, h) = self.w.shape();
        NoisyOrStats {
            n: 0,
            sum_s: vec![0.0; h],
            num: DMatrix::zeros(d, h),
            den: DMatrix::zeros(d, h),
        }
    }

    fn accumulate(
        &self,
        stats: &mut NoisyOrStats,
        row: DataRow<'_>,
        states: &[BinaryState],
        weights: &[f64],
    ) -> Result<()> {
        stats.n += 1;
        for (state, &wt) in states.iter().zip(weights) {
            if wt == 0.0 || state.is_zero() {
                continue;
            }
            let active = state.active_list();
            for &h in &active {
                stats.sum_s[h] += wt;
            }
            let h_dim = self.pi.len();
            for d in row.observed() {
                let off = self.log_off(&active, d);
                let off_prob = off.exp();
                let on_prob = if off_prob < 0.5 { 1.0 - off_prob } else { -off.exp_m1() };
                if !(on_prob > 0.0 && off_prob > 0.0) {
                    continue;
                }
                let y = row.y[d];
                let inv = &self.inv1m_w[d * h_dim..(d + 1) * h_dim];
                let scale = wt / on_prob;
                for &h in &active {
                    // W̃_dh = Π_{h' ≠ h} (1 - W_dh' s_h') = off_prob / (1 - W_dh)
                    let a = scale * inv[h];
                    stats.num[(d, h)] += (y - 1.0) * a;
                    stats.den[(d, h)] += a * off_prob * inv[h];
                }
            }
        }
        Ok(())
    }

    fn merge_stats(&self, into: &mut NoisyOrStats, other: NoisyOrStats) {
        into.n += other.n;
        for (a, b) in into.sum_s.iter_mut().zip(&other.sum_s) {
            *a += b;
        }
        into.num += &other.num;
        into.den += &other.den;
    }

    fn m_step(&self, stats: NoisyOrStats, opts: &MStepOptions) -> Result<Self> {
        if stats.n == 0 {
            return Err(Error::InvalidParam("M-step on empty statistics".into()));
        }
        let n = stats.n as f64;
        let pi = stats
            .sum_s
            .iter()
            .map(|s| clamp_prior(s / n, opts.pi_floor))
            .collect();
        let mut w = self.w.clone();
        for (idx, v) in w.iter_mut().enumerate() {
            let den = stats.den[idx];
            if den > 0.0 && den.is_finite() {
                *v = (1.0 + stats.num[idx] / den).clamp(EPS_W, 1.0 - EPS_W);
            }
        }
        NoisyOrParams::new(pi, w)
    }

    fn sample(&self, n: usize, rng: &mut StreamRng) -> (DataSet, Vec<BinaryState>) {
        let (d, h) = self.w.shape();
        let mut values = Vec::with_capacity(n * d);
        let mut latents = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = BinaryState::zeros(h);
            for (hh, &p) in self.pi.iter().enumerate() {
                if rng.random::<f64>() < p {
                    s.set(hh, true);
                }
            }
            let active = s.active_indices();
            for dd in 0..d {
                let on_prob = 1.0 - active.iter().map(|&hh| 1.0 - self.w[(dd, hh)]).product::<f64>();
                values.push(if rng.random::<f64>() < on_prob { 1.0 } else { 0.0 });
            }
            latents.push(s);
        }
        (DataSet::new(n, d, values).expect("consistent buffer"), latents)
    }

    fn to_params(&self) -> ModelParams {
        ModelParams::NoisyOr(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn params() -> NoisyOrParams {
        NoisyOrParams::new(
            vec![0.3, 0.6, 0.2],
            DMatrix::from_row_slice(2, 3, &[0.9, 0.2, 0.5, 0.1, 0.7, 0.4]),
        )
        .unwrap()
    }

    /// Direct `log p(s, y)` from the product form.
    fn log_joint_direct(p: &NoisyOrParams, s: &[bool], y: &[f64]) -> f64 {
        let mut lp = 0.0;
        for (h, &on) in s.iter().enumerate() {
            lp += if on { p.pi[h].ln() } else { (1.0 - p.pi[h]).ln() };
        }
        for (d, &yd) in y.iter().enumerate() {
            let mut prod = 1.0;
            for (h, &on) in s.iter().enumerate() {
                if on {
                    prod *= 1.0 - p.w[(d, h)];
                }
            }
            let nd = 1.0 - prod;
            lp += if yd == 1.0 { nd.ln() } else { (1.0 - nd).ln() };
        }
        lp
    }

    #[test]
    fn zero_state_cases() {
        let p = params();
        let z = BinaryState::zeros(3);
        assert_eq!(p.log_pseudo_joint(&z, DataRow::full(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(p.log_pseudo_joint(&z, DataRow::full(&[1.0, 0.0])).unwrap(), LARGE_NEG);
        // masked-out "on" coordinate does not trigger the sentinel
        let mask = [false, true];
        let row = DataRow { y: &[1.0, 0.0], mask: Some(&mask) };
        assert_eq!(p.log_pseudo_joint(&z, row).unwrap(), 0.0);
    }

    #[test]
    fn log_constant_value() {
        let p = NoisyOrParams::new(vec![0.5; 3], DMatrix::from_element(1, 3, 0.5)).unwrap();
        assert!((p.log_constant(1) - (-2.0794415416798357)).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_log_joint() {
        let p = params();
        for idx in 1..8u64 {
            let s = BinaryState::from_index(idx, 3);
            for y in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]] {
                let got = p.log_pseudo_joint(&s, DataRow::full(&y)).unwrap() + p.log_constant(2);
                let want = log_joint_direct(&p, &s.to_bits(), &y);
                assert!((got - want).abs() < 1e-12, "{s:?} {y:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn all_one_columns_always_fire() {
        let p = NoisyOrParams::new(vec![0.5; 2], DMatrix::from_element(3, 2, 1.0)).unwrap();
        let mut rng = stream(3, Purpose::Test, 0, 0);
        let (data, latents) = p.sample(200, &mut rng);
        for (n, s) in latents.iter().enumerate() {
            if !s.is_zero() {
                assert!(data.row(n).y.iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn m_step_keeps_weights_in_range() {
        let p = params();
        let data = DataSet::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let mut stats = p.new_stats(&data, &MStepOptions::default());
        for n in 0..3 {
            let states: Vec<_> = (0..8).map(|i| BinaryState::from_index(i, 3)).collect();
            let weights = vec![1.0 / 8.0; 8];
            p.accumulate(&mut stats, data.row(n), &states, &weights).unwrap();
        }
        let next = p.m_step(stats, &MStepOptions::default()).unwrap();
        assert!(next.w.iter().all(|&v| (EPS_W..=1.0 - EPS_W).contains(&v)));
        assert!(next.pi.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_invalid() {
        assert!(NoisyOrParams::new(vec![1.0], DMatrix::from_element(1, 1, 0.5)).is_err());
        assert!(NoisyOrParams::new(vec![0.5], DMatrix::from_element(1, 1, 1.5)).is_err());
        assert!(NoisyOrParams::new(vec![0.5, 0.5], DMatrix::from_element(1, 1, 0.5)).is_err());
    }
}
