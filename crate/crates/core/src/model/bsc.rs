use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;

use super::{
    check_dim, column, dot, expected_residual, solve_dictionary, GenerativeModel, MStepOptions, ModelKind,
    ModelParams, Projection, SupportMoment, PI_CLAMP, SIGMA2_FLOOR,
};
use crate::data::{DataRow, DataSet};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::state::BinaryState;

/// Binary sparse coding: Bernoulli(π) latents shared across units and
/// `y ~ N(W s, σ² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BscParams {
    pi: f64,
    sigma2: f64,
    w: DMatrix<f64>,
    log_odds: f64,
    gram: DMatrix<f64>,
}

impl BscParams {
    pub fn new(pi: f64, sigma2: f64, w: DMatrix<f64>) -> Result<Self> {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::InvalidParam(format!("BSC prior {pi} outside (0,1)")));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParam(format!("BSC variance {sigma2} not positive")));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("BSC dictionary has non-finite entries".into()));
        }
        Ok(BscParams {
            pi,
            sigma2,
            log_odds: (pi / (1.0 - pi)).ln(),
            gram: w.transpose() * &w,
            w,
        })
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Log-pseudo-joint; fully observed rows use `|y - W s|² = |y|² - 2 sᵀWᵀy
    /// + sᵀ WᵀW s`.
    fn lpj_with(&self, state: &BinaryState, row: DataRow<'_>, proj: Option<&Projection>) -> f64 {
        let active = state.active_list();
        let sq = match row.mask {
            None => {
                let (mut cross, mut quad) = (0.0, 0.0);
                for &i in &active {
                    cross += proj.map_or_else(|| dot(column(&self.w, i), row.y), |p| p.wty[i]);
                    for &j in &active {
                        quad += self.gram[(i, j)];
                    }
                }
                let yy = proj.map_or_else(|| dot(row.y, row.y), |p| p.yy);
                (yy - 2.0 * cross + quad).max(0.0)
            }
            Some(m) => {
                let mut resid: SmallVec<[f64; 64]> = SmallVec::from_slice(row.y);
                for &h in &active {
                    for (r, v) in resid.iter_mut().zip(column(&self.w, h)) {
                        *r -= v;
                    }
                }
                resid.iter().zip(m).filter(|(_, &o)| o).map(|(r, _)| r * r).sum()
            }
        };
        self.log_odds * active.len() as f64 - sq / (2.0 * self.sigma2)
    }

    /// `W s` over all coordinates.
    pub fn mean(&self, state: &BinaryState) -> Vec<f64> {
        let d = self.w.nrows();
        let mut out = vec![0.0; d];
        for h in state.active() {
            for (o, v) in out.iter_mut().zip(self.w.column(h).iter()) {
                *o += v;
            }
        }
        out
    }
}

/// Sufficient statistics: `Σ<s>`, `Σ<ssᵀ>` (shared by fully observed rows,
/// per coordinate for masked ones), `Σ y <s>ᵀ`, `Σ y²` and observed counts.
#[derive(Clone, Debug)]
pub struct BscStats {
    n: usize,
    sum_s: f64,
    gram: DMatrix<f64>,
    gram_rows: Option<Vec<DMatrix<f64>>>,
    cross: DMatrix<f64>,
    yy: Vec<f64>,
    observed: usize,
}

impl GenerativeModel for BscParams {
    type Stats = BscStats;

    fn kind(&self) -> ModelKind {
        ModelKind::Bsc
    }

    fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    fn observed_dim(&self) -> usize {
        self.w.nrows()
    }

    fn log_constant(&self, observed: usize) -> f64 {
        self.latent_dim() as f64 * (-self.pi).ln_1p()
            - 0.5 * observed as f64 * (2.0 * PI * self.sigma2).ln()
    }

    fn log_pseudo_joint(&self, state: &BinaryState, row: DataRow<'_>) -> Result<f64> {
        check_dim(row, state, self.observed_dim(), self.latent_dim())?;
        Ok(self.lpj_with(state, row, None))
    }

    fn log_pseudo_joints(&self, states: &[BinaryState], row: DataRow<'_>) -> Result<Vec<f64>> {
        for s in states {
            check_dim(row, s, self.observed_dim(), self.latent_dim())?;
        }
        let proj = (row.mask.is_none() && states.len() > 1).then(|| Projection::new(&self.w, row.y));
        Ok(states.iter().map(|s| self.lpj_with(s, row, proj.as_ref())).collect())
    }

    fn sparsity(&self) -> f64 {
        self.pi * self.latent_dim() as f64
    }

    fn new_stats(&self, data: &DataSet, _opts: &MStepOptions) -> BscStats {
        let (d, h) = self.w.shape();
        BscStats {
            n: 0,
            sum_s: 0.0,
            gram: DMatrix::zeros(h, h),
            gram_rows: data.has_missing().then(|| vec![DMatrix::zeros(h, h); d]),
            cross: DMatrix::zeros(d, h),
            yy: vec![0.0; d],
            observed: 0,
        }
    }

    fn accumulate(
        &self,
        stats: &mut BscStats,
        row: DataRow<'_>,
        states: &[BinaryState],
        weights: &[f64],
    ) -> Result<()> {
        let h = self.latent_dim();
        stats.n += 1;
        let mut moment = SupportMoment::new(states, h);
        let pos = moment.positions(h);
        let u = moment.support.len();
        let mut mean_s = vec![0.0; h];
        for (state, &wt) in states.iter().zip(weights) {
            let active = state.active_list();
            for &i in &active {
                mean_s[i] += wt;
                stats.sum_s += wt;
                for &j in &active {
                    moment.moment[pos[i] * u + pos[j]] += wt;
                }
            }
        }
        match (row.mask, stats.gram_rows.as_mut()) {
            (Some(_), Some(rows)) => {
                for dd in row.observed() {
                    moment.add_into(&mut rows[dd]);
                }
            }
            _ => moment.add_into(&mut stats.gram),
        }
        for dd in row.observed() {
            let y = row.y[dd];
            stats.yy[dd] += y * y;
            stats.observed += 1;
            for &i in &moment.support {
                stats.cross[(dd, i)] += y * mean_s[i];
            }
        }
        Ok(())
    }

    fn merge_stats(&self, into: &mut BscStats, other: BscStats) {
        into.n += other.n;
        into.sum_s += other.sum_s;
        into.gram += &other.gram;
        if let (Some(a), Some(b)) = (into.gram_rows.as_mut(), other.gram_rows) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        into.cross += &other.cross;
        for (a, b) in into.yy.iter_mut().zip(&other.yy) {
            *a += b;
        }
        into.observed += other.observed;
    }

    fn m_step(&self, stats: BscStats, _opts: &MStepOptions) -> Result<Self> {
        if stats.n == 0 || stats.observed == 0 {
            return Err(Error::InvalidParam("M-step on empty statistics".into()));
        }
        let h = self.latent_dim() as f64;
        let pi = (stats.sum_s / (stats.n as f64 * h)).clamp(PI_CLAMP, 1.0 - PI_CLAMP);
        let w = solve_dictionary(&stats.cross, &stats.gram, stats.gram_rows.as_deref(), &self.w)?;
        let resid = expected_residual(&w, &stats.yy, &stats.cross, &stats.gram, stats.gram_rows.as_deref());
        let sigma2 = (resid / stats.observed as f64).max(SIGMA2_FLOOR);
        BscParams::new(pi, sigma2, w)
    }

    fn sample(&self, n: usize, rng: &mut StreamRng) -> (DataSet, Vec<BinaryState>) {
        let (d, h) = self.w.shape();
        let sigma = self.sigma2.sqrt();
        let mut values = Vec::with_capacity(n * d);
        let mut latents = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = BinaryState::zeros(h);
            for hh in 0..h {
                if rng.random::<f64>() < self.pi {
                    s.set(hh, true);
                }
            }
            let mean = self.mean(&s);
            for m in mean {
                let eps: f64 = rng.sample(StandardNormal);
                values.push(m + sigma * eps);
            }
            latents.push(s);
        }
        (DataSet::new(n, d, values).expect("consistent buffer"), latents)
    }

    fn to_params(&self) -> ModelParams {
        ModelParams::Bsc(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn tiny() -> BscParams {
        BscParams::new(0.5, 1.0, DMatrix::from_row_slice(1, 2, &[1.0, 2.0])).unwrap()
    }

    #[test]
    fn lpj_worked_example() {
        let s = BinaryState::from_bits(&[true, false]);
        let v = tiny().log_pseudo_joint(&s, DataRow::full(&[3.0])).unwrap();
        assert!((v - (-2.0)).abs() < 1e-15);
    }

    #[test]
    fn log_constant_worked_example() {
        // 2 log 0.5 - 0.5 log(2π)
        assert!((tiny().log_constant(1) - (-2.305_232_894_324_563)).abs() < 1e-12);
    }

    #[test]
    fn lpj_plus_constant_is_log_joint() {
        let p = BscParams::new(
            0.3,
            0.7,
            DMatrix::from_row_slice(3, 2, &[1.0, -0.5, 0.2, 2.0, -1.0, 0.3]),
        )
        .unwrap();
        let y = [0.4, -1.2, 2.5];
        for idx in 0..4 {
            let s = BinaryState::from_index(idx, 2);
            let k = s.count_ones() as f64;
            let mean = p.mean(&s);
            let mut want = k * 0.3f64.ln() + (2.0 - k) * 0.7f64.ln();
            for d in 0..3 {
                let r = y[d] - mean[d];
                want += -0.5 * (2.0 * PI * 0.7).ln() - r * r / (2.0 * 0.7);
            }
            let got = p.log_pseudo_joint(&s, DataRow::full(&y)).unwrap() + p.log_constant(3);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_lpj_ignores_missing() {
        let p = BscParams::new(0.5, 1.0, DMatrix::from_row_slice(2, 1, &[1.0, 1.0])).unwrap();
        let s = BinaryState::from_bits(&[true]);
        let mask = [true, false];
        let row = DataRow { y: &[2.0, 100.0], mask: Some(&mask) };
        assert!((p.log_pseudo_joint(&s, row).unwrap() - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_sample_is_mean() {
        let p = BscParams::new(0.4, 1e-300, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut rng = stream(1, Purpose::Test, 0, 0);
        let (data, latents) = p.sample(50, &mut rng);
        for (n, s) in latents.iter().enumerate() {
            let mean = p.mean(s);
            for d in 0..2 {
                assert!((data.row(n).y[d] - mean[d]).abs() < 1e-140);
            }
        }
    }

    #[test]
    fn degenerate_posterior_gives_least_squares() {
        // every datapoint has a single state; W solves least squares of Y on S
        let p = BscParams::new(0.5, 1.0, DMatrix::zeros(2, 2)).unwrap();
        let states = [
            BinaryState::from_bits(&[true, false]),
            BinaryState::from_bits(&[false, true]),
            BinaryState::from_bits(&[true, true]),
        ];
        let rows = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.5, 2.5]];
        let data = DataSet::from_rows(&rows).unwrap();
        let mut stats = p.new_stats(&data, &MStepOptions::default());
        for (n, s) in states.iter().enumerate() {
            p.accumulate(&mut stats, data.row(n), std::slice::from_ref(s), &[1.0]).unwrap();
        }
        let next = p.m_step(stats, &MStepOptions::default()).unwrap();
        // normal equations: S = [[1,0],[0,1],[1,1]]
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.5, 2.5]);
        let sts = s.transpose() * &s;
        let w_ls = (sts.clone().try_inverse().unwrap() * s.transpose() * &y).transpose();
        assert!((next.w() - &w_ls).abs().max() < 1e-7);
        let resid = &y - &s * w_ls.transpose();
        let sigma2 = resid.norm_squared() / 6.0;
        assert!((next.sigma2() - sigma2).abs() < 1e-7);
        assert!((next.pi() - 4.0 / 6.0).abs() < 1e-15);
    }
}
