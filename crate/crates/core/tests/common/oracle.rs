//! Brute-force reference computations: full log-joints, exact posteriors by
//! enumerating all `2^H` states, and closed-form M-steps from those exact
//! expectations. Dense textbook formulas only; nothing here calls into the
//! model code under test.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use evoem::model::{BscParams, NoisyOrParams, SsscParams};

pub fn bits(index: usize, h: usize) -> Vec<bool> {
    (0..h).map(|i| index >> i & 1 == 1).collect()
}

pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `log p(s, y)` for noisy-OR.
pub fn nor_log_joint(p: &NoisyOrParams, s: &[bool], y: &[f64]) -> f64 {
    let mut out = 0.0;
    for (h, &on) in s.iter().enumerate() {
        out += if on { p.pi()[h].ln() } else { (1.0 - p.pi()[h]).ln() };
    }
    for (d, &yd) in y.iter().enumerate() {
        let mut off = 1.0;
        for (h, &on) in s.iter().enumerate() {
            if on {
                off *= 1.0 - p.w()[(d, h)];
            }
        }
        out += if yd > 0.5 { (1.0 - off).ln() } else { off.ln() };
    }
    out
}

/// `log p(s, y)` for binary sparse coding.
pub fn bsc_log_joint(p: &BscParams, s: &[bool], y: &[f64]) -> f64 {
    let d = y.len();
    let sv = DVector::from_iterator(s.len(), s.iter().map(|&b| ind(b)));
    let r = DVector::from_column_slice(y) - p.w() * &sv;
    let k = s.iter().filter(|&&b| b).count() as f64;
    k * p.pi().ln() + (s.len() as f64 - k) * (1.0 - p.pi()).ln()
        - 0.5 * d as f64 * (2.0 * PI * p.sigma2()).ln()
        - r.norm_squared() / (2.0 * p.sigma2())
}

/// Active columns, slab mean and slab covariance restricted to `s`.
fn sssc_active(p: &SsscParams, s: &[bool]) -> (Vec<usize>, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let a: Vec<usize> = (0..s.len()).filter(|&i| s[i]).collect();
    let d = p.w().nrows();
    let w = DMatrix::from_fn(d, a.len(), |r, c| p.w()[(r, a[c])]);
    let mu = DVector::from_iterator(a.len(), a.iter().map(|&i| p.mu()[i]));
    let psi = DMatrix::from_fn(a.len(), a.len(), |r, c| p.psi()[(a[r], a[c])]);
    (a, w, mu, psi)
}

/// `log p(s, y)` for spike-and-slab sparse coding with `z` integrated out:
/// `y | s ~ N(W_s μ_s, σ² I + W_s Ψ_s W_sᵀ)`.
pub fn sssc_log_joint(p: &SsscParams, s: &[bool], y: &[f64]) -> f64 {
    let d = y.len();
    let (_, w, mu, psi) = sssc_active(p, s);
    let c = DMatrix::identity(d, d) * p.sigma2() + &w * &psi * w.transpose();
    let r = DVector::from_column_slice(y) - &w * &mu;
    let chol = c.cholesky().expect("covariance is positive definite");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(&r));
    let mut prior = 0.0;
    for (h, &on) in s.iter().enumerate() {
        prior += if on { p.pi()[h].ln() } else { (1.0 - p.pi()[h]).ln() };
    }
    prior - 0.5 * (d as f64 * (2.0 * PI).ln() + log_det + quad)
}

/// Posterior mean and covariance of the active slabs by Gaussian
/// conditioning: `E[z|y] = μ + Ψ Wᵀ C⁻¹ (y - W μ)`,
/// `Cov = Ψ - Ψ Wᵀ C⁻¹ W Ψ`.
pub fn sssc_slab_posterior(p: &SsscParams, s: &[bool], y: &[f64]) -> (Vec<usize>, DVector<f64>, DMatrix<f64>) {
    let d = y.len();
    let (a, w, mu, psi) = sssc_active(p, s);
    let c = DMatrix::identity(d, d) * p.sigma2() + &w * &psi * w.transpose();
    let cinv = c.try_inverse().expect("invertible covariance");
    let gain = &psi * w.transpose() * &cinv;
    let mean = &mu + &gain * (DVector::from_column_slice(y) - &w * &mu);
    let cov = &psi - &gain * &w * &psi;
    (a, mean, cov)
}

/// Exact posterior over all `2^H` states of one datapoint.
pub fn posterior(log_joint: impl Fn(&[bool]) -> f64, h: usize) -> (Vec<Vec<bool>>, Vec<f64>, f64) {
    let states: Vec<Vec<bool>> = (0..1usize << h).map(|i| bits(i, h)).collect();
    let lj: Vec<f64> = states.iter().map(|s| log_joint(s)).collect();
    let z = lse(&lj);
    let q = lj.iter().map(|v| (v - z).exp()).collect();
    (states, q, z)
}

/// Entropy form of the free energy for one datapoint with `q ∝ p(s, y)` on
/// `states`: `Σ q log p(s, y) - Σ q log q`.
pub fn entropy_free_energy(log_joints: &[f64]) -> f64 {
    let z = lse(log_joints);
    let mut energy = 0.0;
    let mut entropy = 0.0;
    for &lj in log_joints {
        let q = (lj - z).exp();
        if q > 0.0 {
            energy += q * lj;
            entropy -= q * q.ln();
        }
    }
    energy + entropy
}

/// Exact BSC expectations: per datapoint `<s>` and `<s sᵀ>`, plus `log p(y)`.
pub struct BscExact {
    pub mean_s: Vec<DVector<f64>>,
    pub second_s: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

pub fn bsc_exact(p: &BscParams, data: &[Vec<f64>]) -> BscExact {
    let h = p.w().ncols();
    let mut out = BscExact {
        mean_s: Vec::new(),
        second_s: Vec::new(),
        log_likelihood: 0.0,
    };
    for y in data {
        let (states, q, z) = posterior(|s| bsc_log_joint(p, s, y), h);
        let mut m = DVector::zeros(h);
        let mut ss = DMatrix::zeros(h, h);
        for (s, &qs) in states.iter().zip(&q) {
            let sv = DVector::from_iterator(h, s.iter().map(|&b| ind(b)));
            m += &sv * qs;
            ss += &sv * sv.transpose() * qs;
        }
        out.mean_s.push(m);
        out.second_s.push(ss);
        out.log_likelihood += z;
    }
    out
}

/// BSC M-step from exact expectations: least-squares `W`, `σ²` as the mean
/// expected squared residual under the new `W` (by enumeration), `π` the
/// mean activation.
pub fn bsc_m_step(p: &BscParams, data: &[Vec<f64>]) -> (f64, f64, DMatrix<f64>) {
    let (d, h) = p.w().shape();
    let n = data.len();
    let ex = bsc_exact(p, data);
    let mut cross = DMatrix::zeros(d, h);
    let mut gram = DMatrix::zeros(h, h);
    let mut act = 0.0;
    for (i, y) in data.iter().enumerate() {
        cross += DVector::from_column_slice(y) * ex.mean_s[i].transpose();
        gram += &ex.second_s[i];
        act += ex.mean_s[i].sum();
    }
    let w = ridge_solve(&cross, &gram);
    let mut resid = 0.0;
    for y in data {
        let (states, q, _) = posterior(|s| bsc_log_joint(p, s, y), h);
        for (s, &qs) in states.iter().zip(&q) {
            let sv = DVector::from_iterator(h, s.iter().map(|&b| ind(b)));
            resid += qs * (DVector::from_column_slice(y) - &w * sv).norm_squared();
        }
    }
    (act / (n * h) as f64, resid / (n * d) as f64, w)
}

/// Exact SSSC expectations per datapoint.
pub struct SsscExact {
    pub mean_s: Vec<DVector<f64>>,
    pub second_s: Vec<DMatrix<f64>>,
    pub mean_sz: Vec<DVector<f64>>,
    pub second_sz: Vec<DMatrix<f64>>,
    /// `<z>` and `<z zᵀ>` over the full slab vector.
    pub mean_z: Vec<DVector<f64>>,
    pub second_z: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// Posterior of all `H` slabs given `s` and `y`: precision
/// `Ψ⁻¹ + σ⁻² D_s Wᵀ W D_s`, mean `P⁻¹ (Ψ⁻¹ μ + σ⁻² D_s Wᵀ y)`.
pub fn sssc_full_slab_posterior(p: &SsscParams, s: &[bool], y: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let h = s.len();
    let ds = DMatrix::from_diagonal(&DVector::from_iterator(h, s.iter().map(|&b| ind(b))));
    let wd = p.w() * &ds;
    let psi_inv = p.psi().clone().try_inverse().expect("invertible Psi");
    let precision = &psi_inv + wd.transpose() * &wd / p.sigma2();
    let cov = precision.try_inverse().expect("invertible precision");
    let rhs = &psi_inv * DVector::from_column_slice(p.mu()) + wd.transpose() * DVector::from_column_slice(y) / p.sigma2();
    (&cov * rhs, cov)
}

pub fn sssc_exact(p: &SsscParams, data: &[Vec<f64>]) -> SsscExact {
    let h = p.w().ncols();
    let mut out = SsscExact {
        mean_s: Vec::new(),
        second_s: Vec::new(),
        mean_sz: Vec::new(),
        second_sz: Vec::new(),
        mean_z: Vec::new(),
        second_z: Vec::new(),
        log_likelihood: 0.0,
    };
    for y in data {
        let (states, q, z) = posterior(|s| sssc_log_joint(p, s, y), h);
        let mut m = DVector::zeros(h);
        let mut ss = DMatrix::zeros(h, h);
        let mut msz = DVector::zeros(h);
        let mut szsz = DMatrix::zeros(h, h);
        let mut mz = DVector::zeros(h);
        let mut zz = DMatrix::zeros(h, h);
        for (s, &qs) in states.iter().zip(&q) {
            let (fm, fc) = sssc_full_slab_posterior(p, s, y);
            zz += (&fc + &fm * fm.transpose()) * qs;
            mz += fm * qs;
            let sv = DVector::from_iterator(h, s.iter().map(|&b| ind(b)));
            m += &sv * qs;
            ss += &sv * sv.transpose() * qs;
            let (a, mean, cov) = sssc_slab_posterior(p, s, y);
            let second = &cov + &mean * mean.transpose();
            for (r, &i) in a.iter().enumerate() {
                msz[i] += qs * mean[r];
                for (c, &j) in a.iter().enumerate() {
                    szsz[(i, j)] += qs * second[(r, c)];
                }
            }
        }
        out.mean_s.push(m);
        out.second_s.push(ss);
        out.mean_sz.push(msz);
        out.second_sz.push(szsz);
        out.mean_z.push(mz);
        out.second_z.push(zz);
        out.log_likelihood += z;
    }
    out
}

/// SSSC parameters after one M-step from exact expectations.
pub struct SsscUpdate {
    pub pi: Vec<f64>,
    pub w: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub psi: DMatrix<f64>,
    /// Maximum-likelihood slab mean and covariance from the full-slab moments.
    pub mu_full: Vec<f64>,
    pub psi_full: DMatrix<f64>,
    /// `σ²` with `Σ <sz><sz>ᵀ` in the trace term.
    pub sigma2_outer: f64,
    /// `σ²` as the mean expected squared residual.
    pub sigma2_second: f64,
}

pub fn sssc_m_step(p: &SsscParams, data: &[Vec<f64>]) -> SsscUpdate {
    let (d, h) = p.w().shape();
    let n = data.len();
    let ex = sssc_exact(p, data);
    let mut cross = DMatrix::zeros(d, h);
    let mut szsz = DMatrix::zeros(h, h);
    let mut ss = DMatrix::zeros(h, h);
    let mut s_sum = DVector::zeros(h);
    let mut sz_sum = DVector::zeros(h);
    for (i, y) in data.iter().enumerate() {
        cross += DVector::from_column_slice(y) * ex.mean_sz[i].transpose();
        szsz += &ex.second_sz[i];
        ss += &ex.second_s[i];
        s_sum += &ex.mean_s[i];
        sz_sum += &ex.mean_sz[i];
    }
    let w = ridge_solve(&cross, &szsz);
    let mu: Vec<f64> = (0..h).map(|i| sz_sum[i] / s_sum[i]).collect();
    let psi = DMatrix::from_fn(h, h, |i, j| (szsz[(i, j)] - ss[(i, j)] * mu[i] * mu[j]) / ss[(i, j)]);
    let mut outer = 0.0;
    let mut second = 0.0;
    for (i, y) in data.iter().enumerate() {
        let yv = DVector::from_column_slice(y);
        outer += yv.norm_squared() - (&w * &ex.mean_sz[i]).norm_squared();
        second += yv.norm_squared() - 2.0 * yv.dot(&(&w * &ex.mean_sz[i]))
            + (w.transpose() * &w).component_mul(&ex.second_sz[i]).sum();
    }
    let mz: DVector<f64> = ex.mean_z.iter().fold(DVector::zeros(h), |a, b| a + b) / n as f64;
    let zz: DMatrix<f64> = ex.second_z.iter().fold(DMatrix::zeros(h, h), |a, b| a + b) / n as f64;
    SsscUpdate {
        pi: (0..h).map(|i| s_sum[i] / n as f64).collect(),
        w,
        mu,
        psi,
        mu_full: mz.iter().copied().collect(),
        psi_full: zz - &mz * mz.transpose(),
        sigma2_outer: outer / (n * d) as f64,
        sigma2_second: second / (n * d) as f64,
    }
}

/// `X A⁻¹` with the M-step's ridge of `1e-9 · tr(A) / H` on the diagonal.
pub fn ridge_solve(x: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let h = a.nrows();
    let a = a + DMatrix::identity(h, h) * (1e-9 * a.trace() / h as f64);
    x * a.try_inverse().expect("invertible second moment")
}

pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    a.clone().cholesky().is_some()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
}
