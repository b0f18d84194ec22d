use std::cell::RefCell;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;

use super::{
    check_dim, clamp_prior, dot, expected_residual, solve_dictionary, GenerativeModel, MStepOptions,
    ModelKind, ModelParams, Projection, SigmaUpdate, SlabUpdate, SupportMoment, SIGMA2_FLOOR,
};
use crate::data::{DataRow, DataSet};
use crate::error::{Error, Result};
use crate::linalg::{backward_solve, cholesky_in_place, cholesky_log_det, forward_solve};
use crate::rng::StreamRng;
use crate::state::{ActiveList, BinaryState};


#[derive(Default)]
struct Scratch {
    resid: Vec<f64>,
    g: Vec<f64>,
    l: Vec<f64>,
    m: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

/// Magnitude of `μ` or `diag Ψ` that triggers the switch to frozen slabs.
pub const BLOW_UP: f64 = 1e6;

/// Spike-and-slab sparse coding: `s_h ~ Bernoulli(π_h)`, `z ~ N(μ, Ψ)`,
/// `y ~ N(W (s ⊙ z), σ² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsscParams {
    pi: Vec<f64>,
    sigma2: f64,
    w: DMatrix<f64>,
    mu: Vec<f64>,
    psi: DMatrix<f64>,
    mu_psi_frozen: bool,
    log_odds: Vec<f64>,
    // Wᵀ W, used for fully observed datapoints
    gram: DMatrix<f64>,
    log_sigma2: f64,
    psi_is_identity: bool,
}

/// Posterior quantities of the slab given a binary state, restricted to the
/// active units `A = {h : s_h = 1}`.
#[derive(Clone, Debug)]
pub struct ActiveInference {
    pub active: ActiveList,
    /// `κ_s` on the active units.
    pub kappa: SmallVec<[f64; 16]>,
    /// `Λ_s` (row-major, `|A| × |A|`); empty unless requested.
    pub lambda: Vec<f64>,
    /// `log |C_s|` over observed coordinates.
    pub log_det_c: f64,
    /// `(y - W̃_s μ)ᵀ C_s⁻¹ (y - W̃_s μ)` over observed coordinates.
    pub quad: f64,
}

impl ActiveInference {
    /// `κ_s` embedded into `H` dimensions.
    pub fn kappa_full(&self, h: usize) -> Vec<f64> {
        let mut out = vec![0.0; h];
        for (&i, &v) in self.active.iter().zip(&self.kappa) {
            out[i] = v;
        }
        out
    }
}

impl SsscParams {
    pub fn new(
        pi: Vec<f64>,
        sigma2: f64,
        w: DMatrix<f64>,
        mu: Vec<f64>,
        psi: DMatrix<f64>,
        mu_psi_frozen: bool,
    ) -> Result<Self> {
        let h = pi.len();
        if w.ncols() != h || mu.len() != h || psi.shape() != (h, h) {
            return Err(Error::Dimension(format!(
                "SSSC parameters disagree on H: pi {h}, W {}x{}, mu {}, Psi {}x{}",
                w.nrows(),
                w.ncols(),
                mu.len(),
                psi.nrows(),
                psi.ncols()
            )));
        }
        if let Some(p) = pi.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidParam(format!("SSSC prior {p} outside (0,1)")));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParam(format!("SSSC variance {sigma2} not positive")));
        }
        if w.iter().chain(mu.iter()).chain(psi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("SSSC parameters contain non-finite values".into()));
        }
        for i in 0..h {
            for j in 0..i {
                if psi[(i, j)] != psi[(j, i)] {
                    return Err(Error::InvalidParam("Psi is not symmetric".into()));
                }
            }
        }
        let psi_is_identity = psi == DMatrix::identity(h, h);
        if mu_psi_frozen && (!psi_is_identity || mu.iter().any(|&m| m != 1.0)) {
            return Err(Error::InvalidParam("frozen SSSC requires mu = 1 and Psi = I".into()));
        }
        if !psi_is_identity && psi.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("Psi".into()));
        }
        let log_odds = pi.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let gram = w.transpose() * &w;
        Ok(SsscParams {
            pi,
            sigma2,
            w,
            mu,
            psi,
            mu_psi_frozen,
            log_odds,
            gram,
            log_sigma2: sigma2.ln(),
            psi_is_identity,
        })
    }

    /// Parameters with `μ = 1` and `Ψ = I`, left untouched by M-steps.
    pub fn frozen(pi: Vec<f64>, sigma2: f64, w: DMatrix<f64>) -> Result<Self> {
        let h = pi.len();
        Self::new(pi, sigma2, w, vec![1.0; h], DMatrix::identity(h, h), true)
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn mu_psi_frozen(&self) -> bool {
        self.mu_psi_frozen
    }

    /// Switch to `μ = 1`, `Ψ = I` and keep them fixed from now on.
    pub fn into_frozen(self) -> Result<Self> {
        Self::frozen(self.pi, self.sigma2, self.w)
    }

    /// Slab posterior for `state` using the matrix inversion and determinant
    /// lemmas on the active subspace, so no `D × D` matrix is formed.
    ///
    /// With `Ψ_A = L Lᵀ` and `M = I + σ⁻² Lᵀ G_A L` (`G_A = W̃ᵀ W̃` over observed
    /// rows): `log|C| = D_obs log σ² + log|M|`, `Λ = L M⁻¹ Lᵀ` and
    /// `κ = μ_A + σ⁻² Λ W̃ᵀ r` with `r = y - W̃ μ`.
    #[inline]
    fn w_col(&self, h: usize) -> &[f64] {
        let d = self.w.nrows();
        &self.w.as_slice()[h * d..(h + 1) * d]
    }

    /// Factorise the slab posterior of `active` into `scratch`: `l` holds
    /// chol(Ψ_A) (unless Ψ = I), `m` holds chol(I + σ⁻² Lᵀ G_A L) and `x`
    /// holds `M⁻¹ Lᵀ W̃ᵀ r`. Returns `(log |C_s|, quad)`.
    fn factor(
        &self,
        active: &[usize],
        row: DataRow<'_>,
        proj: Option<&Projection>,
        s: &mut Scratch,
    ) -> Result<(f64, f64)> {
        let d = self.w.nrows();
        let k = active.len();
        let inv_s2 = 1.0 / self.sigma2;

        let (rr, base_log_det) = match row.mask {
            None => {
                // b = W̃ᵀ y - G_A μ_A, |r|² = |y|² - 2 μ_Aᵀ W̃ᵀ y + μ_Aᵀ G_A μ_A
                s.x.clear();
                let (mut cross, mut quad) = (0.0, 0.0);
                for &i in active {
                    let c = proj.map_or_else(|| dot(self.w_col(i), row.y), |p| p.wty[i]);
                    let gmu: f64 = active.iter().map(|&j| self.gram[(i, j)] * self.mu[j]).sum();
                    cross += self.mu[i] * c;
                    quad += self.mu[i] * gmu;
                    s.x.push(c - gmu);
                }
                let yy = proj.map_or_else(|| dot(row.y, row.y), |p| p.yy);
                ((yy - 2.0 * cross + quad).max(0.0), d as f64 * self.log_sigma2)
            }
            Some(mask) => {
                // residual r = y - W̃ μ over observed rows
                s.resid.clear();
                s.resid.extend_from_slice(row.y);
                for &h in active {
                    let m = self.mu[h];
                    for (r, v) in s.resid.iter_mut().zip(self.w_col(h)) {
                        *r -= v * m;
                    }
                }
                for (r, &o) in s.resid.iter_mut().zip(mask) {
                    if !o {
                        *r = 0.0;
                    }
                }
                // b = W̃ᵀ r
                s.x.clear();
                for &h in active {
                    s.x.push(dot(self.w_col(h), &s.resid));
                }
                (dot(&s.resid, &s.resid), row.observed_count() as f64 * self.log_sigma2)
            }
        };
        if k == 0 {
            return Ok((base_log_det, rr * inv_s2));
        }

        // G_A
        s.g.clear();
        s.g.resize(k * k, 0.0);
        match row.mask {
            None => {
                for (a, &i) in active.iter().enumerate() {
                    for (c, &j) in active.iter().enumerate() {
                        s.g[a * k + c] = self.gram[(i, j)];
                    }
                }
            }
            Some(mask) => {
                for a in 0..k {
                    let ca = self.w_col(active[a]);
                    for c in a..k {
                        let cc = self.w_col(active[c]);
                        let mut v = 0.0;
                        for dd in 0..d {
                            if mask[dd] {
                                v += ca[dd] * cc[dd];
                            }
                        }
                        s.g[a * k + c] = v;
                        s.g[c * k + a] = v;
                    }
                }
            }
        }

        // M = I + σ⁻² Lᵀ G L, L: Cholesky factor of Ψ_A
        s.m.clear();
        s.m.resize(k * k, 0.0);
        if self.psi_is_identity {
            for (mv, gv) in s.m.iter_mut().zip(&s.g) {
                *mv = gv * inv_s2;
            }
        } else {
            s.l.clear();
            s.l.resize(k * k, 0.0);
            for (a, &i) in active.iter().enumerate() {
                for (c, &j) in active.iter().enumerate() {
                    s.l[a * k + c] = self.psi[(i, j)];
                }
            }
            cholesky_in_place(&mut s.l, k).map_err(|e| e.context("Psi restricted to the active units"))?;
            // z = G L
            s.z.clear();
            s.z.resize(k * k, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let mut v = 0.0;
                    for p in j..k {
                        v += s.g[i * k + p] * s.l[p * k + j];
                    }
                    s.z[i * k + j] = v;
                }
            }
            for i in 0..k {
                for j in 0..k {
                    let mut v = 0.0;
                    for p in i..k {
                        v += s.l[p * k + i] * s.z[p * k + j];
                    }
                    s.m[i * k + j] = v * inv_s2;
                }
            }
            // v = Lᵀ b
            for i in 0..k {
                s.x[i] = (i..k).map(|p| s.l[p * k + i] * s.x[p]).sum();
            }
        }
        for i in 0..k {
            s.m[i * k + i] += 1.0;
        }
        cholesky_in_place(&mut s.m, k).map_err(|e| e.context("C_s"))?;
        let log_det_c = base_log_det + cholesky_log_det(&s.m, k);

        // x = M⁻¹ v
        s.z.clear();
        s.z.extend_from_slice(&s.x);
        forward_solve(&s.m, k, &mut s.x);
        backward_solve(&s.m, k, &mut s.x);
        let vx: f64 = s.z.iter().zip(&s.x).map(|(a, b)| a * b).sum();
        let quad = rr * inv_s2 - vx * inv_s2 * inv_s2;
        Ok((log_det_c, quad))
    }

    /// `log |C_s|` and the Mahalanobis term; cheaper than
    /// [`Self::active_inference`].
    fn log_det_and_quad(
        &self,
        state: &BinaryState,
        row: DataRow<'_>,
        proj: Option<&Projection>,
    ) -> Result<(f64, f64, ActiveList)> {
        check_dim(row, state, self.observed_dim(), self.latent_dim())?;
        let active = state.active_list();
        let out = SCRATCH.with(|s| self.factor(&active, row, proj, &mut s.borrow_mut()))?;
        Ok((out.0, out.1, active))
    }

    pub fn active_inference(
        &self,
        state: &BinaryState,
        row: DataRow<'_>,
        with_lambda: bool,
    ) -> Result<ActiveInference> {
        self.active_inference_with(state, row, with_lambda, None)
    }

    fn active_inference_with(
        &self,
        state: &BinaryState,
        row: DataRow<'_>,
        with_lambda: bool,
        proj: Option<&Projection>,
    ) -> Result<ActiveInference> {
        check_dim(row, state, self.observed_dim(), self.latent_dim())?;
        let active = state.active_list();
        let k = active.len();
        let inv_s2 = 1.0 / self.sigma2;
        SCRATCH.with(|cell| {
            let s = &mut *cell.borrow_mut();
            let (log_det_c, quad) = self.factor(&active, row, proj, s)?;
            let identity = self.psi_is_identity;

            // κ = μ_A + σ⁻² L x
            let kappa = (0..k)
                .map(|i| {
                    let lx = if identity {
                        s.x[i]
                    } else {
                        (0..=i).map(|p| s.l[i * k + p] * s.x[p]).sum()
                    };
                    self.mu[active[i]] + inv_s2 * lx
                })
                .collect();

            let lambda = if with_lambda && k > 0 {
                // Λ = L M⁻¹ Lᵀ = (R⁻¹ Lᵀ)ᵀ (R⁻¹ Lᵀ) with M = R Rᵀ;
                // column j of R⁻¹ Lᵀ is stored as row j of z
                s.z.clear();
                s.z.resize(k * k, 0.0);
                for j in 0..k {
                    let col = &mut s.z[j * k..(j + 1) * k];
                    for (i, c) in col.iter_mut().enumerate() {
                        *c = if identity {
                            if i == j {
                                1.0
                            } else {
                                0.0
                            }
                        } else if i <= j {
                            s.l[j * k + i]
                        } else {
                            0.0
                        };
                    }
                    forward_solve(&s.m, k, col);
                }
                let mut lam = vec![0.0; k * k];
                for i in 0..k {
                    for j in i..k {
                        let v: f64 = (0..k).map(|p| s.z[i * k + p] * s.z[j * k + p]).sum();
                        lam[i * k + j] = v;
                        lam[j * k + i] = v;
                    }
                }
                lam
            } else {
                Vec::new()
            };
            Ok(ActiveInference {
                active,
                kappa,
                lambda,
                log_det_c,
                quad,
            })
        })
    }

    /// With `T = Ψ_{:,A} Ψ_AA⁻¹` the inactive slabs follow the conditional
    /// prior, so `<z - μ> = T m` and `<(z - μ)(z - μ)ᵀ> = Ψ + T (Λ + m mᵀ - Ψ_AA) Tᵀ`
    /// with `m = κ - μ_A`. Both are `Ψ (·)` or `Ψ (·) Ψ` of terms living on
    /// `A`; only those inner terms are accumulated here.
    fn add_slab_moments(
        &self,
        inf: &ActiveInference,
        wt: f64,
        dev: &mut DVector<f64>,
        dev2: &mut DMatrix<f64>,
    ) -> Result<()> {
        let k = inf.active.len();
        if k == 0 {
            return Ok(());
        }
        let a = &inf.active;
        let mut m = DVector::from_fn(k, |i, _| inf.kappa[i] - self.mu[a[i]]);
        let mut core = DMatrix::from_fn(k, k, |i, j| {
            inf.lambda[i * k + j] + m[i] * m[j] - self.psi[(a[i], a[j])]
        });
        if !self.psi_is_identity {
            let chol = DMatrix::from_fn(k, k, |i, j| self.psi[(a[i], a[j])])
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("active block of Psi".into()))?;
            chol.solve_mut(&mut m);
            chol.solve_mut(&mut core);
            core.transpose_mut();
            chol.solve_mut(&mut core);
        }
        for i in 0..k {
            dev[a[i]] += wt * m[i];
            for j in 0..k {
                dev2[(a[i], a[j])] += wt * core[(i, j)];
            }
        }
        Ok(())
    }

    fn repair_psi(&self, mut psi: DMatrix<f64>) -> DMatrix<f64> {
        let h = psi.nrows();
        for i in 0..h {
            for j in 0..i {
                let v = 0.5 * (psi[(i, j)] + psi[(j, i)]);
                psi[(i, j)] = v;
                psi[(j, i)] = v;
            }
        }
        if psi.clone().cholesky().is_some() {
            return psi;
        }
        let scale = (psi.trace() / h as f64).abs().max(1e-12);
        let floor = 1e-6 * scale;
        let eig = SymmetricEigen::new(psi);
        let vals = eig.eigenvalues.map(|v| v.max(floor));
        let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        for i in 0..h {
            for j in 0..i {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

/// Streaming expectations for the SSSC M-step.
#[derive(Clone, Debug)]
pub struct SsscStats {
    n: usize,
    sum_s: Vec<f64>,
    sum_sz: Vec<f64>,
    // Σ <s sᵀ> over all datapoints
    ss: DMatrix<f64>,
    // Σ <sz szᵀ> over all datapoints
    szsz: DMatrix<f64>,
    // Σ <sz szᵀ> split into fully observed part and per-coordinate masked part
    gram: DMatrix<f64>,
    gram_rows: Option<Vec<DMatrix<f64>>>,
    // Σ <sz><sz>ᵀ, same split
    outer: DMatrix<f64>,
    outer_rows: Option<Vec<DMatrix<f64>>>,
    cross: DMatrix<f64>,
    yy: Vec<f64>,
    observed: usize,
    // Ψ⁻¹ Σ <z - μ> and Ψ⁻¹ (Σ <(z - μ)(z - μ)ᵀ> - N Ψ) Ψ⁻¹ over the full
    // slab vector
    slab: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl GenerativeModel for SsscParams {
    type Stats = SsscStats;

    fn kind(&self) -> ModelKind {
        ModelKind::Sssc
    }

    fn latent_dim(&self) -> usize {
        self.pi.len()
    }

    fn observed_dim(&self) -> usize {
        self.w.nrows()
    }

    fn log_constant(&self, observed: usize) -> f64 {
        self.pi.iter().map(|p| (-p).ln_1p()).sum::<f64>() - 0.5 * observed as f64 * (2.0 * PI).ln()
    }

    fn log_pseudo_joint(&self, state: &BinaryState, row: DataRow<'_>) -> Result<f64> {
        let (log_det_c, quad, active) = self.log_det_and_quad(state, row, None)?;
        let prior: f64 = active.iter().map(|&h| self.log_odds[h]).sum();
        Ok(prior - 0.5 * log_det_c - 0.5 * quad)
    }

    fn log_pseudo_joints(&self, states: &[BinaryState], row: DataRow<'_>) -> Result<Vec<f64>> {
        let proj = (row.mask.is_none() && states.len() > 1 && row.y.len() == self.observed_dim())
            .then(|| Projection::new(&self.w, row.y));
        states
            .iter()
            .map(|state| {
                let (log_det_c, quad, active) = self.log_det_and_quad(state, row, proj.as_ref())?;
                let prior: f64 = active.iter().map(|&h| self.log_odds[h]).sum();
                Ok(prior - 0.5 * log_det_c - 0.5 * quad)
            })
            .collect()
    }

    fn sparsity(&self) -> f64 {
        self.pi.iter().sum()
    }

    fn new_stats(&self, data: &DataSet, opts: &MStepOptions) -> SsscStats {
        let (d, h) = self.w.shape();
        let rows = data.has_missing().then(|| vec![DMatrix::zeros(h, h); d]);
        SsscStats {
            n: 0,
            sum_s: vec![0.0; h],
            sum_sz: vec![0.0; h],
            ss: DMatrix::zeros(h, h),
            szsz: DMatrix::zeros(h, h),
            gram: DMatrix::zeros(h, h),
            gram_rows: rows.clone(),
            outer: DMatrix::zeros(h, h),
            outer_rows: rows,
            cross: DMatrix::zeros(d, h),
            yy: vec![0.0; d],
            observed: 0,
            slab: (opts.slab_update == SlabUpdate::Exact && !self.mu_psi_frozen)
                .then(|| (DVector::zeros(h), DMatrix::zeros(h, h))),
        }
    }

    fn accumulate(
        &self,
        stats: &mut SsscStats,
        row: DataRow<'_>,
        states: &[BinaryState],
        weights: &[f64],
    ) -> Result<()> {
        let h = self.latent_dim();
        stats.n += 1;
        let mut ss = SupportMoment::new(states, h);
        let pos = ss.positions(h);
        let u = ss.support.len();
        let mut szsz = vec![0.0; u * u];
        let mut mean_sz = vec![0.0; h];
        let proj = (row.mask.is_none() && states.len() > 1 && row.y.len() == self.observed_dim())
            .then(|| Projection::new(&self.w, row.y));
        for (state, &wt) in states.iter().zip(weights) {
            if wt == 0.0 {
                continue;
            }
            let inf = self.active_inference_with(state, row, true, proj.as_ref())?;
            if let Some((dev, dev2)) = stats.slab.as_mut() {
                self.add_slab_moments(&inf, wt, dev, dev2)?;
            }
            let k = inf.active.len();
            for a in 0..k {
                let i = inf.active[a];
                stats.sum_s[i] += wt;
                mean_sz[i] += wt * inf.kappa[a];
                for c in 0..k {
                    let j = inf.active[c];
                    let idx = pos[i] * u + pos[j];
                    ss.moment[idx] += wt;
                    szsz[idx] += wt * (inf.lambda[a * k + c] + inf.kappa[a] * inf.kappa[c]);
                }
            }
        }
        ss.add_into(&mut stats.ss);
        let sz_moment = SupportMoment {
            support: ss.support.clone(),
            moment: szsz,
        };
        sz_moment.add_into(&mut stats.szsz);
        let mut outer = vec![0.0; u * u];
        for (a, &i) in ss.support.iter().enumerate() {
            stats.sum_sz[i] += mean_sz[i];
            for (c, &j) in ss.support.iter().enumerate() {
                outer[a * u + c] = mean_sz[i] * mean_sz[j];
            }
        }
        let outer_moment = SupportMoment {
            support: ss.support.clone(),
            moment: outer,
        };
        match (row.mask, stats.gram_rows.as_mut(), stats.outer_rows.as_mut()) {
            (Some(_), Some(grows), Some(orows)) => {
                for dd in row.observed() {
                    sz_moment.add_into(&mut grows[dd]);
                    outer_moment.add_into(&mut orows[dd]);
                }
            }
            _ => {
                sz_moment.add_into(&mut stats.gram);
                outer_moment.add_into(&mut stats.outer);
            }
        }
        for dd in row.observed() {
            let y = row.y[dd];
            stats.yy[dd] += y * y;
            stats.observed += 1;
            for &i in &ss.support {
                stats.cross[(dd, i)] += y * mean_sz[i];
            }
        }
        Ok(())
    }

    fn merge_stats(&self, into: &mut SsscStats, other: SsscStats) {
        into.n += other.n;
        for (a, b) in into.sum_s.iter_mut().zip(&other.sum_s) {
            *a += b;
        }
        for (a, b) in into.sum_sz.iter_mut().zip(&other.sum_sz) {
            *a += b;
        }
        into.ss += &other.ss;
        into.szsz += &other.szsz;
        into.gram += &other.gram;
        into.outer += &other.outer;
        if let (Some(a), Some(b)) = (into.gram_rows.as_mut(), other.gram_rows) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        if let (Some(a), Some(b)) = (into.outer_rows.as_mut(), other.outer_rows) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        into.cross += &other.cross;
        for (a, b) in into.yy.iter_mut().zip(&other.yy) {
            *a += b;
        }
        into.observed += other.observed;
        if let (Some((a, b)), Some((c, d))) = (into.slab.as_mut(), other.slab) {
            *a += c;
            *b += d;
        }
    }

    fn stabilize(self) -> Result<(Self, Option<String>)> {
        if self.mu_psi_frozen {
            return Ok((self, None));
        }
        let h = self.latent_dim();
        let mu_max = self.mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let psi_max = (0..h).fold(0.0f64, |m, i| m.max(self.psi[(i, i)]));
        if mu_max > BLOW_UP || psi_max > BLOW_UP || !mu_max.is_finite() || !psi_max.is_finite() {
            let msg = format!("slab parameters diverging (max |mu| {mu_max:.3e}, max Psi_hh {psi_max:.3e}); freezing mu = 1, Psi = I");
            return Ok((self.into_frozen()?, Some(msg)));
        }
        Ok((self, None))
    }

    fn m_step(&self, stats: SsscStats, opts: &MStepOptions) -> Result<Self> {
        if stats.n == 0 || stats.observed == 0 {
            return Err(Error::InvalidParam("M-step on empty statistics".into()));
        }
        let h = self.latent_dim();
        let n = stats.n as f64;
        let w = solve_dictionary(&stats.cross, &stats.gram, stats.gram_rows.as_deref(), &self.w)?;
        let pi: Vec<f64> = stats.sum_s.iter().map(|s| clamp_prior(s / n, opts.pi_floor)).collect();

        let (mu, psi) = if self.mu_psi_frozen {
            (self.mu.clone(), self.psi.clone())
        } else if let Some((dev, dev2)) = &stats.slab {
            let mean = &self.psi * dev / n;
            let dev2 = &self.psi * dev2 * &self.psi;
            let mu = (0..h).map(|i| self.mu[i] + mean[i]).collect();
            let psi = &self.psi + dev2 / n - &mean * mean.transpose();
            (mu, self.repair_psi(psi))
        } else {
            let mu: Vec<f64> = (0..h)
                .map(|i| {
                    if stats.sum_s[i] > 0.0 {
                        stats.sum_sz[i] / stats.sum_s[i]
                    } else {
                        self.mu[i]
                    }
                })
                .collect();
            let mut psi = DMatrix::zeros(h, h);
            for i in 0..h {
                for j in 0..h {
                    let ss = stats.ss[(i, j)];
                    psi[(i, j)] = if ss > 0.0 {
                        (stats.szsz[(i, j)] - ss * mu[i] * mu[j]) / ss
                    } else if i == j {
                        self.psi[(i, i)]
                    } else {
                        0.0
                    };
                }
            }
            (mu, self.repair_psi(psi))
        };

        let resid = match opts.sigma_update {
            SigmaUpdate::SecondMoment => {
                expected_residual(&w, &stats.yy, &stats.cross, &stats.gram, stats.gram_rows.as_deref())
            }
            SigmaUpdate::OuterOfMeans => {
                let wo = &w * &stats.outer;
                let mut total = 0.0;
                for dd in 0..w.nrows() {
                    let wd = w.row(dd);
                    let mut quad = wo.row(dd).dot(&wd);
                    if let Some(rows) = &stats.outer_rows {
                        quad += (wd * &rows[dd]).dot(&wd);
                    }
                    total += stats.yy[dd] - quad;
                }
                total
            }
        };
        let sigma2 = (resid / stats.observed as f64).max(SIGMA2_FLOOR);
        SsscParams::new(pi, sigma2, w, mu, psi, self.mu_psi_frozen)
    }

    fn sample(&self, n: usize, rng: &mut StreamRng) -> (DataSet, Vec<BinaryState>) {
        let (d, h) = self.w.shape();
        let chol = self.psi.clone().cholesky().expect("Psi validated positive definite");
        let l = chol.l();
        let sigma = self.sigma2.sqrt();
        let mut values = Vec::with_capacity(n * d);
        let mut latents = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = BinaryState::zeros(h);
            for (hh, &p) in self.pi.iter().enumerate() {
                if rng.random::<f64>() < p {
                    s.set(hh, true);
                }
            }
            let eps = DVector::from_fn(h, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = DVector::from_column_slice(&self.mu) + &l * eps;
            let mut mean = vec![0.0; d];
            for hh in s.active() {
                for (m, v) in mean.iter_mut().zip(self.w.column(hh).iter()) {
                    *m += v * z[hh];
                }
            }
            for m in mean {
                let e: f64 = rng.sample(StandardNormal);
                values.push(m + sigma * e);
            }
            latents.push(s);
        }
        (DataSet::new(n, d, values).expect("consistent buffer"), latents)
    }

    fn to_params(&self) -> ModelParams {
        ModelParams::Sssc(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    /// Dense `log N(y_obs; W̃ μ, σ² I + W̃ Ψ W̃ᵀ)` and Gaussian-conditioning
    /// posterior mean of `z_A`.
    fn dense_oracle(p: &SsscParams, s: &BinaryState, y: &[f64], mask: Option<&[bool]>) -> (f64, Vec<f64>) {
        let d = y.len();
        let obs: Vec<usize> = (0..d).filter(|&i| mask.is_none_or(|m| m[i])).collect();
        let act = s.active_indices();
        let wt = DMatrix::from_fn(obs.len(), act.len(), |i, j| p.w[(obs[i], act[j])]);
        let psi_a = DMatrix::from_fn(act.len(), act.len(), |i, j| p.psi[(act[i], act[j])]);
        let mu_a = DVector::from_fn(act.len(), |i, _| p.mu[act[i]]);
        let c = DMatrix::identity(obs.len(), obs.len()) * p.sigma2 + &wt * &psi_a * wt.transpose();
        let yv = DVector::from_fn(obs.len(), |i, _| y[obs[i]]);
        let r = &yv - &wt * &mu_a;
        let cinv = c.clone().try_inverse().unwrap();
        let quad = (r.transpose() * &cinv * &r)[(0, 0)];
        let logn = -0.5 * (obs.len() as f64 * (2.0 * PI).ln() + c.determinant().ln() + quad);
        let post_mean = &mu_a + &psi_a * wt.transpose() * &cinv * &r;
        (logn, post_mean.iter().copied().collect())
    }

    fn random_params(h: usize, d: usize, seed: u64) -> SsscParams {
        let mut rng = stream(seed, Purpose::Test, 0, 0);
        let w = DMatrix::from_fn(d, h, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = DMatrix::from_fn(h, h, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.4);
        let psi = &a * a.transpose() + DMatrix::identity(h, h) * 0.5;
        let pi = (0..h).map(|_| rng.random_range(0.1..0.5)).collect();
        let mu = (0..h).map(|_| rng.random_range(-2.0..2.0)).collect();
        SsscParams::new(pi, 0.6, w, mu, psi, false).unwrap()
    }

    #[test]
    fn zero_state_inference() {
        let p = random_params(3, 4, 1);
        let y = [1.0, -2.0, 0.5, 3.0];
        let inf = p.active_inference(&BinaryState::zeros(3), DataRow::full(&y), true).unwrap();
        assert!(inf.kappa_full(3).iter().all(|&v| v == 0.0));
        assert!((inf.log_det_c - 4.0 * 0.6f64.ln()).abs() < 1e-14);
        let yy: f64 = y.iter().map(|v| v * v).sum();
        assert!((inf.quad - yy / 0.6).abs() < 1e-12);
    }

    #[test]
    fn worked_kappa_example() {
        let p = SsscParams::new(
            vec![0.5, 0.5],
            1.0,
            DMatrix::identity(2, 2),
            vec![0.0, 0.0],
            DMatrix::identity(2, 2),
            false,
        )
        .unwrap();
        let s = BinaryState::from_bits(&[true, false]);
        let inf = p.active_inference(&s, DataRow::full(&[2.0, 0.0]), true).unwrap();
        assert!((inf.kappa[0] - 1.0).abs() < 1e-15);
        assert!((inf.lambda[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn subspace_matches_dense_oracle() {
        for seed in 0..5 {
            let (h, d) = (5, 7);
            let p = random_params(h, d, seed);
            let mut rng = stream(seed, Purpose::Test, 1, 0);
            let y: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
            let mask: Vec<bool> = (0..d).map(|i| i % 3 != 1).collect();
            for masked in [false, true] {
                let m = masked.then_some(mask.as_slice());
                let row = DataRow { y: &y, mask: m };
                let obs = row.observed_count();
                for idx in 0..(1u64 << h) {
                    let s = BinaryState::from_index(idx, h);
                    let (logn, post) = dense_oracle(&p, &s, &y, m);
                    let mut want = logn;
                    for i in 0..h {
                        want += if s.get(i) { p.pi[i].ln() } else { (1.0 - p.pi[i]).ln() };
                    }
                    let got = p.log_pseudo_joint(&s, row).unwrap() + p.log_constant(obs);
                    assert!((got - want).abs() < 1e-10, "seed {seed} state {s:?}: {got} vs {want}");
                    let inf = p.active_inference(&s, row, false).unwrap();
                    for (a, b) in inf.kappa.iter().zip(&post) {
                        assert!((a - b).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn frozen_m_step_keeps_mu_psi() {
        let mut rng = stream(4, Purpose::Test, 0, 0);
        let w = DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = SsscParams::frozen(vec![0.3; 3], 1.0, w).unwrap();
        let (data, _) = p.sample(30, &mut rng);
        let mut stats = p.new_stats(&data, &MStepOptions::default());
        let states: Vec<_> = (0..8).map(|i| BinaryState::from_index(i, 3)).collect();
        for n in 0..data.len() {
            let lpj = p.log_pseudo_joints(&states, data.row(n)).unwrap();
            let weights = crate::variational::posterior_weights(&lpj);
            p.accumulate(&mut stats, data.row(n), &states, &weights).unwrap();
        }
        let next = p.m_step(stats, &MStepOptions::default()).unwrap();
        assert!(next.mu_psi_frozen());
        assert_eq!(next.mu(), &[1.0, 1.0, 1.0]);
        assert_eq!(next.psi(), &DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn rejects_bad_psi() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SsscParams::new(vec![0.5; 2], 1.0, DMatrix::zeros(3, 2), vec![0.0; 2], bad, false).is_err());
    }
}
