//! The evolutionary EM loop: initialisation, E-step (evolve and update every
//! state set), streaming M-step and free-energy tracking.

use std::fmt::Write as _;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::evolution::{evolve, EaConfig};
use crate::model::{
    BscParams, GenerativeModel, MStepOptions, ModelKind, ModelParams, NoisyOrParams, SsscParams, EPS_W, SIGMA2_FLOOR,
};
use crate::rng::{stream, Purpose, StreamRng};
use crate::state::BinaryState;
use crate::variational::{free_energy, update_set, LatentStateSet, StateSetCollection};

/// Datapoints per reduction chunk. Partial results are combined in chunk
/// order, so sums do not depend on the number of worker threads.
pub const CHUNK: usize = 256;

/// Early stop: `|ΔF/N|` below this for [`PATIENCE`] iterations.
pub const STOP_TOL: f64 = 1e-8;
pub const PATIENCE: usize = 10;

/// `Σ_{i<n} f(i)` evaluated in parallel chunks and summed in index order.
pub fn ordered_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..n.min((c + 1) * CHUNK)).map(&f).sum::<f64>())
        .collect();
    partial.iter().sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EemConfig {
    /// `S`, states per datapoint.
    pub set_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    pub parallel_degree: usize,
    /// Log the free energy every this many iterations (0 disables).
    pub log_every: usize,
    pub early_stop: bool,
    pub m_step: MStepOptions,
}

impl Default for EemConfig {
    fn default() -> Self {
        EemConfig {
            set_size: 20,
            iterations: 100,
            seed: 0,
            parallel_degree: 1,
            log_every: 10,
            early_stop: false,
            m_step: MStepOptions::default(),
        }
    }
}

impl EemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.set_size < 1 {
            return Err(Error::Config("set size S must be at least 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Free energy per datapoint after each iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FreeEnergyTrace {
    points: Vec<(usize, f64)>,
}

impl FreeEnergyTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidParam("trace iterations must increase strictly".into()));
        }
        Ok(FreeEnergyTrace { points })
    }

    pub fn push(&mut self, iteration: usize, value: f64) {
        debug_assert!(self.points.last().is_none_or(|&(i, _)| i < iteration));
        self.points.push((iteration, value));
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|&(_, v)| v).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<(usize, f64)> {
        self.points.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,free_energy_per_datapoint\n");
        for &(i, v) in &self.points {
            let _ = writeln!(out, "{i},{v:.17e}");
        }
        out
    }
}

/// Diagnostics of one EM iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    /// `F(K_t, Θ_{t-1}) - F(K_{t-1}, Θ_{t-1})`, summed per datapoint.
    pub e_step_gain: f64,
    /// Smallest per-set change of `logsumexp(lpj)` in the E-step.
    pub min_set_gain: f64,
    /// Candidates generated before deduplication, over all datapoints.
    pub offspring: usize,
    /// States that entered a set.
    pub accepted: usize,
    /// `F(K_t, Θ_t) / N`.
    pub free_energy: f64,
    /// Set when the SSSC slabs were frozen after diverging.
    pub warning: Option<String>,
}

/// State of a run between iterations.
#[derive(Clone, Debug)]
pub struct Trainer<M: GenerativeModel> {
    pub model: M,
    pub sets: StateSetCollection,
    pub trace: FreeEnergyTrace,
    /// Completed iterations.
    pub iteration: usize,
    pub eem: EemConfig,
    pub ea: EaConfig,
}

/// What a callback sees after each iteration.
pub struct Progress<'a, M: GenerativeModel> {
    pub report: &'a IterationReport,
    pub trainer: &'a Trainer<M>,
}

pub type Callback<'a, M> = dyn FnMut(&Progress<'_, M>) -> Result<()> + 'a;

struct ChunkResult<S> {
    stats: S,
    gain: f64,
    min_gain: f64,
    offspring: usize,
    accepted: usize,
}

impl<M: GenerativeModel> Trainer<M> {
    /// Fresh run: sets are drawn from the seed and scored under `model`.
    pub fn new(data: &DataSet, model: M, eem: EemConfig, ea: EaConfig) -> Result<Self> {
        let h = model.latent_dim();
        let sets = init_state_sets(data.len(), h, eem.set_size, 1.0 / h as f64, eem.seed)?;
        Self::resume(data, model, sets, FreeEnergyTrace::new(), 0, eem, ea)
    }

    /// Continue from saved state; cached lpj values are recomputed.
    pub fn resume(
        data: &DataSet,
        model: M,
        mut sets: StateSetCollection,
        trace: FreeEnergyTrace,
        iteration: usize,
        eem: EemConfig,
        ea: EaConfig,
    ) -> Result<Self> {
        eem.validate()?;
        ea.validate(eem.set_size, model.latent_dim())?;
        if sets.len() != data.len() {
            return Err(Error::Dimension(format!("{} state sets for {} datapoints", sets.len(), data.len())));
        }
        if sets.set_size() != eem.set_size {
            return Err(Error::Dimension(format!(
                "state sets hold {} states, config asks for S={}",
                sets.set_size(),
                eem.set_size
            )));
        }
        if data.dim() != model.observed_dim() {
            return Err(Error::Dimension(format!("data has D={}, model D={}", data.dim(), model.observed_dim())));
        }
        install(eem.parallel_degree, || sets.refresh(&model, data))?;
        Ok(Trainer {
            model,
            sets,
            trace,
            iteration,
            eem,
            ea,
        })
    }

    /// `F(K, Θ) / N` for the current state.
    pub fn free_energy(&self, data: &DataSet) -> f64 {
        install(self.eem.parallel_degree, || free_energy(&self.sets, &self.model, data)) / data.len() as f64
    }

    /// One E-step and one M-step.
    pub fn step(&mut self, data: &DataSet) -> Result<IterationReport> {
        let threads = self.eem.parallel_degree;
        install(threads, || self.step_inner(data))
    }

    fn step_inner(&mut self, data: &DataSet) -> Result<IterationReport> {
        let t = self.iteration + 1;
        let model = &self.model;
        let ea = &self.ea;
        let seed = self.eem.seed;
        let opts = &self.eem.m_step;
        let n = data.len();
        let group = rayon::current_num_threads().max(1) * 2;

        let mut total: Option<ChunkResult<M::Stats>> = None;
        let chunks: Vec<&mut [LatentStateSet]> = self.sets.sets_mut().chunks_mut(CHUNK).collect();
        let mut chunks = chunks.into_iter().enumerate().collect::<Vec<_>>();
        // bounded groups keep at most `group` partial statistics alive
        while !chunks.is_empty() {
            let rest = chunks.split_off(group.min(chunks.len()));
            let batch = std::mem::replace(&mut chunks, rest);
            let results: Vec<Result<ChunkResult<M::Stats>>> = batch
                .into_par_iter()
                .map(|(c, sets)| e_step_chunk(model, data, ea, opts, seed, t, c * CHUNK, sets))
                .collect();
            for r in results {
                let r = r.map_err(|e| e.context(format!("iteration {t}")))?;
                total = Some(match total {
                    None => r,
                    Some(mut acc) => {
                        model.merge_stats(&mut acc.stats, r.stats);
                        acc.gain += r.gain;
                        acc.min_gain = acc.min_gain.min(r.min_gain);
                        acc.offspring += r.offspring;
                        acc.accepted += r.accepted;
                        acc
                    }
                });
            }
        }
        let total = total.ok_or(Error::InvalidParam("empty dataset".into()))?;

        let updated = model
            .m_step(total.stats, &self.eem.m_step)
            .map_err(|e| e.context(format!("M-step of iteration {t}")))?;
        let (updated, warning) = updated.stabilize()?;
        if let Some(w) = &warning {
            warn!("iteration {t}: {w}");
        }
        self.model = updated;
        self.sets
            .refresh(&self.model, data)
            .map_err(|e| e.context(format!("refresh after iteration {t}")))?;
        let f = free_energy(&self.sets, &self.model, data) / n as f64;
        self.trace.push(t, f);
        self.iteration = t;
        if self.eem.log_every > 0 && t % self.eem.log_every == 0 {
            info!("iteration {t}: F/N = {f:.6}");
        }
        Ok(IterationReport {
            iteration: t,
            e_step_gain: total.gain,
            min_set_gain: total.min_gain,
            offspring: total.offspring,
            accepted: total.accepted,
            free_energy: f,
            warning,
        })
    }

    /// Iterate until the configured budget (or early stop), calling
    /// `callback` after every iteration.
    pub fn run(&mut self, data: &DataSet, callback: &mut Callback<'_, M>) -> Result<()> {
        let mut quiet = 0;
        while self.iteration < self.eem.iterations {
            let prev = self.trace.last().map(|(_, v)| v);
            let report = self.step(data)?;
            callback(&Progress {
                report: &report,
                trainer: self,
            })?;
            if self.eem.early_stop {
                match prev {
                    Some(p) if (report.free_energy - p).abs() < STOP_TOL => quiet += 1,
                    _ => quiet = 0,
                }
                if quiet >= PATIENCE {
                    info!("converged after {} iterations", self.iteration);
                    break;
                }
            }
        }
        Ok(())
    }
}

fn e_step_chunk<M: GenerativeModel>(
    model: &M,
    data: &DataSet,
    ea: &EaConfig,
    opts: &MStepOptions,
    seed: u64,
    iteration: usize,
    start: usize,
    sets: &mut [LatentStateSet],
) -> Result<ChunkResult<M::Stats>> {
    let mut out = ChunkResult {
        stats: model.new_stats(data, opts),
        gain: 0.0,
        min_gain: f64::INFINITY,
        offspring: 0,
        accepted: 0,
    };
    for (i, set) in sets.iter_mut().enumerate() {
        let n = start + i;
        let row = data.row(n);
        let mut rng = stream(seed, Purpose::Evolve, n as u64, iteration as u64);
        let offspring = evolve(set, model, row, ea, &mut rng).map_err(|e| e.context(format!("datapoint {n}")))?;
        let before = set.log_sum_exp();
        let next = update_set(set, &offspring.candidates);
        let after = next.log_sum_exp();
        out.accepted += next.states().iter().filter(|s| !set.contains(s)).count();
        *set = next;
        out.gain += after - before;
        out.min_gain = out.min_gain.min(after - before);
        out.offspring += offspring.generated;
        model
            .accumulate(&mut out.stats, row, set.states(), &set.weights())
            .map_err(|e| e.context(format!("datapoint {n}")))?;
    }
    Ok(out)
}

/// Run `f` on a pool with `threads` workers (0 = all cores).
pub fn install<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Outcome of [`eem_fit`].
#[derive(Clone, Debug)]
pub struct FitResult<M> {
    pub model: M,
    pub sets: StateSetCollection,
    pub trace: FreeEnergyTrace,
}

/// Full run from an initial model.
pub fn eem_fit<M: GenerativeModel>(
    data: &DataSet,
    init: M,
    eem: &EemConfig,
    ea: &EaConfig,
    callback: &mut Callback<'_, M>,
) -> Result<FitResult<M>> {
    let mut trainer = Trainer::new(data, init, eem.clone(), ea.clone())?;
    trainer.run(data, callback)?;
    Ok(FitResult {
        model: trainer.model,
        sets: trainer.sets,
        trace: trainer.trace,
    })
}

/// Model-specific options for [`init_params`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InitOptions {
    /// Start SSSC with `μ = 1`, `Ψ = I` held fixed.
    pub frozen_slabs: bool,
}

/// Data-driven initial parameters with `h` latent units.
///
/// noisy-OR: `π = 1/H`, `W ~ U(0,1)`. BSC: `π = 1/H`, `σ²` the mean
/// per-dimension variance, columns of `W` the data mean plus Gaussian noise
/// of std `σ/4`. SSSC: like BSC for `W`, `σ²`; `π ~ U[0.1,0.5]`,
/// `μ ~ U[1,5]`, `Ψ = I`.
pub fn init_params(kind: ModelKind, data: &DataSet, h: usize, opts: InitOptions, rng: &mut StreamRng) -> Result<ModelParams> {
    if data.is_empty() || data.total_observed() == 0 {
        return Err(Error::InvalidParam("cannot initialise from an empty or fully masked dataset".into()));
    }
    if h == 0 {
        return Err(Error::InvalidParam("H must be positive".into()));
    }
    let d = data.dim();
    let hf = h as f64;
    match kind {
        ModelKind::NoisyOr => {
            let w = DMatrix::from_fn(d, h, |_, _| rng.random::<f64>().clamp(EPS_W, 1.0 - EPS_W));
            Ok(ModelParams::NoisyOr(NoisyOrParams::new(vec![1.0 / hf; h], w)?))
        }
        ModelKind::Bsc | ModelKind::Sssc => {
            let (mean, var) = data.observed_moments();
            let sigma2 = (var.iter().sum::<f64>() / d as f64).max(SIGMA2_FLOOR);
            let noise = Normal::new(0.0, 0.25 * sigma2.sqrt()).expect("finite std");
            let w = DMatrix::from_fn(d, h, |r, _| mean[r] + noise.sample(rng));
            if kind == ModelKind::Bsc {
                return Ok(ModelParams::Bsc(BscParams::new(1.0 / hf, sigma2, w)?));
            }
            let pi: Vec<f64> = (0..h).map(|_| rng.random_range(0.1..=0.5)).collect();
            let mu: Vec<f64> = (0..h).map(|_| rng.random_range(1.0..=5.0)).collect();
            let params = if opts.frozen_slabs {
                SsscParams::frozen(pi, sigma2, w)?
            } else {
                SsscParams::new(pi, sigma2, w, mu, DMatrix::identity(h, h), false)?
            };
            Ok(ModelParams::Sssc(params))
        }
    }
}

/// `n` sets of `s` unique states with bits drawn from Bernoulli(`p`).
///
/// Duplicates are redrawn a bounded number of times; remaining slots are
/// filled by enumerating states in index order. Cached lpj values are zero
/// until the sets are refreshed against a model.
pub fn init_state_sets(n: usize, h: usize, s: usize, p: f64, seed: u64) -> Result<StateSetCollection> {
    if h < 63 && (s as u128) > (1u128 << h) {
        return Err(Error::InvalidParam(format!("S={s} exceeds the 2^{h} possible states")));
    }
    let sets: Result<Vec<LatentStateSet>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Purpose::InitSets, i as u64, 0);
            let mut seen = std::collections::HashSet::with_capacity(s);
            let mut states = Vec::with_capacity(s);
            let mut tries = 0;
            while states.len() < s && tries < 100 * s {
                tries += 1;
                let mut st = BinaryState::zeros(h);
                for b in 0..h {
                    if rng.random::<f64>() < p {
                        st.set(b, true);
                    }
                }
                if seen.insert(st.clone()) {
                    states.push(st);
                }
            }
            let mut index = 0u64;
            while states.len() < s {
                let st = BinaryState::from_index(index, h);
                index += 1;
                if seen.insert(st.clone()) {
                    states.push(st);
                }
            }
            LatentStateSet::from_states(states)
        })
        .collect();
    Ok(StateSetCollection::new(sets?))
}
