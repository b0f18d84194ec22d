//! Genetic operators that propose new latent states for a datapoint's set:
//! parent selection, single-point crossover, bitflip mutation and the
//! multi-generation offspring loop.

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::data::DataRow;
use crate::error::{Error, Result};
use crate::model::{GenerativeModel, LARGE_NEG};
use crate::rng::StreamRng;
use crate::state::BinaryState;
use crate::variational::LatentStateSet;

/// Floor added to every fitness value.
pub const FITNESS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Fitness-proportional, without replacement.
    FitParents,
    /// Uniform, without replacement.
    RandParents,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    RandFlips,
    SparseFlips,
}

/// How sparseflips combine with crossover.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CrossoverMutation {
    /// Per-bit sparseflips instead of the single random flip.
    #[default]
    Replace,
    /// Single random flip followed by per-bit sparseflips.
    Augment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EaConfig {
    pub selection: Selection,
    pub crossover: bool,
    pub mutation: Mutation,
    pub n_parents: usize,
    /// Copies per parent when crossover is off.
    pub n_mutations: usize,
    pub n_generations: usize,
    /// Mean bitflip probability for sparseflips; `None` means `1/H`.
    pub p_bf: Option<f64>,
    pub crossover_mutation: CrossoverMutation,
}

impl EaConfig {
    /// Config from a hyphenated operator tag such as
    /// `fitparents-cross-sparseflips`; counts are filled in separately.
    pub fn from_tag(tag: &str, n_parents: usize, n_mutations: usize, n_generations: usize) -> Result<Self> {
        let (selection, crossover, mutation) = parse_tag(tag)?;
        Ok(EaConfig {
            selection,
            crossover,
            mutation,
            n_parents,
            n_mutations,
            n_generations,
            p_bf: None,
            crossover_mutation: CrossoverMutation::Replace,
        })
    }

    pub fn tag(&self) -> String {
        let sel = match self.selection {
            Selection::FitParents => "fitparents",
            Selection::RandParents => "randparents",
        };
        let mutation = match self.mutation {
            Mutation::RandFlips => "randflips",
            Mutation::SparseFlips => "sparseflips",
        };
        if self.crossover {
            format!("{sel}-cross-{mutation}")
        } else {
            format!("{sel}-{mutation}")
        }
    }

    pub fn validate(&self, set_size: usize, latent_dim: usize) -> Result<()> {
        if self.n_parents < 1 || self.n_parents > set_size {
            return Err(Error::Config(format!(
                "n_parents must lie in [1, S={set_size}], got {}",
                self.n_parents
            )));
        }
        if !self.crossover && (self.n_mutations < 1 || self.n_mutations > latent_dim) {
            return Err(Error::Config(format!(
                "n_mutations must lie in [1, H={latent_dim}], got {}",
                self.n_mutations
            )));
        }
        if self.n_generations < 1 {
            return Err(Error::Config("n_generations must be at least 1".into()));
        }
        if self.crossover && latent_dim < 2 {
            return Err(Error::Config("crossover needs H >= 2".into()));
        }
        if self.crossover && self.n_parents < 2 {
            return Err(Error::Config("crossover needs at least 2 parents".into()));
        }
        if let Some(p) = self.p_bf {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("p_bf must lie in [0,1], got {p}")));
            }
        }
        Ok(())
    }

    /// Children produced per generation from `n_p` parents.
    pub fn children_per_generation(&self, n_p: usize) -> usize {
        if self.crossover {
            n_p * n_p.saturating_sub(1)
        } else {
            n_p * self.n_mutations
        }
    }
}

impl fmt::Display for EaConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

fn parse_tag(tag: &str) -> Result<(Selection, bool, Mutation)> {
    let parts: Vec<&str> = tag.trim().split('-').collect();
    let bad = || Error::Config(format!("unrecognised EA tag '{tag}'"));
    let (sel, rest) = parts.split_first().ok_or_else(bad)?;
    let selection = match *sel {
        "fitparents" => Selection::FitParents,
        "randparents" => Selection::RandParents,
        _ => return Err(bad()),
    };
    let (crossover, mutation) = match rest {
        ["cross", m] => (true, *m),
        [m] => (false, *m),
        _ => return Err(bad()),
    };
    let mutation = match mutation {
        "randflips" | "randflip" => Mutation::RandFlips,
        "sparseflips" | "sparseflip" => Mutation::SparseFlips,
        _ => return Err(bad()),
    };
    Ok((selection, crossover, mutation))
}

impl FromStr for EaConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EaConfig::from_tag(s, 1, 1, 1)
    }
}

/// Offset fitness `lpj + |2 min lpj| + ε`.
///
/// The noisy-OR sentinel is excluded from the minimum when finite values
/// exist; sentinel states receive the floor `ε`.
pub fn fitness(lpj: &[f64]) -> Vec<f64> {
    let finite_min = lpj.iter().copied().filter(|&v| v > LARGE_NEG).fold(f64::INFINITY, f64::min);
    let min = if finite_min.is_finite() {
        finite_min
    } else {
        lpj.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let offset = (2.0 * min).abs();
    lpj.iter()
        .map(|&v| {
            if v <= LARGE_NEG && finite_min.is_finite() {
                FITNESS_EPS
            } else {
                (v + offset + FITNESS_EPS).max(FITNESS_EPS)
            }
        })
        .collect()
}

/// Indices of `n_parents` distinct members of a population.
pub fn select_parents(lpj: &[f64], selection: Selection, n_parents: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    let size = lpj.len();
    if n_parents > size {
        return Err(Error::InvalidParam(format!(
            "cannot select {n_parents} parents from a population of {size}"
        )));
    }
    match selection {
        Selection::RandParents => Ok(index::sample(rng, size, n_parents).into_vec()),
        Selection::FitParents => {
            let mut weights = fitness(lpj);
            let mut chosen = Vec::with_capacity(n_parents);
            for _ in 0..n_parents {
                let total: f64 = weights.iter().sum();
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &w) in weights.iter().enumerate() {
                    if w <= 0.0 {
                        continue;
                    }
                    acc += w;
                    pick = Some(i);
                    if target < acc {
                        break;
                    }
                }
                let i = pick.expect("population has remaining members");
                weights[i] = 0.0;
                chosen.push(i);
            }
            Ok(chosen)
        }
    }
}

/// All unordered parent pairs, one uniform cut `c ∈ {1..H-1}` per pair;
/// each pair yields both recombinations, `N_p (N_p - 1)` children in total.
pub fn crossover(parents: &[&BinaryState], rng: &mut StreamRng) -> Result<Vec<BinaryState>> {
    let h = parents.first().map_or(0, |p| p.len());
    if h < 2 {
        return Err(Error::InvalidParam("crossover needs H >= 2".into()));
    }
    let mut children = Vec::with_capacity(parents.len() * parents.len().saturating_sub(1));
    for i in 0..parents.len() {
        for j in i + 1..parents.len() {
            let cut = rng.random_range(1..h);
            let (a, b) = parents[i].crossover(parents[j], cut);
            children.push(a);
            children.push(b);
        }
    }
    Ok(children)
}

/// Flip probabilities `(p₀, p₁)` for zero- and one-bits such that the
/// expected number of active units after mutation is `target`.
pub fn sparseflip_probabilities(h: usize, active: usize, p_bf: f64, target: f64) -> (f64, f64) {
    let hf = h as f64;
    let k = active as f64;
    if active == 0 {
        return ((target / hf + p_bf).min(1.0), 0.0);
    }
    if active == h {
        return (0.0, (1.0 - target / hf).clamp(0.0, 1.0));
    }
    let alpha = (hf - k) * (hf * p_bf - target + k) / ((target - k + hf * p_bf) * k);
    let p0 = hf * p_bf / (hf + (alpha - 1.0) * k);
    let p1 = alpha * p0;
    let fix = |p: f64| if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
    (fix(p0), fix(p1))
}

fn flip_one(child: &mut BinaryState, rng: &mut StreamRng) {
    let i = rng.random_range(0..child.len());
    child.flip(i);
}

fn sparse_flip(child: &mut BinaryState, target: f64, p_bf: f64, rng: &mut StreamRng) {
    let h = child.len();
    let (p0, p1) = sparseflip_probabilities(h, child.count_ones(), p_bf, target);
    // draw against the pre-mutation bits
    let original = child.clone();
    for i in 0..h {
        let p = if original.get(i) { p1 } else { p0 };
        if rng.random::<f64>() < p {
            child.flip(i);
        }
    }
}

/// Mutate children in place. `after_crossover` selects the crossover
/// variant of sparseflips (see [`CrossoverMutation`]).
pub fn mutate(
    children: &mut [BinaryState],
    config: &EaConfig,
    sparsity: f64,
    after_crossover: bool,
    rng: &mut StreamRng,
) {
    for child in children.iter_mut() {
        let p_bf = config.p_bf.unwrap_or(1.0 / child.len() as f64);
        match config.mutation {
            Mutation::RandFlips => flip_one(child, rng),
            Mutation::SparseFlips => {
                if after_crossover && config.crossover_mutation == CrossoverMutation::Augment {
                    flip_one(child, rng);
                }
                sparse_flip(child, sparsity, p_bf, rng);
            }
        }
    }
}

/// New states found by [`evolve`].
#[derive(Clone, Debug, Default)]
pub struct Offspring {
    /// Unique states not in the input set, with log-pseudo-joints.
    pub candidates: Vec<(BinaryState, f64)>,
    /// Children generated before deduplication.
    pub generated: usize,
}

/// Run `N_g` generations starting from `set` and collect every new state.
pub fn evolve<M: GenerativeModel>(
    set: &LatentStateSet,
    model: &M,
    row: DataRow<'_>,
    config: &EaConfig,
    rng: &mut StreamRng,
) -> Result<Offspring> {
    let sparsity = model.sparsity();
    let mut known: HashMap<BinaryState, f64> = set
        .states()
        .iter()
        .cloned()
        .zip(set.lpj().iter().copied())
        .collect();
    let mut population: Vec<(BinaryState, f64)> =
        set.states().iter().cloned().zip(set.lpj().iter().copied()).collect();
    let mut out = Offspring::default();
    let min_parents = if config.crossover { 2 } else { 1 };

    for _ in 0..config.n_generations {
        if population.len() < min_parents {
            break;
        }
        let n_p = config.n_parents.min(population.len());
        let lpj: Vec<f64> = population.iter().map(|(_, v)| *v).collect();
        let picked = select_parents(&lpj, config.selection, n_p, rng)?;
        let parents: Vec<&BinaryState> = picked.iter().map(|&i| &population[i].0).collect();
        let mut children = if config.crossover {
            crossover(&parents, rng)?
        } else {
            let mut copies = Vec::with_capacity(n_p * config.n_mutations);
            for p in &parents {
                for _ in 0..config.n_mutations {
                    copies.push((*p).clone());
                }
            }
            copies
        };
        mutate(&mut children, config, sparsity, config.crossover, rng);
        out.generated += children.len();

        let mut seen = HashSet::with_capacity_and_hasher(children.len(), Default::default());
        let mut next: Vec<(BinaryState, f64)> = Vec::with_capacity(children.len());
        let mut fresh = Vec::new();
        for child in children {
            if !seen.insert(child.clone()) {
                continue;
            }
            match known.get(&child) {
                Some(&v) => next.push((child, v)),
                None => {
                    fresh.push(next.len());
                    next.push((child, 0.0));
                }
            }
        }
        let states: Vec<BinaryState> = fresh.iter().map(|&i| next[i].0.clone()).collect();
        let values = model.log_pseudo_joints(&states, row)?;
        for (&i, v) in fresh.iter().zip(values) {
            next[i].1 = v;
            known.insert(next[i].0.clone(), v);
            out.candidates.push((next[i].0.clone(), v));
        }
        population = next;
    }
    Ok(out)
}
