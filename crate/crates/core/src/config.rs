//! Flat `key = value` run configuration and named presets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evolution::{CrossoverMutation, EaConfig};
use crate::imaging::MergeWeights;
use crate::learning::EemConfig;
use crate::model::{MStepOptions, ModelKind, SigmaUpdate, SlabUpdate};

/// Everything a command needs to reproduce a run. Worker threads are not
/// part of the config: they never change results.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    /// `H`; for bars runs 0 means `2 · bars_side`.
    pub latents: usize,
    pub set_size: usize,
    pub ea: String,
    pub n_parents: usize,
    pub n_mutations: usize,
    pub n_generations: usize,
    pub p_bf: Option<f64>,
    pub crossover_mutation: CrossoverMutation,
    pub iterations: usize,
    pub seed: u64,
    pub log_every: usize,
    pub early_stop: bool,
    pub sigma_update: SigmaUpdate,
    pub slab_update: SlabUpdate,
    pub pi_floor: Option<f64>,
    /// SSSC with `μ = 1`, `Ψ = I` held fixed; `None` lets the command
    /// decide (frozen for inpainting only).
    pub frozen_slabs: Option<bool>,
    pub bars_side: usize,
    pub samples: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    pub merge_weights: MergeWeights,
    /// Clean image (reference for PSNR, or source for synthetic corruption).
    pub image: Option<PathBuf>,
    /// Already degraded input image.
    pub noisy: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub noise_sigma: Option<f64>,
    pub missing_ratio: Option<f64>,
    /// `(x, y, width, height)` applied to every input image.
    pub crop: Option<(usize, usize, usize, usize)>,
    /// Iterations at which restoration PSNR is measured.
    pub eval_at: Vec<usize>,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Data file for `train` (CSV rows; empty or `nan` fields are missing).
    pub data: Option<PathBuf>,
    /// Continue from this checkpoint instead of initialising.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Bsc,
            latents: 0,
            set_size: 20,
            ea: "fitparents-cross-sparseflips".into(),
            n_parents: 5,
            n_mutations: 4,
            n_generations: 2,
            p_bf: None,
            crossover_mutation: CrossoverMutation::Replace,
            iterations: 300,
            seed: 0,
            log_every: 10,
            early_stop: false,
            sigma_update: SigmaUpdate::OuterOfMeans,
            slab_update: SlabUpdate::Printed,
            pi_floor: None,
            frozen_slabs: None,
            bars_side: 5,
            samples: 5000,
            patch_w: 8,
            patch_h: 8,
            merge_weights: MergeWeights::Uniform,
            image: None,
            noisy: None,
            mask: None,
            noise_sigma: None,
            missing_ratio: None,
            crop: None,
            eval_at: psnr_strides(300),
            checkpoint_every: 0,
            data: None,
            resume: None,
        }
    }
}

/// Measurement iterations `1, 2, 5, 10, 20, 50, ...` up to and including
/// `last`.
pub fn psnr_strides(last: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut base = 1;
    'outer: loop {
        for m in [1, 2, 5] {
            let v = base * m;
            if v > last {
                break 'outer;
            }
            out.push(v);
        }
        base *= 10;
    }
    if out.last() != Some(&last) && last > 0 {
        out.push(last);
    }
    out
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn parse_opt_path(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

impl RunConfig {
    /// Set one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => self.model = v.parse()?,
            "latents" => self.latents = parse_num(key, v)?,
            "set_size" => self.set_size = parse_num(key, v)?,
            "ea" => {
                EaConfig::from_tag(v, 1, 1, 1)?;
                self.ea = v.to_string();
            }
            "n_parents" => self.n_parents = parse_num(key, v)?,
            "n_mutations" => self.n_mutations = parse_num(key, v)?,
            "n_generations" => self.n_generations = parse_num(key, v)?,
            "p_bf" => self.p_bf = parse_opt_f64(key, v)?,
            "crossover_mutation" => {
                self.crossover_mutation = match v {
                    "replace" => CrossoverMutation::Replace,
                    "augment" => CrossoverMutation::Augment,
                    _ => return Err(Error::Config(format!("crossover_mutation: expected replace or augment, got '{v}'"))),
                }
            }
            "iterations" => self.iterations = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            "early_stop" => self.early_stop = parse_bool(key, v)?,
            "sigma_update" => self.sigma_update = v.parse()?,
            "slab_update" => self.slab_update = v.parse()?,
            "pi_floor" => self.pi_floor = parse_opt_f64(key, v)?,
            "frozen_slabs" => {
                self.frozen_slabs = if v == "auto" { None } else { Some(parse_bool(key, v)?) }
            }
            "bars_side" => self.bars_side = parse_num(key, v)?,
            "samples" => self.samples = parse_num(key, v)?,
            "patch" => {
                let (w, h) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("patch: expected WxH, got '{v}'")))?;
                self.patch_w = parse_num(key, w)?;
                self.patch_h = parse_num(key, h)?;
            }
            "merge_weights" => {
                self.merge_weights = match v.split_once(':') {
                    None if v == "uniform" => MergeWeights::Uniform,
                    Some(("gaussian", s)) => MergeWeights::Gaussian(parse_num(key, s)?),
                    _ => return Err(Error::Config(format!("merge_weights: expected uniform or gaussian:SIGMA, got '{v}'"))),
                }
            }
            "image" => self.image = parse_opt_path(v),
            "noisy" => self.noisy = parse_opt_path(v),
            "mask" => self.mask = parse_opt_path(v),
            "noise_sigma" => self.noise_sigma = parse_opt_f64(key, v)?,
            "missing_ratio" => self.missing_ratio = parse_opt_f64(key, v)?,
            "crop" => {
                self.crop = if v == "none" {
                    None
                } else {
                    let parts: Vec<usize> = v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
                    match parts[..] {
                        [x, y, w, h] => Some((x, y, w, h)),
                        _ => return Err(Error::Config(format!("crop: expected x,y,width,height, got '{v}'"))),
                    }
                }
            }
            "eval_at" => {
                self.eval_at = if v == "strides" {
                    psnr_strides(self.iterations)
                } else if v == "none" {
                    Vec::new()
                } else {
                    let mut it: Vec<usize> = v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
                    it.sort_unstable();
                    it.dedup();
                    it
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "data" => self.data = parse_opt_path(v),
            "resume" => self.resume = parse_opt_path(v),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", i + 1)));
            }
            self.set(key, value).map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        self.apply_text(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// `H` for this run.
    pub fn latent_dim(&self) -> usize {
        if self.latents == 0 {
            2 * self.bars_side
        } else {
            self.latents
        }
    }

    pub fn ea_config(&self) -> Result<EaConfig> {
        let mut ea = EaConfig::from_tag(&self.ea, self.n_parents, self.n_mutations, self.n_generations)?;
        ea.p_bf = self.p_bf;
        ea.crossover_mutation = self.crossover_mutation;
        Ok(ea)
    }

    pub fn eem_config(&self, threads: usize) -> EemConfig {
        EemConfig {
            set_size: self.set_size,
            iterations: self.iterations,
            seed: self.seed,
            parallel_degree: threads,
            log_every: self.log_every,
            early_stop: self.early_stop,
            m_step: MStepOptions {
                pi_floor: self.pi_floor,
                sigma_update: self.sigma_update,
                slab_update: self.slab_update,
            },
        }
    }

    /// Canonical `key = value` text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let opt_f = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        let opt_p = |v: &Option<PathBuf>| v.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model", self.model.to_string());
        kv("latents", self.latents.to_string());
        kv("set_size", self.set_size.to_string());
        kv("ea", self.ea.clone());
        kv("n_parents", self.n_parents.to_string());
        kv("n_mutations", self.n_mutations.to_string());
        kv("n_generations", self.n_generations.to_string());
        kv("p_bf", opt_f(self.p_bf));
        kv(
            "crossover_mutation",
            match self.crossover_mutation {
                CrossoverMutation::Replace => "replace".into(),
                CrossoverMutation::Augment => "augment".into(),
            },
        );
        kv("iterations", self.iterations.to_string());
        kv("seed", self.seed.to_string());
        kv("log_every", self.log_every.to_string());
        kv("early_stop", self.early_stop.to_string());
        kv("sigma_update", self.sigma_update.to_string());
        kv("slab_update", self.slab_update.to_string());
        kv("pi_floor", opt_f(self.pi_floor));
        kv("frozen_slabs", self.frozen_slabs.map_or("auto".into(), |b| b.to_string()));
        kv("bars_side", self.bars_side.to_string());
        kv("samples", self.samples.to_string());
        kv("patch", format!("{}x{}", self.patch_w, self.patch_h));
        kv(
            "merge_weights",
            match self.merge_weights {
                MergeWeights::Uniform => "uniform".into(),
                MergeWeights::Gaussian(s) => format!("gaussian:{s:?}"),
            },
        );
        kv("image", opt_p(&self.image));
        kv("noisy", opt_p(&self.noisy));
        kv("mask", opt_p(&self.mask));
        kv("noise_sigma", opt_f(self.noise_sigma));
        kv("missing_ratio", opt_f(self.missing_ratio));
        kv(
            "crop",
            self.crop.map_or("none".into(), |(x, y, w, h)| format!("{x},{y},{w},{h}")),
        );
        kv(
            "eval_at",
            if self.eval_at.is_empty() {
                "none".into()
            } else {
                self.eval_at.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
            },
        );
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("data", opt_p(&self.data));
        kv("resume", opt_p(&self.resume));
        out
    }

    /// Named preset; see [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        let canonical = match name {
            "house-s50-es3c-small" => "house-σ50-es3c-small",
            "house-s25-ebsc-small" => "house-σ25-ebsc-small",
            other => other,
        };
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == canonical)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown preset '{name}' (available: {})", names.join(", ")))
            })?;
        let mut cfg = RunConfig::parse(text)?;
        if !text.contains("eval_at") {
            cfg.eval_at = psnr_strides(cfg.iterations);
        }
        Ok(cfg)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Named presets. Rows without a `-small` suffix use the published
/// experiment settings (`D`, `H`, `S`, `N_p`, `N_m`, `N_g`, iterations);
/// `-small` presets are reduced for a single workstation.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "bars-nor",
        "model = noisy-or\nbars_side = 5\nsamples = 5000\nea = randparents-cross-sparseflips\nset_size = 20\nn_parents = 5\nn_generations = 2\niterations = 300",
    ),
    (
        "bars-bsc",
        "model = bsc\nbars_side = 5\nsamples = 5000\nea = fitparents-cross-sparseflips\nset_size = 20\nn_parents = 5\nn_generations = 2\niterations = 300",
    ),
    (
        "bars-sssc",
        "model = sssc\nbars_side = 5\nsamples = 5000\nea = fitparents-cross-sparseflips\nset_size = 20\nn_parents = 5\nn_generations = 2\niterations = 300\nsigma_update = second-moment\nslab_update = exact",
    ),
    (
        "house-σ50-es3c",
        "model = sssc\nnoise_sigma = 50\npatch = 8x8\nlatents = 256\nea = fitparents-randflips\nset_size = 60\nn_parents = 6\nn_mutations = 5\nn_generations = 2\niterations = 2000",
    ),
    (
        "house-σ50-es3c-h64",
        "model = sssc\nnoise_sigma = 50\npatch = 8x8\nlatents = 64\nea = fitparents-randflips\nset_size = 60\nn_parents = 60\nn_mutations = 1\nn_generations = 1\niterations = 4000",
    ),
    (
        "house-σ25-ebsc",
        "model = bsc\nnoise_sigma = 25\npatch = 8x8\nlatents = 256\nea = fitparents-randflips\nset_size = 200\nn_parents = 10\nn_mutations = 9\nn_generations = 4\niterations = 4000",
    ),
    (
        "house-σ25-es3c",
        "model = sssc\nnoise_sigma = 25\npatch = 12x12\nlatents = 512\nea = fitparents-randflips\nset_size = 60\nn_parents = 60\nn_mutations = 1\nn_generations = 1\niterations = 4000",
    ),
    (
        "house-inpaint50-es3c",
        "model = sssc\nfrozen_slabs = true\nmissing_ratio = 0.5\npatch = 12x12\nlatents = 512\nea = fitparents-randflips\nset_size = 30\nn_parents = 20\nn_mutations = 1\nn_generations = 1\niterations = 4000",
    ),
    (
        "house-inpaint80-es3c",
        "model = sssc\nfrozen_slabs = true\nmissing_ratio = 0.8\npatch = 15x15\nlatents = 512\nea = fitparents-randflips\nset_size = 30\nn_parents = 20\nn_mutations = 1\nn_generations = 1\niterations = 500",
    ),
    (
        "house-σ50-es3c-small",
        "model = sssc\nnoise_sigma = 50\npatch = 8x8\nlatents = 64\nea = fitparents-randflips\nset_size = 30\nn_parents = 10\nn_mutations = 2\nn_generations = 1\niterations = 50",
    ),
    (
        "house-σ25-ebsc-small",
        "model = bsc\nnoise_sigma = 25\npatch = 8x8\nlatents = 64\nea = fitparents-randflips\nset_size = 40\nn_parents = 10\nn_mutations = 4\nn_generations = 2\niterations = 100",
    ),
    (
        "house-inpaint50-es3c-small",
        "model = sssc\nfrozen_slabs = true\nmissing_ratio = 0.5\ncrop = 64,64,128,128\npatch = 8x8\nlatents = 64\nea = fitparents-randflips\nset_size = 30\nn_parents = 20\nn_mutations = 1\nn_generations = 1\niterations = 100",
    ),
];
