//! `evoem` command-line front end: bars tests, training on CSV data, image
//! denoising and inpainting, PSNR evaluation and sampling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use evoem::checkpoint::{encode, save_bytes, Checkpoint};
use evoem::config::RunConfig;
use evoem::estimator::Reconstruct;
use evoem::imaging::{
    corrupt, mean_fill, psnr, psnr_csv, read_image, write_image, CorruptionSpec, Image, MergeMode, PixelMask,
    RestorationTask,
};
use evoem::learning::{init_params, install, FreeEnergyTrace, InitOptions, IterationReport, Progress, Trainer};
use evoem::model::{GenerativeModel, ModelParams};
use evoem::rng::{stream, Purpose};
use evoem::synthetic::{generate_bars_dataset, score_recovery, BarsSpec};
use evoem::variational::StateSetCollection;
use evoem::DataSet;

const BUILD_ID: &str = env!("EVOEM_BUILD_ID");

#[derive(Parser)]
#[command(name = "evoem", version, about = "Evolutionary EM for noisy-OR, binary sparse coding and spike-and-slab sparse coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset to start from.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0: all cores). Results do not depend on it.
    #[arg(long, env = "EVOEM_THREADS", default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Bars test: generate data, learn, score dictionary recovery.
    Bars(Common),
    /// Learn a model from CSV data (`data = PATH`, `latents = H`).
    Train(Common),
    /// Denoise `noisy`, or `image` corrupted with `noise_sigma`.
    Denoise(Common),
    /// Fill missing pixels given by `mask` or `missing_ratio`.
    Inpaint(Common),
    /// PSNR of CANDIDATE against REFERENCE.
    Eval {
        reference: PathBuf,
        candidate: PathBuf,
        /// Only count positions where this image is non-zero.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint, or from the configured bars model.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bars(c) => cmd_bars(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Denoise(c) => cmd_denoise(&c),
        Command::Inpaint(c) => cmd_inpaint(&c),
        Command::Eval {
            reference,
            candidate,
            mask,
        } => cmd_eval(&reference, &candidate, mask.as_deref()),
        Command::Sample { common, checkpoint } => cmd_sample(&common, checkpoint.as_deref()),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.preset {
        Some(name) => RunConfig::preset(name)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v).with_context(|| format!("--set {kv}"))?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(path) = &cfg.resume {
        let seed = Checkpoint::read_seed(path)?;
        if seed != cfg.seed {
            warn!("resuming with the checkpoint seed {seed} instead of {}", cfg.seed);
            cfg.seed = seed;
        }
    }
    cfg.ea_config()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// `manifest.txt`: comment lines naming the command, build and seed, then
/// the resolved config, so the file can be passed back via `--config`.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = format!(
        "# command = {command}\n# build = {BUILD_ID}\n# seed = {}\n{}",
        cfg.seed,
        cfg.to_text()
    );
    write(dir, "manifest.txt", text)
}

fn iterations_csv(reports: &[IterationReport]) -> String {
    let mut out = String::from("iteration,free_energy_per_datapoint,e_step_gain,min_set_gain,offspring,accepted\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{},{}",
            r.iteration, r.free_energy, r.e_step_gain, r.min_set_gain, r.offspring, r.accepted
        );
    }
    out
}

fn dictionary_csv(params: &ModelParams) -> String {
    let w = params.w();
    let mut out = (0..w.ncols()).map(|h| format!("w{h}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in w.row_iter() {
        out.push_str(&row.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Saved state to continue from.
struct Resume {
    sets: StateSetCollection,
    trace: FreeEnergyTrace,
    iteration: usize,
}

/// Initial parameters: from `cfg.resume` when set, else data-driven.
fn starting_point(cfg: &RunConfig, data: &DataSet, frozen_default: bool) -> Result<(ModelParams, Option<Resume>)> {
    if let Some(path) = cfg.resume.clone() {
        let cp = Checkpoint::load(&path)?;
        if cp.params.kind() != cfg.model {
            bail!("checkpoint holds a {} model, config asks for {}", cp.params.kind(), cfg.model);
        }
        info!("resuming from {} at iteration {}", path.display(), cp.iteration);
        return Ok((
            cp.params,
            Some(Resume {
                sets: cp.sets,
                trace: cp.trace,
                iteration: cp.iteration,
            }),
        ));
    }
    let h = cfg.latent_dim();
    let opts = InitOptions {
        frozen_slabs: cfg.frozen_slabs.unwrap_or(frozen_default),
    };
    let params = init_params(cfg.model, data, h, opts, &mut stream(cfg.seed, Purpose::InitParams, 0, 0))?;
    Ok((params, None))
}

fn trainer<M: GenerativeModel>(
    data: &DataSet,
    model: M,
    resume: Option<Resume>,
    cfg: &RunConfig,
    threads: usize,
) -> Result<Trainer<M>> {
    let eem = cfg.eem_config(threads);
    let ea = cfg.ea_config()?;
    Ok(match resume {
        Some(r) => Trainer::resume(data, model, r.sets, r.trace, r.iteration, eem, ea)?,
        None => Trainer::new(data, model, eem, ea)?,
    })
}

/// Per-iteration bookkeeping shared by all training commands: collects
/// reports and writes periodic checkpoints.
struct Recorder<'a> {
    out: &'a Path,
    seed: u64,
    every: usize,
    reports: Vec<IterationReport>,
}

impl<'a> Recorder<'a> {
    fn new(out: &'a Path, cfg: &RunConfig) -> Self {
        Recorder {
            out,
            seed: cfg.seed,
            every: cfg.checkpoint_every,
            reports: Vec::new(),
        }
    }

    fn observe<M: GenerativeModel>(&mut self, p: &Progress<'_, M>) -> evoem::Result<()> {
        self.reports.push(p.report.clone());
        if self.every > 0 && p.report.iteration % self.every == 0 {
            self.checkpoint(p.trainer)?;
        }
        Ok(())
    }

    fn checkpoint<M: GenerativeModel>(&self, t: &Trainer<M>) -> evoem::Result<()> {
        let bytes = encode(&t.model.to_params(), &t.sets, &t.trace, t.iteration, self.seed);
        save_bytes(&self.out.join("checkpoint.eem"), &bytes)
    }

    /// Final checkpoint plus the trace CSVs.
    fn finish<M: GenerativeModel>(&self, t: &Trainer<M>) -> Result<()> {
        self.checkpoint(t)?;
        write(self.out, "free_energy.csv", t.trace.to_csv())?;
        write(self.out, "iterations.csv", iterations_csv(&self.reports))?;
        write(self.out, "dictionary.csv", dictionary_csv(&t.model.to_params()))
    }
}

fn fit<M: GenerativeModel>(
    data: &DataSet,
    model: M,
    resume: Option<Resume>,
    cfg: &RunConfig,
    c: &Common,
) -> Result<ModelParams> {
    let mut t = trainer(data, model, resume, cfg, c.threads)?;
    let mut rec = Recorder::new(&c.out, cfg);
    t.run(data, &mut |p| rec.observe(p))?;
    rec.finish(&t)?;
    info!("final F/N = {:.6}", t.free_energy(data));
    Ok(t.model.to_params())
}

fn fit_params(data: &DataSet, params: ModelParams, resume: Option<Resume>, cfg: &RunConfig, c: &Common) -> Result<ModelParams> {
    match params {
        ModelParams::NoisyOr(m) => fit(data, m, resume, cfg, c),
        ModelParams::Bsc(m) => fit(data, m, resume, cfg, c),
        ModelParams::Sssc(m) => fit(data, m, resume, cfg, c),
    }
}

fn cmd_bars(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let spec = BarsSpec::standard(cfg.model, cfg.bars_side, &mut stream(cfg.seed, Purpose::Bars, 0, 0))?;
    if cfg.latent_dim() != spec.latent_dim() {
        bail!("a {0}x{0} bars test has H={1}, config asks for {2}", cfg.bars_side, spec.latent_dim(), cfg.latent_dim());
    }
    let (data, truth, _) = generate_bars_dataset(&spec, cfg.samples, &mut stream(cfg.seed, Purpose::Sample, 0, 0))?;
    let (init, resume) = starting_point(&cfg, &data, false)?;
    write_manifest(&c.out, "bars", &cfg)?;
    info!("bars test: {} model, {} samples, H={}", cfg.model, cfg.samples, spec.latent_dim());
    let learned = fit_params(&data, init, resume, &cfg, c)?;
    let report = score_recovery(&learned, &truth)?;
    write(&c.out, "recovery.csv", report.to_csv())?;
    println!(
        "min correlation {:.4}, all bars recovered (>= 0.95): {}, max prior error {:.4}",
        report.min_correlation(),
        report.all_recovered(0.95),
        report.max_prior_error()
    );
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let path = cfg.data.clone().context("train needs `data = PATH` (CSV rows)")?;
    if cfg.latents == 0 {
        bail!("train needs `latents = H`");
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let data = DataSet::from_csv(&text).with_context(|| path.display().to_string())?;
    let (init, resume) = starting_point(&cfg, &data, false)?;
    write_manifest(&c.out, "train", &cfg)?;
    info!("training {} on {} datapoints of D={}", cfg.model, data.len(), data.dim());
    fit_params(&data, init, resume, &cfg, c)?;
    Ok(())
}

fn load_cropped(path: &Path, cfg: &RunConfig) -> Result<Image> {
    let img = read_image(path)?;
    Ok(match cfg.crop {
        Some((x, y, w, h)) => img.crop(x, y, w, h).with_context(|| format!("cropping {}", path.display()))?,
        None => img,
    })
}

fn restore<M: Reconstruct>(
    task: &RestorationTask<'_>,
    data: &DataSet,
    model: M,
    resume: Option<Resume>,
    cfg: &RunConfig,
    c: &Common,
) -> Result<(Image, Option<f64>)> {
    let mut t = trainer(data, model, resume, cfg, c.threads)?;
    let mut rec = Recorder::new(&c.out, cfg);
    let out = task.run(&mut t, data, &mut |p| rec.observe(p))?;
    rec.finish(&t)?;
    write(&c.out, "psnr.csv", psnr_csv(&out.trace))?;
    Ok((out.image, out.psnr))
}

fn restore_params(
    task: &RestorationTask<'_>,
    data: &DataSet,
    params: ModelParams,
    resume: Option<Resume>,
    cfg: &RunConfig,
    c: &Common,
) -> Result<(Image, Option<f64>)> {
    match params {
        ModelParams::Bsc(m) => restore(task, data, m, resume, cfg, c),
        ModelParams::Sssc(m) => restore(task, data, m, resume, cfg, c),
        ModelParams::NoisyOr(_) => bail!("image restoration needs a bsc or sssc model"),
    }
}

fn summary(rows: &[(&str, Option<f64>)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        if let Some(v) = v {
            let _ = writeln!(out, "{k},{v:.6}");
        }
    }
    out
}

fn cmd_denoise(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let clean = cfg.image.as_ref().map(|p| load_cropped(p, &cfg)).transpose()?;
    let noisy = match (&cfg.noisy, &clean) {
        (Some(p), _) => load_cropped(p, &cfg)?,
        (None, Some(img)) => {
            let sigma = cfg.noise_sigma.context("denoise needs `noisy = PATH`, or `image` with `noise_sigma`")?;
            corrupt(img, &CorruptionSpec::Awg(sigma), &mut stream(cfg.seed, Purpose::Corrupt, 0, 0))?.0
        }
        (None, None) => bail!("denoise needs `noisy = PATH` or `image = PATH`"),
    };
    let mut task = RestorationTask::new(&noisy, None, clean.as_ref(), (cfg.patch_w, cfg.patch_h), MergeMode::Denoise)?;
    task.weights = cfg.merge_weights;
    let eval_at = cfg.eval_at.clone();
    task.eval_at = &eval_at;
    let data = install(c.threads, || task.patches())?;
    let (init, resume) = starting_point(&cfg, &data, false)?;
    write_manifest(&c.out, "denoise", &cfg)?;
    write_image(c.out.join("noisy.pgm"), &noisy)?;
    let noisy_psnr = clean.as_ref().map(|r| psnr(r, &noisy, None)).transpose()?;
    if let Some(p) = noisy_psnr {
        info!("noisy input: PSNR {p:.2} dB");
    }
    info!("{} patches of D={}", data.len(), data.dim());
    let (image, restored_psnr) = restore_params(&task, &data, init, resume, &cfg, c)?;
    write_image(c.out.join("restored.pgm"), &image)?;
    write_image(c.out.join("restored.eemf"), &image)?;
    write(&c.out, "summary.csv", summary(&[("noisy_psnr", noisy_psnr), ("restored_psnr", restored_psnr)]))?;
    match restored_psnr {
        Some(p) => println!("PSNR {p:.2} dB (noisy {:.2} dB)", noisy_psnr.unwrap_or(f64::NAN)),
        None => println!("no clean reference; PSNR not reported"),
    }
    Ok(())
}

fn cmd_inpaint(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let clean = cfg.image.as_ref().map(|p| load_cropped(p, &cfg)).transpose()?;
    let mask_file = cfg
        .mask
        .as_ref()
        .map(|p| -> Result<PixelMask> {
            let img = read_image(p)?;
            let img = match cfg.crop {
                Some((x, y, w, h)) => img.crop(x, y, w, h)?,
                None => img,
            };
            Ok(PixelMask::from_image(&img))
        })
        .transpose()?;
    let (degraded, mask) = match (&cfg.noisy, &clean, mask_file) {
        (Some(p), _, Some(mask)) => {
            let img = load_cropped(p, &cfg)?;
            (img, mask)
        }
        (Some(_), _, None) => bail!("inpainting `noisy` input needs `mask = PATH`"),
        (None, Some(img), mask) => match (mask, cfg.missing_ratio) {
                (Some(m), _) => {
                    if m.width() != img.width() || m.height() != img.height() {
                        bail!(evoem::Error::Dimension(format!(
                            "{}x{} mask does not match {}x{} image",
                            m.width(),
                            m.height(),
                            img.width(),
                            img.height()
                        )));
                    }
                    let mut out = img.clone();
                    let ch = out.channels();
                    for (pos, px) in out.pixels_mut().chunks_exact_mut(ch).enumerate() {
                        if !m.observed(pos) {
                            px.fill(0.0);
                        }
                    }
                    (out, m)
                }
                (None, Some(r)) => {
                    let (out, m) = corrupt(img, &CorruptionSpec::RandomMissing(r), &mut stream(cfg.seed, Purpose::Corrupt, 0, 0))?;
                    (out, m.expect("missing-data corruption yields a mask"))
                }
                (None, None) => bail!("inpaint needs a missing-pixel mask: set `mask = PATH` or `missing_ratio`"),
        },
        (None, None, _) => bail!("inpaint needs `image = PATH` (or `noisy` with `mask`)"),
    };
    let mut task = RestorationTask::new(&degraded, Some(&mask), clean.as_ref(), (cfg.patch_w, cfg.patch_h), MergeMode::Inpaint)?;
    task.weights = cfg.merge_weights;
    let eval_at = cfg.eval_at.clone();
    task.eval_at = &eval_at;
    let filled = mean_fill(&degraded, &mask)?;
    let baseline = clean.as_ref().map(|r| psnr(r, &filled, None)).transpose()?;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    write_image(c.out.join("corrupted.pgm"), &degraded)?;
    write_image(c.out.join("mask.pgm"), &mask.to_image())?;

    if mask.missing_count() == 0 {
        info!("mask has no missing pixels; the input is returned unchanged");
        write_manifest(&c.out, "inpaint", &cfg)?;
        write_image(c.out.join("restored.pgm"), &degraded)?;
        write_image(c.out.join("restored.eemf"), &degraded)?;
        return Ok(());
    }
    let data = install(c.threads, || task.patches())?;
    let (init, resume) = starting_point(&cfg, &data, true)?;
    write_manifest(&c.out, "inpaint", &cfg)?;
    info!("{} missing pixels, {} patches of D={}", mask.missing_count(), data.len(), data.dim());
    let (image, restored_psnr) = restore_params(&task, &data, init, resume, &cfg, c)?;
    write_image(c.out.join("restored.pgm"), &image)?;
    write_image(c.out.join("restored.eemf"), &image)?;
    write(&c.out, "summary.csv", summary(&[("mean_fill_psnr", baseline), ("restored_psnr", restored_psnr)]))?;
    match restored_psnr {
        Some(p) => println!("PSNR {p:.2} dB (mean fill {:.2} dB)", baseline.unwrap_or(f64::NAN)),
        None => println!("no clean reference; PSNR not reported"),
    }
    Ok(())
}

fn cmd_eval(reference: &Path, candidate: &Path, mask: Option<&Path>) -> Result<()> {
    let a = read_image(reference)?;
    let b = read_image(candidate)?;
    let select = mask.map(|p| read_image(p).map(|m| PixelMask::from_image(&m))).transpose()?;
    if let Some(m) = &select {
        if m.width() != a.width() || m.height() != a.height() {
            bail!(evoem::Error::Dimension(format!(
                "{}x{} mask does not match {}x{} image",
                m.width(),
                m.height(),
                a.width(),
                a.height()
            )));
        }
    }
    let v = psnr(&a, &b, select.as_ref().map(|m| m.as_slice()))?;
    if v.is_infinite() {
        println!("+inf");
    } else {
        println!("{v:.2}");
    }
    Ok(())
}

fn latents_csv(latents: &[evoem::state::BinaryState], h: usize) -> String {
    let mut out = (0..h).map(|k| format!("s{k}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for s in latents {
        out.push_str(&(0..h).map(|k| if s.get(k) { "1" } else { "0" }).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

fn cmd_sample(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let params = match checkpoint {
        Some(p) => Checkpoint::load(p)?.params,
        None => BarsSpec::standard(cfg.model, cfg.bars_side, &mut stream(cfg.seed, Purpose::Bars, 0, 0))?.ground_truth()?,
    };
    write_manifest(&c.out, "sample", &cfg)?;
    let (data, latents) = params.sample(cfg.samples, &mut stream(cfg.seed, Purpose::Sample, 0, 0));
    write(&c.out, "data.csv", data.to_csv())?;
    write(&c.out, "latents.csv", latents_csv(&latents, params.latent_dim()))?;
    println!("{} samples of D={} written to {}", data.len(), data.dim(), c.out.display());
    Ok(())
}
