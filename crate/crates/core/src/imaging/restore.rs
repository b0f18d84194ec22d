//! Patch-based restoration: train on the patches of a degraded image,
//! estimate patch coordinates from the truncated posteriors and merge the
//! overlapping estimates.

use rayon::prelude::*;

use super::{merge_patches, psnr, Image, MergeMode, MergeWeights, PatchGrid, PixelMask};
use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::estimator::{Reconstruct, Reconstruction};
use crate::learning::{install, Callback, Progress, Trainer};
use crate::variational::StateSetCollection;

/// Per-patch estimates: every coordinate for denoising, only the missing
/// ones for inpainting.
pub fn reconstruct_patches<M: Reconstruct>(
    model: &M,
    sets: &StateSetCollection,
    data: &DataSet,
    mode: MergeMode,
) -> Result<Vec<Reconstruction>> {
    if sets.len() != data.len() {
        return Err(Error::Dimension(format!("{} state sets for {} patches", sets.len(), data.len())));
    }
    let all: Vec<usize> = (0..data.dim()).collect();
    (0..data.len())
        .into_par_iter()
        .map(|n| {
            let row = data.row(n);
            let missing: Vec<usize>;
            let targets = match mode {
                MergeMode::Denoise => &all[..],
                MergeMode::Inpaint => {
                    missing = (0..row.dim()).filter(|&d| !row.is_observed(d)).collect();
                    &missing[..]
                }
            };
            if targets.is_empty() {
                return Ok(Reconstruction {
                    coords: Vec::new(),
                    values: Vec::new(),
                });
            }
            model
                .reconstruct(sets.get(n), row, targets)
                .map_err(|e| e.context(format!("patch {n}")))
        })
        .collect()
}

/// One restoration problem.
#[derive(Clone, Debug)]
pub struct RestorationTask<'a> {
    pub degraded: &'a Image,
    /// Required for inpainting.
    pub mask: Option<&'a PixelMask>,
    /// Reference for PSNR; without it no PSNR is reported.
    pub clean: Option<&'a Image>,
    pub grid: PatchGrid,
    pub mode: MergeMode,
    pub weights: MergeWeights,
    /// Iterations after which the image is restored and measured.
    pub eval_at: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsnrPoint {
    pub iteration: usize,
    pub free_energy: f64,
    pub psnr: Option<f64>,
}

/// Outcome of [`run_restoration`].
#[derive(Clone, Debug)]
pub struct Restoration {
    pub image: Image,
    pub trace: Vec<PsnrPoint>,
    /// PSNR of the final image, when a reference was given.
    pub psnr: Option<f64>,
}

impl<'a> RestorationTask<'a> {
    pub fn new(
        degraded: &'a Image,
        mask: Option<&'a PixelMask>,
        clean: Option<&'a Image>,
        patch: (usize, usize),
        mode: MergeMode,
    ) -> Result<Self> {
        if mode == MergeMode::Inpaint && mask.is_none() {
            return Err(Error::InvalidParam("inpainting needs a missing-pixel mask".into()));
        }
        if let Some(m) = mask {
            m.check(degraded)?;
        }
        if let Some(c) = clean {
            if !c.same_shape(degraded) {
                return Err(Error::Dimension("clean and degraded images differ in shape".into()));
            }
        }
        Ok(RestorationTask {
            degraded,
            mask,
            clean,
            grid: PatchGrid::new(degraded, patch.0, patch.1)?,
            mode,
            weights: MergeWeights::Uniform,
            eval_at: &[],
        })
    }

    /// Training data: one row per patch, missing pixels masked.
    pub fn patches(&self) -> Result<DataSet> {
        super::extract_patches(self.degraded, &self.grid, self.mask)
    }

    /// Image estimate under the current model and state sets.
    pub fn restore<M: Reconstruct>(&self, model: &M, sets: &StateSetCollection, data: &DataSet) -> Result<Image> {
        let recs = reconstruct_patches(model, sets, data, self.mode)?;
        merge_patches(&recs, &self.grid, self.degraded, self.mask, self.mode, self.weights)
    }

    fn measure(&self, image: &Image) -> Result<Option<f64>> {
        self.clean.map(|c| psnr(c, image, None)).transpose()
    }

    /// Train `trainer` on `data` (from [`Self::patches`]) and restore,
    /// measuring at the configured iterations; `callback` runs after each
    /// iteration.
    pub fn run<M: Reconstruct>(
        &self,
        trainer: &mut Trainer<M>,
        data: &DataSet,
        callback: &mut Callback<'_, M>,
    ) -> Result<Restoration> {
        let threads = trainer.eem.parallel_degree;
        let mut trace = Vec::new();
        let mut last: Option<(usize, Image)> = None;
        trainer.run(data, &mut |p: &Progress<'_, M>| {
            let t = p.report.iteration;
            if self.eval_at.contains(&t) {
                let image = install(threads, || self.restore(&p.trainer.model, &p.trainer.sets, data))?;
                let psnr = self.measure(&image)?;
                if let Some(v) = psnr {
                    log::info!("iteration {t}: PSNR {v:.2} dB");
                }
                trace.push(PsnrPoint {
                    iteration: t,
                    free_energy: p.report.free_energy,
                    psnr,
                });
                last = Some((t, image));
            }
            callback(p)
        })?;
        let image = match last {
            Some((t, image)) if t == trainer.iteration => image,
            _ => install(threads, || self.restore(&trainer.model, &trainer.sets, data))?,
        };
        let psnr = self.measure(&image)?;
        Ok(Restoration { image, trace, psnr })
    }
}

/// `iteration,free_energy,psnr` rows; PSNR is empty without a reference.
pub fn psnr_csv(trace: &[PsnrPoint]) -> String {
    let mut out = String::from("iteration,free_energy,psnr\n");
    for p in trace {
        let v = p.psnr.map_or(String::new(), |v| format!("{v:.6}"));
        out.push_str(&format!("{},{:.12e},{v}\n", p.iteration, p.free_energy));
    }
    out
}
