//! Sliding-window patch extraction and overlap merging.

use super::{Image, PixelMask};
use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::estimator::Reconstruction;

/// All `(W - P_x + 1)(H - P_y + 1)` window positions of a `P_x × P_y` patch;
/// origins run with `x` fastest. Patch vectors list pixels row by row with
/// channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_w: usize,
    pub patch_h: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(image: &Image, patch_w: usize, patch_h: usize) -> Result<Self> {
        if patch_w == 0 || patch_h == 0 || patch_w > image.width() || patch_h > image.height() {
            return Err(Error::Dimension(format!(
                "{patch_w}x{patch_h} patches do not fit a {}x{} image",
                image.width(),
                image.height()
            )));
        }
        Ok(PatchGrid {
            patch_w,
            patch_h,
            image_w: image.width(),
            image_h: image.height(),
            channels: image.channels(),
        })
    }

    pub fn cols(&self) -> usize {
        self.image_w - self.patch_w + 1
    }

    pub fn rows(&self) -> usize {
        self.image_h - self.patch_h + 1
    }

    pub fn len(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch dimension `D = P_x P_y C`.
    pub fn dim(&self) -> usize {
        self.patch_w * self.patch_h * self.channels
    }

    pub fn origin(&self, n: usize) -> (usize, usize) {
        (n % self.cols(), n / self.cols())
    }

    pub fn origins(&self) -> Vec<(usize, usize)> {
        (0..self.len()).map(|n| self.origin(n)).collect()
    }

    /// Image buffer index of patch coordinate `d` of patch `n`.
    #[inline]
    pub fn pixel_index(&self, n: usize, d: usize) -> usize {
        let (x0, y0) = self.origin(n);
        let c = d % self.channels;
        let p = d / self.channels;
        let (dx, dy) = (p % self.patch_w, p / self.patch_w);
        ((y0 + dy) * self.image_w + x0 + dx) * self.channels + c
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.width() != self.image_w || image.height() != self.image_h || image.channels() != self.channels {
            return Err(Error::Dimension("image does not match the patch grid".into()));
        }
        Ok(())
    }
}

/// One row per patch; with a mask, missing pixels are masked in every
/// patch that covers them.
pub fn extract_patches(image: &Image, grid: &PatchGrid, mask: Option<&PixelMask>) -> Result<DataSet> {
    grid.check(image)?;
    if let Some(m) = mask {
        m.check(image)?;
    }
    let (n, d) = (grid.len(), grid.dim());
    let mut values = Vec::with_capacity(n * d);
    let mut observed = mask.map(|_| Vec::with_capacity(n * d));
    for p in 0..n {
        for k in 0..d {
            let idx = grid.pixel_index(p, k);
            values.push(image.pixels()[idx]);
            if let (Some(obs), Some(m)) = (observed.as_mut(), mask) {
                obs.push(m.observed(idx / grid.channels));
            }
        }
    }
    match observed {
        None => DataSet::new(n, d, values),
        Some(obs) => DataSet::with_mask(n, d, values, obs),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    /// Every pixel becomes the average of its patch estimates.
    Denoise,
    /// Only missing pixels are replaced; observed ones are copied.
    Inpaint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum MergeWeights {
    #[default]
    Uniform,
    /// Gaussian window centred on the patch with this standard deviation in
    /// pixels.
    Gaussian(f64),
}

impl MergeWeights {
    fn table(self, grid: &PatchGrid) -> Vec<f64> {
        let (pw, ph) = (grid.patch_w, grid.patch_h);
        let mut out = Vec::with_capacity(grid.dim());
        for p in 0..pw * ph {
            let w = match self {
                MergeWeights::Uniform => 1.0,
                MergeWeights::Gaussian(sigma) => {
                    let dx = (p % pw) as f64 - (pw as f64 - 1.0) / 2.0;
                    let dy = (p / pw) as f64 - (ph as f64 - 1.0) / 2.0;
                    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                }
            };
            out.extend(std::iter::repeat_n(w, grid.channels));
        }
        out
    }
}

/// Weighted average of the overlapping patch estimates.
pub fn merge_patches(
    reconstructions: &[Reconstruction],
    grid: &PatchGrid,
    original: &Image,
    mask: Option<&PixelMask>,
    mode: MergeMode,
    weights: MergeWeights,
) -> Result<Image> {
    grid.check(original)?;
    if reconstructions.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} reconstructions for {} patches",
            reconstructions.len(),
            grid.len()
        )));
    }
    if let Some(m) = mask {
        m.check(original)?;
    }
    let table = weights.table(grid);
    let len = original.pixels().len();
    let mut sum = vec![0.0; len];
    let mut weight = vec![0.0; len];
    for (n, rec) in reconstructions.iter().enumerate() {
        if rec.coords.len() != rec.values.len() {
            return Err(Error::Dimension(format!("patch {n}: coordinates and values differ in length")));
        }
        for (&d, &v) in rec.coords.iter().zip(&rec.values) {
            if d >= grid.dim() {
                return Err(Error::Dimension(format!("patch {n}: coordinate {d} outside D={}", grid.dim())));
            }
            let idx = grid.pixel_index(n, d);
            sum[idx] += table[d] * v;
            weight[idx] += table[d];
        }
    }
    let mut out = original.clone();
    let channels = grid.channels;
    for (idx, px) in out.pixels_mut().iter_mut().enumerate() {
        let replace = match mode {
            MergeMode::Denoise => true,
            MergeMode::Inpaint => mask.is_some_and(|m| !m.observed(idx / channels)),
        };
        if !replace {
            continue;
        }
        if weight[idx] <= 0.0 {
            return Err(Error::InvalidParam(format!("pixel {} has no patch estimate", idx / channels)));
        }
        *px = sum[idx] / weight[idx];
    }
    Ok(out)
}
