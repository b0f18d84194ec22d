//! Synthetic degradations, missing-pixel masks and PSNR.

use std::path::PathBuf;

use rand::seq::index;
use rand_distr::{Distribution, Normal};

use super::{read_image, Image};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Per-position observation mask (`true` = observed); a missing position
/// loses all of its channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    observed: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask for {width}x{height} needs {} entries, got {}",
                width * height,
                observed.len()
            )));
        }
        Ok(PixelMask {
            width,
            height,
            observed,
        })
    }

    pub fn all_observed(width: usize, height: usize) -> Self {
        PixelMask {
            width,
            height,
            observed: vec![true; width * height],
        }
    }

    /// Missing wherever every channel of `image` is zero.
    pub fn from_image(image: &Image) -> Self {
        let c = image.channels();
        let observed = image.pixels().chunks_exact(c).map(|px| px.iter().any(|&v| v != 0.0)).collect();
        PixelMask {
            width: image.width(),
            height: image.height(),
            observed,
        }
    }

    /// Mask image: observed pixels white, missing black.
    pub fn to_image(&self) -> Image {
        let px = self.observed.iter().map(|&o| if o { 255.0 } else { 0.0 }).collect();
        Image::new(self.width, self.height, 1, px).expect("mask dimensions are valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn observed(&self, position: usize) -> bool {
        self.observed[position]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.observed
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|&&o| !o).count()
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Dimension("mask crop out of range".into()));
        }
        let observed = (y0..y0 + height)
            .flat_map(|y| (x0..x0 + width).map(move |x| (x, y)))
            .map(|(x, y)| self.observed[y * self.width + x])
            .collect();
        PixelMask::new(width, height, observed)
    }

    pub(crate) fn check(&self, image: &Image) -> Result<()> {
        if self.width != image.width() || self.height != image.height() {
            return Err(Error::Dimension(format!(
                "{}x{} mask does not match {}x{} image",
                self.width,
                self.height,
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorruptionSpec {
    /// Additive white Gaussian noise with this standard deviation.
    Awg(f64),
    /// Remove `⌈ratio · W·H⌉` uniformly chosen positions.
    RandomMissing(f64),
    /// Remove the positions where the mask image is zero.
    MaskFile(PathBuf),
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CorruptionSpec::Awg(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::InvalidParam(format!("noise level must be non-negative, got {s}")))
            }
            CorruptionSpec::RandomMissing(r) if !(r > 0.0 && r < 1.0) => {
                Err(Error::InvalidParam(format!("missing ratio must lie in (0,1), got {r}")))
            }
            _ => Ok(()),
        }
    }
}

/// Apply `spec`; returns the corrupted image and, for missing-data specs,
/// the observation mask. Missing pixels are set to zero.
pub fn corrupt(image: &Image, spec: &CorruptionSpec, rng: &mut StreamRng) -> Result<(Image, Option<PixelMask>)> {
    spec.validate()?;
    let mut out = image.clone();
    let mask = match spec {
        CorruptionSpec::Awg(sigma) => {
            if *sigma > 0.0 {
                let noise = Normal::new(0.0, *sigma).map_err(|e| Error::InvalidParam(e.to_string()))?;
                for px in out.pixels_mut() {
                    *px += noise.sample(rng);
                }
            }
            return Ok((out, None));
        }
        CorruptionSpec::RandomMissing(ratio) => {
            let total = image.positions();
            let count = ((ratio * total as f64).ceil() as usize).min(total);
            let mut observed = vec![true; total];
            for i in index::sample(rng, total, count) {
                observed[i] = false;
            }
            PixelMask::new(image.width(), image.height(), observed)?
        }
        CorruptionSpec::MaskFile(path) => {
            let m = PixelMask::from_image(&read_image(path)?);
            m.check(image)?;
            m
        }
    };
    apply_mask(&mut out, &mask);
    Ok((out, Some(mask)))
}

fn apply_mask(image: &mut Image, mask: &PixelMask) {
    let c = image.channels();
    for (pos, px) in image.pixels_mut().chunks_exact_mut(c).enumerate() {
        if !mask.observed(pos) {
            px.fill(0.0);
        }
    }
}

/// Fill missing positions with the per-channel mean of the observed ones.
pub fn mean_fill(image: &Image, mask: &PixelMask) -> Result<Image> {
    mask.check(image)?;
    let c = image.channels();
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for (pos, px) in image.pixels().chunks_exact(c).enumerate() {
        if mask.observed(pos) {
            count += 1;
            for (s, v) in sum.iter_mut().zip(px) {
                *s += v;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptySelection("no observed pixels".into()));
    }
    let mut out = image.clone();
    for (pos, px) in out.pixels_mut().chunks_exact_mut(c).enumerate() {
        if !mask.observed(pos) {
            for (v, s) in px.iter_mut().zip(&sum) {
                *v = s / count as f64;
            }
        }
    }
    Ok(out)
}

/// `10 log10(255² / MSE)` over all positions or, with `select`, over the
/// positions where it is `true`. Identical inputs give `+∞`.
pub fn psnr(reference: &Image, candidate: &Image, select: Option<&[bool]>) -> Result<f64> {
    if !reference.same_shape(candidate) {
        return Err(Error::Dimension(format!(
            "{}x{}x{} vs {}x{}x{} image",
            reference.width(),
            reference.height(),
            reference.channels(),
            candidate.width(),
            candidate.height(),
            candidate.channels()
        )));
    }
    if let Some(s) = select {
        if s.len() != reference.positions() {
            return Err(Error::Dimension("selection does not match image size".into()));
        }
    }
    let c = reference.channels();
    let mut sq = 0.0;
    let mut count = 0usize;
    for (pos, (a, b)) in reference.pixels().chunks_exact(c).zip(candidate.pixels().chunks_exact(c)).enumerate() {
        if select.is_some_and(|s| !s[pos]) {
            continue;
        }
        for (x, y) in a.iter().zip(b) {
            sq += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySelection("PSNR over zero pixels".into()));
    }
    let mse = sq / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn rng() -> StreamRng {
        stream(5, Purpose::Corrupt, 0, 0)
    }

    #[test]
    fn psnr_reference_values() {
        let a = Image::filled(4, 4, 1, 100.0).unwrap();
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, 1, 101.0).unwrap();
        assert!((psnr(&a, &b, None).unwrap() - 48.130_803_608_679_1).abs() < 1e-9);
        let z = Image::filled(4, 4, 1, 0.0).unwrap();
        let f = Image::filled(4, 4, 1, 255.0).unwrap();
        assert_eq!(psnr(&z, &f, None).unwrap(), 0.0);
        assert_eq!(psnr(&b, &a, None).unwrap(), psnr(&a, &b, None).unwrap());
        assert!(matches!(psnr(&a, &b, Some(&[false; 16])), Err(Error::EmptySelection(_))));
        assert!(psnr(&a, &Image::filled(4, 3, 1, 0.0).unwrap(), None).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, mask) = corrupt(&img, &CorruptionSpec::Awg(0.0), &mut rng()).unwrap();
        assert_eq!(out, img);
        assert!(mask.is_none());
    }

    #[test]
    fn missing_count_is_ceiled() {
        let img = Image::filled(256, 256, 1, 9.0).unwrap();
        let (_, mask) = corrupt(&img, &CorruptionSpec::RandomMissing(0.5), &mut rng()).unwrap();
        assert_eq!(mask.unwrap().missing_count(), 32768);
        let small = Image::filled(3, 1, 3, 9.0).unwrap();
        let (out, mask) = corrupt(&small, &CorruptionSpec::RandomMissing(0.5), &mut rng()).unwrap();
        let mask = mask.unwrap();
        assert_eq!(mask.missing_count(), 2);
        for pos in 0..3 {
            let zeros = out.pixels()[pos * 3..pos * 3 + 3].iter().all(|&v| v == 0.0);
            assert_eq!(zeros, !mask.observed(pos));
        }
    }

    #[test]
    fn awg_psnr_matches_noise_level() {
        let img = Image::filled(256, 256, 1, 128.0).unwrap();
        let (noisy, _) = corrupt(&img, &CorruptionSpec::Awg(25.0), &mut rng()).unwrap();
        let p = psnr(&img, &noisy, None).unwrap();
        assert!((p - 20.0 * (255.0f64 / 25.0).log10()).abs() < 0.1, "{p}");
    }

    #[test]
    fn mask_file_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        crate::imaging::write_image(&path, &Image::filled(3, 3, 1, 255.0).unwrap()).unwrap();
        let img = Image::filled(4, 4, 1, 1.0).unwrap();
        assert!(matches!(
            corrupt(&img, &CorruptionSpec::MaskFile(path), &mut rng()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mean_fill_uses_observed_mean() {
        let img = Image::new(2, 2, 1, vec![2.0, 0.0, 4.0, 0.0]).unwrap();
        let mask = PixelMask::new(2, 2, vec![true, false, true, false]).unwrap();
        assert_eq!(mean_fill(&img, &mask).unwrap().pixels(), &[2.0, 3.0, 4.0, 3.0]);
    }
}
