//! Image restoration plumbing: real-valued images, PGM/PPM and raw `EEMF`
//! I/O, sliding-window patches, overlap merging, corruption and PSNR.

mod corrupt;
mod io;
mod patches;
mod restore;

pub use corrupt::{corrupt, mean_fill, psnr, CorruptionSpec, PixelMask};
pub use io::{read_image, read_pnm, read_raw, write_image, write_pnm, write_raw};
pub use patches::{extract_patches, merge_patches, MergeMode, MergeWeights, PatchGrid};
pub use restore::{psnr_csv, reconstruct_patches, PsnrPoint, Restoration, RestorationTask};

use crate::error::{Error, Result};

/// Real-valued image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParam(format!("images have 1 or 3 channels, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParam("image has zero size".into()));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    /// Number of pixel positions (`width × height`).
    pub fn positions(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[self.index(x, y, c)]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Dimension(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(width * height * self.channels);
        for y in y0..y0 + height {
            let start = self.index(x0, y, 0);
            pixels.extend_from_slice(&self.pixels[start..start + width * self.channels]);
        }
        Image::new(width, height, self.channels, pixels)
    }

    /// Values clamped to `[0, 255]` and rounded half to even.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| v.clamp(0.0, 255.0).round_ties_even() as u8).collect()
    }
}
