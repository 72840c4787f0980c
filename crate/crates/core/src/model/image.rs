use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Raster image with values in `[0, 1]`, stored row-major with interleaved
/// channels (`(y * width + x) * channels + c`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
    pub modality_label: String,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Shape, "image must be non-empty, got {height}x{width}");
        }
        if channels != 1 && channels != 3 {
            bail!(Shape, "images have 1 or 3 channels, got {channels}");
        }
        if pixels.len() != height * width * channels {
            bail!(
                Shape,
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            );
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Parameter, "pixel value {bad} outside [0, 1]");
        }
        Ok(Self { height, width, channels, pixels, modality_label: String::new() })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.modality_label = label.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn min_side(&self) -> usize {
        self.height.min(self.width)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Converts to `channels` channels: gray is replicated, RGB is averaged.
    pub fn to_channels(&self, channels: usize) -> Result<Image> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        let n = self.height * self.width;
        let pixels = match (self.channels, channels) {
            (1, 3) => self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
            (3, 1) => (0..n)
                .map(|i| (self.pixels[3 * i] + self.pixels[3 * i + 1] + self.pixels[3 * i + 2]) / 3.0)
                .collect(),
            (_, c) => bail!(Shape, "cannot convert to {c} channels"),
        };
        Ok(Image::new(self.height, self.width, channels, pixels)?.with_label(self.modality_label.clone()))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 {
            bail!(Parameter, "upsample factor must be positive");
        }
        let (h, w, c) = (self.height * factor, self.width * factor, self.channels);
        let mut pixels = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels.push(self.get(y / factor, x / factor, ch));
                }
            }
        }
        Ok(Image::new(h, w, c, pixels)?.with_label(self.modality_label.clone()))
    }

    /// Box-mean downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            bail!(Shape, "{}x{} is not divisible by {factor}", self.height, self.width);
        }
        let (h, w, c) = (self.height / factor, self.width / factor, self.channels);
        let norm = (factor * factor) as f64;
        let mut pixels = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(y * factor + dy, x * factor + dx, ch);
                        }
                    }
                    pixels.push(acc / norm);
                }
            }
        }
        Ok(Image::new(h, w, c, pixels)?.with_label(self.modality_label.clone()))
    }

    /// Resizes to a square of side `size` by integer up- or down-sampling.
    pub fn fit_to(&self, size: usize) -> Result<Image> {
        if self.height != self.width {
            bail!(Shape, "expected a square image, got {}x{}", self.height, self.width);
        }
        let side = self.height;
        if side == size {
            Ok(self.clone())
        } else if size.is_multiple_of(side) {
            self.upsample(size / side)
        } else if side.is_multiple_of(size) {
            self.downsample(side / size)
        } else {
            bail!(Shape, "cannot resize {side} to {size} by an integer factor")
        }
    }

    /// Axis-aligned crop, `[y0, y1) × [x0, x1)`.
    pub fn crop(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> Result<Image> {
        if y1 > self.height || x1 > self.width || y0 >= y1 || x0 >= x1 {
            bail!(Shape, "crop [{y0},{y1})x[{x0},{x1}) outside {}x{}", self.height, self.width);
        }
        let mut pixels = Vec::with_capacity((y1 - y0) * (x1 - x0) * self.channels);
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..self.channels {
                    pixels.push(self.get(y, x, c));
                }
            }
        }
        Image::new(y1 - y0, x1 - x0, self.channels, pixels)
    }
}

/// Non-overlapping raster-order patches, each flattened row-major
/// (`dy`, `dx`, channel), as an `n_patches × (patch²·channels)` tensor.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        bail!(
            Shape,
            "{}x{} image is not divisible into {patch}x{patch} patches",
            img.height,
            img.width
        );
    }
    let (ph, pw, c) = (img.height / patch, img.width / patch, img.channels);
    let dim = patch * patch * c;
    let mut data = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        data.push(img.get(py * patch + dy, px * patch + dx, ch));
                    }
                }
            }
        }
    }
    Tensor::new(&[ph * pw, dim], data)
}

/// Inverse of [`patchify`]. Values are clamped to `[0, 1]`.
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, channels: usize, patch: usize) -> Result<Image> {
    let (n, dim) = patches.dims2()?;
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        bail!(Shape, "{height}x{width} is not divisible into {patch}x{patch} patches");
    }
    let (ph, pw) = (height / patch, width / patch);
    if n != ph * pw || dim != patch * patch * channels {
        bail!(
            Shape,
            "{n}x{dim} patches do not tile a {height}x{width}x{channels} image with patch {patch}"
        );
    }
    let mut pixels = vec![0.0; height * width * channels];
    let src = patches.data();
    for py in 0..ph {
        for px in 0..pw {
            let base = (py * pw + px) * dim;
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..channels {
                        let (y, x) = (py * patch + dy, px * patch + dx);
                        pixels[(y * width + x) * channels + ch] = src[base + k].clamp(0.0, 1.0);
                        k += 1;
                    }
                }
            }
        }
    }
    Image::new(height, width, channels, pixels)
}
