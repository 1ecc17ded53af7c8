//! Image containers and the spatial primitives shared by every extractor:
//! color-space transforms, same-size convolution with edge replication,
//! average pooling, Scharr gradients, and dyadic Haar coefficient maps.

use std::path::Path;

use crate::error::{Error, Result};

/// A 2-D grid of real samples in row-major order. Carrier for luminance and
/// chroma channels, kernels, and every perceptual map in the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    samples: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != height * width {
            return Err(Error::InvalidPlane(format!(
                "expected {} samples for {}x{}, got {}",
                height * width,
                height,
                width,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPlane("non-finite sample".into()));
        }
        Ok(ImagePlane {
            height,
            width,
            samples,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImagePlane {
            height,
            width,
            samples: vec![value; height * width],
        }
    }

    /// Builds a plane from a per-pixel function of (row, col).
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut samples = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                samples.push(f(r, c));
            }
        }
        ImagePlane {
            height,
            width,
            samples,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.samples[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.samples[row * self.width + col] = value;
    }

    /// Clamped lookup used for edge-replicating borders.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    pub fn same_dims(&self, other: &ImagePlane) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ImagePlane {
        ImagePlane {
            height: self.height,
            width: self.width,
            samples: self.samples.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally sized planes.
    pub fn zip(&self, other: &ImagePlane, f: impl Fn(f64, f64) -> f64) -> Result<ImagePlane> {
        if !self.same_dims(other) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(ImagePlane {
            height: self.height,
            width: self.width,
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> ImagePlane {
        self.map(|v| v * factor)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }
}

/// Three equally sized RGB planes with samples in [0, 1].
#[derive(Debug, Clone)]
pub struct ColorImage {
    pub r: ImagePlane,
    pub g: ImagePlane,
    pub b: ImagePlane,
}

impl ColorImage {
    pub fn new(r: ImagePlane, g: ImagePlane, b: ImagePlane) -> Result<Self> {
        if !r.same_dims(&g) || !r.same_dims(&b) {
            return Err(Error::DimensionMismatch(
                "RGB planes must share dimensions".into(),
            ));
        }
        for plane in [&r, &g, &b] {
            if plane.samples().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidPlane("RGB sample outside [0, 1]".into()));
            }
        }
        Ok(ColorImage { r, g, b })
    }

    pub fn height(&self) -> usize {
        self.r.height()
    }

    pub fn width(&self) -> usize {
        self.r.width()
    }

    pub fn same_dims(&self, other: &ColorImage) -> bool {
        self.r.same_dims(&other.r)
    }

    /// Decodes an 8-bit PNG or BMP into [0, 1] RGB planes.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut r = Vec::with_capacity(w * h);
        let mut g = Vec::with_capacity(w * h);
        let mut b = Vec::with_capacity(w * h);
        for px in rgb.pixels() {
            r.push(px.0[0] as f64 / 255.0);
            g.push(px.0[1] as f64 / 255.0);
            b.push(px.0[2] as f64 / 255.0);
        }
        ColorImage::new(
            ImagePlane::new(h, w, r)?,
            ImagePlane::new(h, w, g)?,
            ImagePlane::new(h, w, b)?,
        )
    }
}

fn apply_3x3(img: &ColorImage, m: [[f64; 3]; 3]) -> (ImagePlane, ImagePlane, ImagePlane) {
    let (h, w) = (img.height(), img.width());
    let mut out = [
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
    ];
    for i in 0..h * w {
        let r = img.r.samples()[i];
        let g = img.g.samples()[i];
        let b = img.b.samples()[i];
        for (row, dst) in m.iter().zip(out.iter_mut()) {
            dst.push(row[0] * r + row[1] * g + row[2] * b);
        }
    }
    let [a, bb, c] = out;
    (
        ImagePlane {
            height: h,
            width: w,
            samples: a,
        },
        ImagePlane {
            height: h,
            width: w,
            samples: bb,
        },
        ImagePlane {
            height: h,
            width: w,
            samples: c,
        },
    )
}

/// NTSC YIQ transform. Y stays in [0, 1]; I and Q are signed chroma.
pub const YIQ_MATRIX: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [0.595716, -0.274453, -0.321263],
    [0.211456, -0.522591, 0.311135],
];

pub fn rgb_to_yiq(img: &ColorImage) -> (ImagePlane, ImagePlane, ImagePlane) {
    apply_3x3(img, YIQ_MATRIX)
}

/// LMN opponent transform in the VSI convention.
pub const LMN_MATRIX: [[f64; 3]; 3] = [
    [0.06, 0.63, 0.27],
    [0.30, 0.04, -0.35],
    [0.34, -0.60, 0.17],
];

pub fn rgb_to_lmn(img: &ColorImage) -> (ImagePlane, ImagePlane, ImagePlane) {
    apply_3x3(img, LMN_MATRIX)
}

/// Same-size cross-correlation with edge-replicated borders. Kernel
/// dimensions must be odd and no larger than the plane.
pub fn convolve(plane: &ImagePlane, kernel: &ImagePlane) -> Result<ImagePlane> {
    let (kh, kw) = (kernel.height(), kernel.width());
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidKernel(format!(
            "kernel dimensions must be odd, got {}x{}",
            kh, kw
        )));
    }
    if kh > plane.height() || kw > plane.width() {
        return Err(Error::InvalidKernel(format!(
            "kernel {}x{} larger than plane {}x{}",
            kh,
            kw,
            plane.height(),
            plane.width()
        )));
    }
    let (rh, rw) = (kh as isize / 2, kw as isize / 2);
    let out = ImagePlane::from_fn(plane.height(), plane.width(), |r, c| {
        let mut acc = 0.0;
        for kr in 0..kh {
            for kc in 0..kw {
                let pr = r as isize + kr as isize - rh;
                let pc = c as isize + kc as isize - rw;
                acc += kernel.get(kr, kc) * plane.get_clamped(pr, pc);
            }
        }
        acc
    });
    Ok(out)
}

/// Even-sized correlation used by the Haar stage: the kernel's top-left
/// element is aligned with the output pixel, edges replicated.
fn correlate_topleft(plane: &ImagePlane, kernel: &ImagePlane) -> ImagePlane {
    let (kh, kw) = (kernel.height(), kernel.width());
    let (off_r, off_c) = ((kh as isize - 1) / 2, (kw as isize - 1) / 2);
    ImagePlane::from_fn(plane.height(), plane.width(), |r, c| {
        let mut acc = 0.0;
        for kr in 0..kh {
            for kc in 0..kw {
                let pr = r as isize + kr as isize - off_r;
                let pc = c as isize + kc as isize - off_c;
                acc += kernel.get(kr, kc) * plane.get_clamped(pr, pc);
            }
        }
        acc
    })
}

/// Block-mean pooling; trailing rows/cols beyond the last full block drop.
pub fn avg_pool(plane: &ImagePlane, factor: usize) -> Result<ImagePlane> {
    if factor == 0 {
        return Err(Error::InvalidKernel("pooling factor must be >= 1".into()));
    }
    let oh = plane.height() / factor;
    let ow = plane.width() / factor;
    if oh == 0 && ow == 0 {
        return Err(Error::DimensionMismatch(format!(
            "pooling factor {} exceeds both dimensions of {}x{}",
            factor,
            plane.height(),
            plane.width()
        )));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::DimensionMismatch(format!(
            "pooling factor {} yields empty output from {}x{}",
            factor,
            plane.height(),
            plane.width()
        )));
    }
    let norm = 1.0 / (factor * factor) as f64;
    let out = ImagePlane::from_fn(oh, ow, |r, c| {
        let mut acc = 0.0;
        for dr in 0..factor {
            for dc in 0..factor {
                acc += plane.get(r * factor + dr, c * factor + dc);
            }
        }
        acc * norm
    });
    Ok(out)
}

/// Normalized Scharr pair (3, 10, 3 over 16). A unit ramp in x produces an
/// interior gradient magnitude of 2.
pub const SCHARR_GAIN: f64 = 2.0;

pub fn scharr_gradient_magnitude(plane: &ImagePlane) -> Result<ImagePlane> {
    if plane.height() < 3 || plane.width() < 3 {
        return Err(Error::DimensionMismatch(
            "Scharr gradient needs a plane of at least 3x3".into(),
        ));
    }
    let s = 1.0 / 16.0;
    let gx = ImagePlane::new(
        3,
        3,
        vec![
            -3.0 * s, 0.0, 3.0 * s, //
            -10.0 * s, 0.0, 10.0 * s, //
            -3.0 * s, 0.0, 3.0 * s,
        ],
    )?;
    let gy = ImagePlane::new(
        3,
        3,
        vec![
            -3.0 * s, -10.0 * s, -3.0 * s, //
            0.0, 0.0, 0.0, //
            3.0 * s, 10.0 * s, 3.0 * s,
        ],
    )?;
    let dx = convolve(plane, &gx)?;
    let dy = convolve(plane, &gy)?;
    dx.zip(&dy, |a, b| (a * a + b * b).sqrt())
}

/// Haar analysis kernel for `scale` in 1..=3 and `orientation` in 1..=3
/// (horizontal, vertical, diagonal). Size 2^s with entries ±1/2^s, built by
/// dyadic upsampling of the 2x2 base kernels.
pub fn haar_kernel(scale: u8, orientation: u8) -> Result<ImagePlane> {
    if !(1..=3).contains(&scale) || !(1..=3).contains(&orientation) {
        return Err(Error::InvalidKernel(format!(
            "haar scale/orientation out of range: ({}, {})",
            scale, orientation
        )));
    }
    let n = 1usize << scale;
    let amp = 1.0 / n as f64;
    let half = n / 2;
    let out = ImagePlane::from_fn(n, n, |r, c| {
        let sign = match orientation {
            1 => {
                // horizontal kernel: responds to variation along x
                if c < half {
                    1.0
                } else {
                    -1.0
                }
            }
            2 => {
                if r < half {
                    1.0
                } else {
                    -1.0
                }
            }
            _ => {
                if (r < half) == (c < half) {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        sign * amp
    });
    Ok(out)
}

/// Undecimated Haar coefficient map (full-resolution correlation).
pub fn haar_coeffs_full(plane: &ImagePlane, scale: u8, orientation: u8) -> Result<ImagePlane> {
    let kernel = haar_kernel(scale, orientation)?;
    if kernel.height() > plane.height() || kernel.width() > plane.width() {
        return Err(Error::DimensionMismatch(format!(
            "plane {}x{} too small for scale-{} haar kernel",
            plane.height(),
            plane.width(),
            scale
        )));
    }
    Ok(correlate_topleft(plane, &kernel))
}

/// Haar coefficient map subsampled by 2^(scale-1).
pub fn haar_coeffs(plane: &ImagePlane, scale: u8, orientation: u8) -> Result<ImagePlane> {
    let full = haar_coeffs_full(plane, scale, orientation)?;
    let step = 1usize << (scale - 1);
    let oh = (full.height() + step - 1) / step;
    let ow = (full.width() + step - 1) / step;
    if oh == 0 || ow == 0 {
        return Err(Error::DimensionMismatch(
            "subsampled haar output would be empty".into(),
        ));
    }
    Ok(ImagePlane::from_fn(oh, ow, |r, c| {
        full.get(r * step, c * step)
    }))
}
