//! Closed-form evaluators for the two published evolved metrics and the
//! HaarPSI baseline score used in the comparison tables.

use crate::aggd::FeatureVector;
use crate::error::{Error, Result};
use crate::features;
use crate::image::{avg_pool, haar_coeffs_full, rgb_to_yiq, ColorImage, ImagePlane};

/// Logistic steepness and similarity constant of the HaarPSI score.
pub const HAARPSI_ALPHA: f64 = 4.2;
pub const HAARPSI_C: f64 = 30.0;

fn psqrt(v: f64) -> f64 {
    v.abs().sqrt()
}

/// Inputs of the full evolved metric, bound by feature name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvoFullInputs {
    /// std of the VSI gradient-similarity map
    pub sigma_sgm: f64,
    /// AGGD scale of the gradient-similarity map
    pub aggd_scale_sgm: f64,
    /// mean of the reference gradient-magnitude map
    pub grad_ref: f64,
    /// mean chroma KL divergence
    pub mu_delta_c: f64,
    /// mean of the averaged chromatic similarity map
    pub mu_smn: f64,
    /// mean of the pointwise-max phase congruency map
    pub mu_pcmax: f64,
    /// std of the averaged chromatic similarity map
    pub sigma_smn: f64,
}

/// Inputs of the subset evolved metric, bound by feature name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvoSubsetInputs {
    /// coefficient of variation sigma_sgm / mu_sgm
    pub omega_cv: f64,
    pub grad_ref: f64,
    /// chromatic spread (std of the averaged chromatic similarity map)
    pub sigma_c: f64,
    /// chromatic-structural divergence mu_smn - mu_sgm
    pub delta_cs: f64,
}

/// Q = s·[b + g·(sqrt(k) + m - p) + sqrt(c² + s)] + s with protected sqrt,
/// where s, b, g, k, m, p, c are the seven bound statistics.
pub fn evoiqa_full(v: &EvoFullInputs) -> f64 {
    v.sigma_sgm
        * (v.aggd_scale_sgm
            + v.grad_ref * (psqrt(v.mu_delta_c) + v.mu_smn - v.mu_pcmax)
            + psqrt(v.sigma_smn * v.sigma_smn + v.sigma_sgm))
        + v.sigma_sgm
}

/// Q = w·g·(c - sqrt(d)·w)² + w with protected sqrt on the divergence.
pub fn evoiqa_subset(v: &EvoSubsetInputs) -> f64 {
    let inner = v.sigma_c - psqrt(v.delta_cs) * v.omega_cv;
    v.omega_cv * v.grad_ref * inner * inner + v.omega_cv
}

/// Binds the canonical 45-entry feature vector onto both metric input
/// records. Total by construction: every field is populated by name.
pub fn bind_features(fv: &FeatureVector) -> Result<(EvoFullInputs, EvoSubsetInputs)> {
    let sigma_sgm = fv.by_name("vsi.sgm.sigma")?;
    let mu_sgm = fv.by_name("vsi.sgm.mu")?;
    let full = EvoFullInputs {
        sigma_sgm,
        aggd_scale_sgm: fv.by_name("vsi.sgm.scale")?,
        grad_ref: fv.by_name("ref.grad.mu")?,
        mu_delta_c: fv.by_name("chroma.kl.mu")?,
        mu_smn: fv.by_name("vsi.smn.mu")?,
        mu_pcmax: fv.by_name("pc.max.mu")?,
        sigma_smn: fv.by_name("vsi.smn.sigma")?,
    };
    let omega_cv = if mu_sgm.abs() > crate::gp::PDIV_THRESHOLD {
        sigma_sgm / mu_sgm
    } else {
        1.0
    };
    let subset = EvoSubsetInputs {
        omega_cv,
        grad_ref: full.grad_ref,
        sigma_c: full.sigma_smn,
        delta_cs: full.mu_smn - mu_sgm,
    };
    Ok((full, subset))
}

/// Expression strings of the built-in metrics, for CLI display.
pub const EVOIQA_FULL_EXPR: &str = "(vsi.sgm.sigma * ((vsi.sgm.scale + (ref.grad.mu * ((psqrt(chroma.kl.mu) + vsi.smn.mu) - pc.max.mu))) + psqrt(((vsi.smn.sigma * vsi.smn.sigma) + vsi.sgm.sigma)))) + vsi.sgm.sigma";
pub const EVOIQA_SUBSET_EXPR: &str = "((omega_cv * ref.grad.mu) * ((vsi.smn.sigma - (psqrt(delta_cs) * omega_cv)) * (vsi.smn.sigma - (psqrt(delta_cs) * omega_cv)))) + omega_cv  [omega_cv = pdiv(vsi.sgm.sigma, vsi.sgm.mu), delta_cs = (vsi.smn.mu - vsi.sgm.mu)]";

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-HAARPSI_ALPHA * x).exp())
}

fn inverse_logistic(x: f64) -> f64 {
    (x / (1.0 - x)).ln() / HAARPSI_ALPHA
}

fn similarity(a: f64, b: f64) -> f64 {
    (2.0 * a * b + HAARPSI_C) / (a * a + b * b + HAARPSI_C)
}

/// Reference HaarPSI: 2x2 pre-subsampling, undecimated Haar magnitudes at
/// scales 1-2 with a scale-3 weight map per orientation, a pooled chroma
/// term, logistic mapping and inverse-logistic pooling, squared.
pub fn haarpsi_score(reference: &ColorImage, distorted: &ColorImage) -> Result<f64> {
    if !reference.same_dims(distorted) {
        return Err(Error::DimensionMismatch(
            "reference and distorted images must match".into(),
        ));
    }
    let (y_r, i_r, q_r) = rgb_to_yiq(reference);
    let (y_d, i_d, q_d) = rgb_to_yiq(distorted);
    // work on a 0-255 scale, matching the reference constants
    let to255 = |p: &ImagePlane| p.scale(255.0);
    let sub = |p: &ImagePlane| avg_pool(&to255(p), 2);
    let y_r = sub(&y_r)?;
    let y_d = sub(&y_d)?;
    let i_r = sub(&i_r)?;
    let i_d = sub(&i_d)?;
    let q_r = sub(&q_r)?;
    let q_d = sub(&q_d)?;

    let n = y_r.height() * y_r.width();
    // luminance: horizontal and vertical orientations
    let mut local_sim = vec![vec![0.0; n]; 3];
    let mut weights = vec![vec![0.0; n]; 3];
    for (k, orientation) in [(0usize, 1u8), (1, 2)] {
        let c1_r = haar_coeffs_full(&y_r, 1, orientation)?.map(f64::abs);
        let c1_d = haar_coeffs_full(&y_d, 1, orientation)?.map(f64::abs);
        let c2_r = haar_coeffs_full(&y_r, 2, orientation)?.map(f64::abs);
        let c2_d = haar_coeffs_full(&y_d, 2, orientation)?.map(f64::abs);
        let c3_r = haar_coeffs_full(&y_r, 3, orientation)?.map(f64::abs);
        let c3_d = haar_coeffs_full(&y_d, 3, orientation)?.map(f64::abs);
        for i in 0..n {
            let s1 = similarity(c1_r.samples()[i], c1_d.samples()[i]);
            let s2 = similarity(c2_r.samples()[i], c2_d.samples()[i]);
            local_sim[k][i] = 0.5 * (s1 + s2);
            weights[k][i] = c3_r.samples()[i].max(c3_d.samples()[i]);
        }
    }
    // chroma term: 2x2 mean-filtered I and Q similarities
    let mean2 = |p: &ImagePlane| haar_mean_filter(p);
    let (fi_r, fi_d) = (mean2(&i_r), mean2(&i_d));
    let (fq_r, fq_d) = (mean2(&q_r), mean2(&q_d));
    for i in 0..n {
        let si = similarity(fi_r.samples()[i].abs(), fi_d.samples()[i].abs());
        let sq = similarity(fq_r.samples()[i].abs(), fq_d.samples()[i].abs());
        local_sim[2][i] = 0.5 * (si + sq);
        weights[2][i] = 0.5 * (weights[0][i] + weights[1][i]);
    }

    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..3 {
        for i in 0..n {
            num += logistic(local_sim[k][i]) * weights[k][i];
            den += weights[k][i];
        }
    }
    if den <= 0.0 {
        // structureless pair: every similarity saturates
        return Ok(1.0);
    }
    let pooled = inverse_logistic(num / den);
    Ok((pooled * pooled).clamp(0.0, 1.0))
}

/// 2x2 box mean aligned like the Haar kernels.
fn haar_mean_filter(p: &ImagePlane) -> ImagePlane {
    ImagePlane::from_fn(p.height(), p.width(), |r, c| {
        let mut acc = 0.0;
        for dr in 0..2isize {
            for dc in 0..2isize {
                acc += p.get_clamped(r as isize + dr, c as isize + dc);
            }
        }
        acc / 4.0
    })
}

/// Gaussian blur used by desk-scale distortion series.
pub fn gaussian_blur(plane: &ImagePlane, sigma: f64) -> Result<ImagePlane> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let size = 2 * radius + 1;
    let mut kernel = ImagePlane::from_fn(size, size, |r, c| {
        let dr = r as f64 - radius as f64;
        let dc = c as f64 - radius as f64;
        (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
    });
    let total: f64 = kernel.samples().iter().sum();
    kernel = kernel.map(|v| v / total);
    crate::image::convolve(plane, &kernel)
}

/// Chroma saturation scaling in YIQ: factor 1 is identity, 0 is grayscale,
/// above 1 oversaturates. Output channels are clamped back to [0, 1].
pub fn scale_saturation(img: &ColorImage, factor: f64) -> Result<ColorImage> {
    let (y, i, q) = rgb_to_yiq(img);
    let i = i.scale(factor);
    let q = q.scale(factor);
    // invert the YIQ matrix analytically
    let m = crate::image::YIQ_MATRIX;
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv = [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
        ],
    ];
    let channel = |row: [f64; 3]| -> ImagePlane {
        ImagePlane::from_fn(y.height(), y.width(), |r, c| {
            let idx = r * y.width() + c;
            (row[0] * y.samples()[idx] + row[1] * i.samples()[idx] + row[2] * q.samples()[idx])
                .clamp(0.0, 1.0)
        })
    };
    ColorImage::new(channel(inv[0]), channel(inv[1]), channel(inv[2]))
}

/// Convenience: full per-pair scores of the built-in metrics from images.
pub fn score_pair_builtin(
    reference: &ColorImage,
    distorted: &ColorImage,
) -> Result<(f64, f64, f64)> {
    let maps = features::extract_all(reference, distorted)?;
    let fv = crate::aggd::featurize(&maps)?;
    let (full, subset) = bind_features(&fv)?;
    Ok((
        evoiqa_full(&full),
        evoiqa_subset(&subset),
        haarpsi_score(reference, distorted)?,
    ))
}
