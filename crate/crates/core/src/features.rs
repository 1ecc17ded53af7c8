//! Perceptual map extraction for one (reference, distorted) pair: the
//! coarse-scale Haar weight map, chrominance KL divergences, phase
//! congruency and its similarity, the VIF gain map, and the VSI gradient
//! and chromatic similarity maps.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::{
    avg_pool, haar_coeffs, rgb_to_lmn, rgb_to_yiq, scharr_gradient_magnitude, ColorImage,
    ImagePlane,
};

/// Stability constant of the phase-congruency similarity ratio.
pub const PC_T1: f64 = 0.85;
/// Denominator floor in the phase-congruency ratio.
pub const PC_EPSILON: f64 = 1e-4;
/// Log-Gabor bank geometry.
pub const PC_SCALES: usize = 4;
pub const PC_ORIENTATIONS: usize = 4;
pub const PC_MIN_WAVELENGTH: f64 = 6.0;
pub const PC_SCALING: f64 = 2.0;
pub const PC_SIGMA_ONF: f64 = 0.55;
const PC_DTHETA_ON_SIGMA: f64 = 1.2;

/// VSI stability constants on a 0-255 luminance scale.
pub const VSI_C2: f64 = 386.0;
pub const VSI_C3: f64 = 130.0;
pub const VSI_SMN_FLOOR: f64 = 1e-6;

/// VIF gain-map regularizer.
pub const VIF_EPSILON: f64 = 1e-10;
pub const VIF_SCALES: usize = 4;

/// Chroma KL histogram parameters.
pub const KL_BINS: usize = 64;
pub const KL_SMOOTHING: f64 = 1e-6;

/// KL divergences between pooled chrominance channel histograms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChromaKl {
    pub d_kl_i: f64,
    pub d_kl_q: f64,
    pub mu_delta_c: f64,
}

/// All perceptual maps extracted from one (reference, distorted) pair.
#[derive(Debug, Clone)]
pub struct MapSet {
    pub haar_weight: ImagePlane,
    pub pc_sim: ImagePlane,
    pub pc_max: ImagePlane,
    pub vif_gain: ImagePlane,
    pub vsi_sgm: ImagePlane,
    pub vsi_smn: ImagePlane,
    pub ref_grad: ImagePlane,
    pub chroma_kl: ChromaKl,
}

fn require_same_dims(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Coarse-scale structural weight map: pointwise max of the six scale-3
/// Haar coefficient magnitudes of the two luminance planes.
pub fn haarpsi_weight_map(ref_y: &ImagePlane, dist_y: &ImagePlane) -> Result<ImagePlane> {
    require_same_dims(ref_y, dist_y)?;
    let mut w: Option<ImagePlane> = None;
    for plane in [ref_y, dist_y] {
        for orient in 1..=3u8 {
            let mag = haar_coeffs(plane, 3, orient)?.map(f64::abs);
            w = Some(match w {
                None => mag,
                Some(acc) => acc.zip(&mag, f64::max)?,
            });
        }
    }
    Ok(w.expect("six coefficient maps"))
}

fn histogram_pdf(samples: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut counts = vec![KL_SMOOTHING; KL_BINS];
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for &v in samples {
        let bin = (((v - lo) / span) * KL_BINS as f64) as usize;
        counts[bin.min(KL_BINS - 1)] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    for c in counts.iter_mut() {
        *c /= total;
    }
    counts
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum()
}

fn pooled_channel_kl(ref_c: &ImagePlane, dist_c: &ImagePlane) -> Result<f64> {
    require_same_dims(ref_c, dist_c)?;
    let a = avg_pool(&ref_c.map(f64::abs), 2)?;
    let b = avg_pool(&dist_c.map(f64::abs), 2)?;
    let lo = a
        .samples()
        .iter()
        .chain(b.samples())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = a
        .samples()
        .iter()
        .chain(b.samples())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let p = histogram_pdf(a.samples(), lo, hi);
    let q = histogram_pdf(b.samples(), lo, hi);
    // Additive smoothing keeps the divergence finite; clamp tiny negative
    // round-off so the result honors D_KL >= 0.
    Ok(kl_divergence(&p, &q).max(0.0))
}

/// KL divergence between 2x2-pooled absolute chrominance histograms,
/// per channel, over a shared 64-bin grid.
pub fn chroma_kl(
    ref_i: &ImagePlane,
    ref_q: &ImagePlane,
    dist_i: &ImagePlane,
    dist_q: &ImagePlane,
) -> Result<ChromaKl> {
    let d_kl_i = pooled_channel_kl(ref_i, dist_i)?;
    let d_kl_q = pooled_channel_kl(ref_q, dist_q)?;
    Ok(ChromaKl {
        d_kl_i,
        d_kl_q,
        mu_delta_c: 0.5 * (d_kl_i + d_kl_q),
    })
}

fn fft2(data: &mut Vec<Complex<f64>>, h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for r in 0..h {
        row_fft.process(&mut data[r * w..(r + 1) * w]);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        for v in data.iter_mut() {
            *v *= norm;
        }
    }
}

fn fft_freqs(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i <= n / 2 {
                i as f64 / n as f64
            } else {
                i as f64 / n as f64 - 1.0
            }
        })
        .collect()
}

struct LogGaborBank {
    height: usize,
    width: usize,
    // filters[orientation][scale], frequency-domain, real-valued
    filters: Vec<Vec<Vec<f64>>>,
}

fn build_log_gabor_bank(h: usize, w: usize) -> LogGaborBank {
    let fy = fft_freqs(h);
    let fx = fft_freqs(w);
    let n = h * w;
    let mut radius = vec![0.0; n];
    let mut theta = vec![0.0; n];
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (fx[c], fy[r]);
            radius[r * w + c] = (u * u + v * v).sqrt();
            theta[r * w + c] = (-v).atan2(u);
        }
    }
    radius[0] = 1.0; // avoid log(0) at DC; the DC gain is zeroed below

    // low-pass taper against frequency-domain wraparound
    let lowpass: Vec<f64> = radius
        .iter()
        .map(|&r| 1.0 / (1.0 + (r / 0.45).powi(30)))
        .collect();

    let log_sigma = PC_SIGMA_ONF.ln();
    let theta_sigma = std::f64::consts::PI / PC_ORIENTATIONS as f64 / PC_DTHETA_ON_SIGMA;

    let mut radial = Vec::with_capacity(PC_SCALES);
    for s in 0..PC_SCALES {
        let wavelength = PC_MIN_WAVELENGTH * PC_SCALING.powi(s as i32);
        let f0 = 1.0 / wavelength;
        let mut filt: Vec<f64> = radius
            .iter()
            .zip(&lowpass)
            .map(|(&r, &lp)| {
                let g = (-((r / f0).ln().powi(2)) / (2.0 * log_sigma * log_sigma)).exp();
                g * lp
            })
            .collect();
        filt[0] = 0.0;
        radial.push(filt);
    }

    let mut filters = Vec::with_capacity(PC_ORIENTATIONS);
    for o in 0..PC_ORIENTATIONS {
        let angle = o as f64 * std::f64::consts::PI / PC_ORIENTATIONS as f64;
        let spread: Vec<f64> = theta
            .iter()
            .map(|&t| {
                let ds = t.sin() * angle.cos() - t.cos() * angle.sin();
                let dc = t.cos() * angle.cos() + t.sin() * angle.sin();
                let dtheta = ds.atan2(dc).abs();
                (-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma)).exp()
            })
            .collect();
        let mut per_scale = Vec::with_capacity(PC_SCALES);
        for filt in radial.iter() {
            per_scale.push(
                filt.iter()
                    .zip(&spread)
                    .map(|(&a, &b)| a * b)
                    .collect::<Vec<f64>>(),
            );
        }
        filters.push(per_scale);
    }
    LogGaborBank {
        height: h,
        width: w,
        filters,
    }
}

/// Phase congruency from a log-Gabor quadrature bank:
/// PC(x) = sum_o E_o(x) / (sum_{o,s} A_{o,s}(x) + eps), bounded in [0, 1].
pub fn phase_congruency(plane: &ImagePlane) -> Result<ImagePlane> {
    if plane.height() < 32 || plane.width() < 32 {
        return Err(Error::DimensionMismatch(
            "phase congruency needs a plane of at least 32x32".into(),
        ));
    }
    let (h, w) = (plane.height(), plane.width());
    let bank = build_log_gabor_bank(h, w);
    debug_assert_eq!((bank.height, bank.width), (h, w));

    let mut spectrum: Vec<Complex<f64>> = plane
        .samples()
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .collect();
    fft2(&mut spectrum, h, w, false);

    let n = h * w;
    let mut energy_total = vec![0.0; n];
    let mut amplitude_total = vec![0.0; n];
    let mut response = vec![Complex::new(0.0, 0.0); n];
    for per_scale in &bank.filters {
        let mut sum_even = vec![0.0; n];
        let mut sum_odd = vec![0.0; n];
        for filt in per_scale {
            for (dst, (src, &f)) in response.iter_mut().zip(spectrum.iter().zip(filt.iter())) {
                *dst = src * f;
            }
            fft2(&mut response, h, w, true);
            for i in 0..n {
                let (e, o) = (response[i].re, response[i].im);
                sum_even[i] += e;
                sum_odd[i] += o;
                amplitude_total[i] += (e * e + o * o).sqrt();
            }
        }
        for i in 0..n {
            energy_total[i] += (sum_even[i] * sum_even[i] + sum_odd[i] * sum_odd[i]).sqrt();
        }
    }
    let samples: Vec<f64> = energy_total
        .iter()
        .zip(&amplitude_total)
        .map(|(&e, &a)| (e / (a + PC_EPSILON)).clamp(0.0, 1.0))
        .collect();
    ImagePlane::new(h, w, samples)
}

/// Stability-constrained similarity of two phase-congruency maps.
pub fn pc_similarity(pc_ref: &ImagePlane, pc_dist: &ImagePlane) -> Result<ImagePlane> {
    pc_ref.zip(pc_dist, |a, b| {
        (2.0 * a * b + PC_T1) / (a * a + b * b + PC_T1)
    })
}

/// Pointwise maximum of the two phase-congruency maps.
pub fn pc_max(pc_ref: &ImagePlane, pc_dist: &ImagePlane) -> Result<ImagePlane> {
    pc_ref.zip(pc_dist, f64::max)
}

fn gaussian_kernel(size: usize) -> ImagePlane {
    let sd = size as f64 / 5.0;
    let half = (size / 2) as isize;
    let mut k = ImagePlane::from_fn(size, size, |r, c| {
        let dr = r as isize - half;
        let dc = c as isize - half;
        (-((dr * dr + dc * dc) as f64) / (2.0 * sd * sd)).exp()
    });
    let total: f64 = k.samples().iter().sum();
    k = k.map(|v| v / total);
    k
}

fn downsample_by_2(plane: &ImagePlane) -> ImagePlane {
    let oh = (plane.height() + 1) / 2;
    let ow = (plane.width() + 1) / 2;
    ImagePlane::from_fn(oh, ow, |r, c| plane.get(2 * r, 2 * c))
}

/// Deterministic gain map g = sigma_xy / (sigma_x^2 + eps) at the fourth
/// level of a Gaussian pyramid, window size 2^(5-s)+1 per level.
pub fn vif_gain_map(ref_y: &ImagePlane, dist_y: &ImagePlane) -> Result<ImagePlane> {
    require_same_dims(ref_y, dist_y)?;
    let mut x = ref_y.clone();
    let mut y = dist_y.clone();
    for scale in 1..=VIF_SCALES {
        let win = gaussian_kernel((1 << (5 - scale)) + 1);
        if win.height() > x.height() || win.width() > x.width() {
            return Err(Error::DimensionMismatch(format!(
                "plane too small for a {}-level VIF pyramid",
                VIF_SCALES
            )));
        }
        if scale > 1 {
            x = downsample_by_2(&crate::image::convolve(&x, &win)?);
            y = downsample_by_2(&crate::image::convolve(&y, &win)?);
        }
        if scale == VIF_SCALES {
            let mu_x = crate::image::convolve(&x, &win)?;
            let mu_y = crate::image::convolve(&y, &win)?;
            let xx = crate::image::convolve(&x.zip(&x, |a, b| a * b)?, &win)?;
            let xy = crate::image::convolve(&x.zip(&y, |a, b| a * b)?, &win)?;
            let n = x.height() * x.width();
            let mut g = Vec::with_capacity(n);
            for i in 0..n {
                let sigma_x_sq = (xx.samples()[i] - mu_x.samples()[i] * mu_x.samples()[i]).max(0.0);
                let sigma_xy = xy.samples()[i] - mu_x.samples()[i] * mu_y.samples()[i];
                g.push(sigma_xy / (sigma_x_sq + VIF_EPSILON));
            }
            return ImagePlane::new(x.height(), x.width(), g);
        }
    }
    unreachable!("loop returns at the final scale")
}

fn stability_ratio(a: &ImagePlane, b: &ImagePlane, c: f64) -> Result<ImagePlane> {
    a.zip(b, move |x, y| (2.0 * x * y + c) / (x * x + y * y + c))
}

/// VSI structural and chromatic similarity maps plus the reference
/// gradient-magnitude plane. Planes are rescaled to 0-255 before the
/// stability constants apply.
pub fn vsi_maps(
    reference: &ColorImage,
    distorted: &ColorImage,
) -> Result<(ImagePlane, ImagePlane, ImagePlane)> {
    if !reference.same_dims(distorted) {
        return Err(Error::DimensionMismatch(
            "reference and distorted images must match".into(),
        ));
    }
    let (l_r, m_r, n_r) = rgb_to_lmn(reference);
    let (l_d, m_d, n_d) = rgb_to_lmn(distorted);
    let factor = ((l_r.height().min(l_r.width()) as f64 / 256.0).round() as usize).max(1);
    let down = |p: &ImagePlane| -> Result<ImagePlane> {
        let pooled = if factor > 1 { avg_pool(p, factor)? } else { p.clone() };
        Ok(pooled.scale(255.0))
    };
    let (l_r, m_r, n_r) = (down(&l_r)?, down(&m_r)?, down(&n_r)?);
    let (l_d, m_d, n_d) = (down(&l_d)?, down(&m_d)?, down(&n_d)?);

    let ref_grad = scharr_gradient_magnitude(&l_r)?;
    let dist_grad = scharr_gradient_magnitude(&l_d)?;
    let sgm = stability_ratio(&ref_grad, &dist_grad, VSI_C2)?;
    let s_m = stability_ratio(&m_r, &m_d, VSI_C3)?;
    let s_n = stability_ratio(&n_r, &n_d, VSI_C3)?;
    // Opposite-signed chroma pairs can push the ratio below zero; floor it
    // so the similarity stays in (0, 1].
    let smn = s_m.zip(&s_n, |a, b| (0.5 * (a + b)).clamp(VSI_SMN_FLOOR, 1.0))?;
    Ok((sgm, smn, ref_grad))
}

/// Runs every extractor for one pair: the YIQ path feeds the Haar weight
/// map and chroma KL, the luminance path feeds phase congruency and VIF,
/// and the LMN path feeds the VSI maps.
pub fn extract_all(reference: &ColorImage, distorted: &ColorImage) -> Result<MapSet> {
    if !reference.same_dims(distorted) {
        return Err(Error::DimensionMismatch(
            "reference and distorted images must match".into(),
        ));
    }
    if reference.height() < 64 || reference.width() < 64 {
        return Err(Error::DimensionMismatch(
            "extract_all needs images of at least 64x64".into(),
        ));
    }
    let (y_r, i_r, q_r) = rgb_to_yiq(reference);
    let (y_d, i_d, q_d) = rgb_to_yiq(distorted);

    // HaarPSI preprocessing: 2x2 average-pool subsample before the wavelet stage.
    let y_r_sub = avg_pool(&y_r, 2)?;
    let y_d_sub = avg_pool(&y_d, 2)?;
    let haar_weight = haarpsi_weight_map(&y_r_sub, &y_d_sub)?;

    let chroma = chroma_kl(&i_r, &q_r, &i_d, &q_d)?;

    let pc_r = phase_congruency(&y_r)?;
    let pc_d = phase_congruency(&y_d)?;
    let pc_sim_map = pc_similarity(&pc_r, &pc_d)?;
    let pc_max_map = pc_max(&pc_r, &pc_d)?;

    let vif_gain = vif_gain_map(&y_r, &y_d)?;
    let (vsi_sgm, vsi_smn, ref_grad) = vsi_maps(reference, distorted)?;

    Ok(MapSet {
        haar_weight,
        pc_sim: pc_sim_map,
        pc_max: pc_max_map,
        vif_gain,
        vsi_sgm,
        vsi_smn,
        ref_grad,
        chroma_kl: chroma,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::image::haar_coeffs;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut impl Rng, h: usize, w: usize) -> ImagePlane {
        ImagePlane::from_fn(h, w, |_, _| rng.gen::<f64>())
    }

    fn random_color(rng: &mut impl Rng, h: usize, w: usize) -> ColorImage {
        ColorImage::new(
            random_plane(rng, h, w),
            random_plane(rng, h, w),
            random_plane(rng, h, w),
        )
        .unwrap()
    }

    /// Smooth synthetic texture that behaves like a natural image.
    pub(crate) fn textured_color(seed: u64, h: usize, w: usize) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                (
                    rng.gen::<f64>() * 0.4 + 0.05,
                    rng.gen::<f64>() * 0.4 + 0.05,
                    rng.gen::<f64>() * std::f64::consts::TAU,
                    rng.gen::<f64>() * 0.1,
                )
            })
            .collect();
        let plane = |offset: f64| {
            ImagePlane::from_fn(h, w, |r, c| {
                let mut v = 0.5;
                for &(fr, fc, ph, amp) in &phases {
                    v += (amp + 0.03)
                        * (fr * r as f64 + fc * c as f64 * (1.0 + offset) + ph).sin();
                }
                v.clamp(0.0, 1.0)
            })
        };
        ColorImage::new(plane(0.0), plane(0.02), plane(-0.02)).unwrap()
    }

    #[test]
    fn weight_map_of_constant_pair_is_zero() {
        let c = ImagePlane::filled(32, 32, 0.4);
        let w = haarpsi_weight_map(&c, &c).unwrap();
        assert!(w.samples().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn weight_map_of_identical_pair_equals_orientation_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = random_plane(&mut rng, 32, 32);
        let w = haarpsi_weight_map(&y, &y).unwrap();
        let mut expect = haar_coeffs(&y, 3, 1).unwrap().map(f64::abs);
        for orient in 2..=3u8 {
            expect = expect
                .zip(&haar_coeffs(&y, 3, orient).unwrap().map(f64::abs), f64::max)
                .unwrap();
        }
        assert_eq!(w, expect);
    }

    #[test]
    fn weight_map_matches_elementwise_max_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_plane(&mut rng, 32, 32);
        let b = random_plane(&mut rng, 32, 32);
        let w = haarpsi_weight_map(&a, &b).unwrap();
        let mut expect: Option<ImagePlane> = None;
        for plane in [&a, &b] {
            for orient in 1..=3u8 {
                let mag = haar_coeffs(plane, 3, orient).unwrap().map(f64::abs);
                expect = Some(match expect {
                    None => mag,
                    Some(acc) => acc.zip(&mag, f64::max).unwrap(),
                });
            }
        }
        assert_eq!(w, expect.unwrap());
        assert!(w.samples().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn chroma_kl_of_identical_pair_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let i = random_plane(&mut rng, 64, 64).map(|v| v - 0.5);
        let q = random_plane(&mut rng, 64, 64).map(|v| v - 0.5);
        let kl = chroma_kl(&i, &q, &i, &q).unwrap();
        assert!(kl.d_kl_i.abs() < 1e-9);
        assert!(kl.d_kl_q.abs() < 1e-9);
        assert!(kl.mu_delta_c.abs() < 1e-9);
    }

    #[test]
    fn chroma_kl_is_nonnegative_and_mean_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let a = random_plane(&mut rng, 64, 64).map(|v| v - 0.5);
            let b = random_plane(&mut rng, 64, 64).map(|v| v - 0.5);
            let c = random_plane(&mut rng, 64, 64).map(|v| v * 0.3 - 0.1);
            let d = random_plane(&mut rng, 64, 64).map(|v| v * 0.3 - 0.2);
            let kl = chroma_kl(&a, &b, &c, &d).unwrap();
            assert!(kl.d_kl_i >= 0.0 && kl.d_kl_q >= 0.0);
            assert_abs_diff_eq!(
                kl.mu_delta_c,
                0.5 * (kl.d_kl_i + kl.d_kl_q),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn chroma_kl_matches_direct_histogram_oracle() {
        // Gaussian-ish vs shifted samples via smooth deterministic fields.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ref_i = random_plane(&mut rng, 64, 64).map(|v| (v - 0.5) * 0.4);
        let dist_i = ref_i.map(|v| v + 0.07);
        let ref_q = random_plane(&mut rng, 64, 64).map(|v| (v - 0.5) * 0.2);
        let dist_q = ref_q.map(|v| v * 0.6);
        let got = chroma_kl(&ref_i, &ref_q, &dist_i, &dist_q).unwrap();

        let oracle = |x: &ImagePlane, y: &ImagePlane| -> f64 {
            let a = avg_pool(&x.map(f64::abs), 2).unwrap();
            let b = avg_pool(&y.map(f64::abs), 2).unwrap();
            let all: Vec<f64> = a.samples().iter().chain(b.samples()).cloned().collect();
            let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let hist = |s: &[f64]| {
                let mut h = vec![KL_SMOOTHING; KL_BINS];
                for &v in s {
                    let mut bin = (((v - lo) / (hi - lo)) * KL_BINS as f64) as usize;
                    if bin >= KL_BINS {
                        bin = KL_BINS - 1;
                    }
                    h[bin] += 1.0;
                }
                let t: f64 = h.iter().sum();
                h.into_iter().map(|v| v / t).collect::<Vec<_>>()
            };
            let p = hist(a.samples());
            let q = hist(b.samples());
            p.iter()
                .zip(&q)
                .map(|(&pi, &qi)| pi * (pi / qi).ln())
                .sum()
        };
        assert_abs_diff_eq!(got.d_kl_i, oracle(&ref_i, &dist_i), epsilon = 1e-12);
        assert_abs_diff_eq!(got.d_kl_q, oracle(&ref_q, &dist_q), epsilon = 1e-12);
    }

    #[test]
    fn pc_of_constant_plane_is_zero() {
        let pc = phase_congruency(&ImagePlane::filled(32, 32, 0.5)).unwrap();
        assert!(pc.samples().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn pc_is_contrast_invariant() {
        let img = textured_color(20, 64, 64);
        let (y, _, _) = rgb_to_yiq(&img);
        let pc_a = phase_congruency(&y).unwrap();
        let pc_b = phase_congruency(&y.scale(0.5)).unwrap();
        let mean_abs_diff: f64 = pc_a
            .samples()
            .iter()
            .zip(pc_b.samples())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / pc_a.samples().len() as f64;
        assert!(
            mean_abs_diff < 1e-3,
            "contrast invariance violated: {}",
            mean_abs_diff
        );
    }

    #[test]
    fn pc_step_edge_peaks_on_edge_matches_1d_energy_oracle() {
        let plane = ImagePlane::from_fn(64, 64, |_, c| if c < 32 { 0.2 } else { 0.8 });
        let pc = phase_congruency(&plane).unwrap();
        let row = 32;
        let edge = pc.get(row, 31).max(pc.get(row, 32));
        let far = pc.get(row, 8).max(pc.get(row, 55));
        // without a noise threshold, flat regions keep a nonzero floor from
        // the wide low-frequency filters; the peak must still sit on the step
        assert!(edge > 1.2 * far, "edge {} vs far {}", edge, far);
        assert!(edge > 0.9, "edge {}", edge);

        // 1-D quadrature-pair oracle: a single log-Gabor scale along the
        // center row must also peak at the step.
        let n = 64usize;
        let signal: Vec<f64> = (0..n).map(|c| plane.get(row, c)).collect();
        let mut spec: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut spec);
        let freqs = fft_freqs(n);
        let f0 = 1.0 / PC_MIN_WAVELENGTH;
        let log_sigma = PC_SIGMA_ONF.ln();
        for (i, v) in spec.iter_mut().enumerate() {
            let r = freqs[i].abs();
            let g = if i == 0 || freqs[i] <= 0.0 {
                0.0 // analytic signal: positive frequencies only
            } else {
                (-(r / f0).ln().powi(2) / (2.0 * log_sigma * log_sigma)).exp()
            };
            *v *= 2.0 * g;
        }
        planner.plan_fft_inverse(n).process(&mut spec);
        let energy: Vec<f64> = spec.iter().map(|v| v.norm() / n as f64).collect();
        let edge_energy = energy[31].max(energy[32]);
        let far_energy = energy[8].max(energy[55]);
        assert!(edge_energy > 2.0 * far_energy);
    }

    #[test]
    fn pc_similarity_identity_and_substitution() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = random_plane(&mut rng, 8, 8);
        let s = pc_similarity(&a, &a).unwrap();
        assert!(s.samples().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let one = ImagePlane::filled(4, 4, 1.0);
        let zero = ImagePlane::filled(4, 4, 0.0);
        let s = pc_similarity(&one, &zero).unwrap();
        for &v in s.samples() {
            assert_abs_diff_eq!(v, 0.85 / 1.85, epsilon = 1e-12);
        }
    }

    #[test]
    fn pc_similarity_bounded_on_dense_grid() {
        // dense scan of (a, b) pairs in [0,1]^2
        for i in 0..=100 {
            for j in 0..=100 {
                let (a, b) = (i as f64 / 100.0, j as f64 / 100.0);
                let s = (2.0 * a * b + PC_T1) / (a * a + b * b + PC_T1);
                assert!(s > 0.0 && s <= 1.0, "out of range at ({}, {})", a, b);
            }
        }
    }

    #[test]
    fn pc_max_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = random_plane(&mut rng, 8, 8);
        let b = random_plane(&mut rng, 8, 8);
        assert_eq!(pc_max(&a, &a).unwrap(), a);
        let zero = ImagePlane::filled(8, 8, 0.0);
        assert_eq!(pc_max(&a, &zero).unwrap(), a);
        assert_eq!(pc_max(&a, &b).unwrap(), pc_max(&b, &a).unwrap());
    }

    #[test]
    fn vif_gain_near_one_for_identical_textured_pair() {
        let img = textured_color(21, 96, 96);
        let (y, _, _) = rgb_to_yiq(&img);
        let g = vif_gain_map(&y, &y).unwrap();
        let mean = g.mean();
        assert!((mean - 1.0).abs() < 0.05, "mean gain {}", mean);
    }

    #[test]
    fn vif_gain_tracks_multiplicative_scaling() {
        let img = textured_color(22, 96, 96);
        let (y, _, _) = rgb_to_yiq(&img);
        let g = vif_gain_map(&y, &y.scale(0.6)).unwrap();
        assert!((g.mean() - 0.6).abs() < 0.05, "mean gain {}", g.mean());
    }

    #[test]
    fn vif_gain_zero_for_constant_reference() {
        let c = ImagePlane::filled(96, 96, 0.5);
        let img = textured_color(23, 96, 96);
        let (y, _, _) = rgb_to_yiq(&img);
        let g = vif_gain_map(&c, &y).unwrap();
        assert!(g.samples().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn vsi_identical_pair_gives_unit_similarity() {
        let img = textured_color(24, 64, 64);
        let (sgm, smn, _) = vsi_maps(&img, &img).unwrap();
        assert!(sgm.samples().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(smn.samples().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn vsi_achromatic_blur_hits_sgm_not_smn() {
        // achromatic pair: r=g=b, distorted by a luminance box blur
        let base = textured_color(25, 64, 64);
        let (y, _, _) = rgb_to_yiq(&base);
        let gray = ColorImage::new(y.clone(), y.clone(), y.clone()).unwrap();
        let kernel = ImagePlane::new(3, 3, vec![1.0 / 9.0; 9]).unwrap();
        let blurred = crate::image::convolve(&y, &kernel).unwrap();
        let gray_blur = ColorImage::new(blurred.clone(), blurred.clone(), blurred).unwrap();
        let (sgm, smn, _) = vsi_maps(&gray, &gray_blur).unwrap();
        // the chroma rows map gray to small nonzero constants, so blur leaks
        // slightly into S_MN; it must stay near one while S_GM clearly dips
        let min_smn = smn.samples().iter().cloned().fold(f64::INFINITY, f64::min);
        let min_sgm = sgm.samples().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_smn > 0.99, "min smn {}", min_smn);
        assert!(min_sgm < 0.99, "min sgm {}", min_sgm);
        assert!(1.0 - min_smn < 0.1 * (1.0 - min_sgm));
    }

    #[test]
    fn vsi_smn_equals_mean_of_independent_chroma_oracles() {
        let a = textured_color(26, 64, 64);
        let b = textured_color(27, 64, 64);
        let (_, smn, _) = vsi_maps(&a, &b).unwrap();
        let (_, m_r, n_r) = rgb_to_lmn(&a);
        let (_, m_d, n_d) = rgb_to_lmn(&b);
        let s_m = stability_ratio(&m_r.scale(255.0), &m_d.scale(255.0), VSI_C3).unwrap();
        let s_n = stability_ratio(&n_r.scale(255.0), &n_d.scale(255.0), VSI_C3).unwrap();
        let expect = s_m
            .zip(&s_n, |x, y| (0.5 * (x + y)).clamp(VSI_SMN_FLOOR, 1.0))
            .unwrap();
        assert_eq!(smn, expect);
    }

    #[test]
    fn vsi_maps_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        for _ in 0..5 {
            let a = random_color(&mut rng, 64, 64);
            let b = random_color(&mut rng, 64, 64);
            let (sgm, smn, _) = vsi_maps(&a, &b).unwrap();
            assert!(sgm.samples().iter().all(|&v| v > 0.0 && v <= 1.0));
            assert!(smn.samples().iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn extract_all_identity_pair() {
        let img = textured_color(29, 96, 96);
        let maps = extract_all(&img, &img).unwrap();
        assert!(maps.haar_weight.samples().iter().all(|v| v.is_finite()));
        assert!(maps.chroma_kl.mu_delta_c.abs() < 1e-9);
        assert!(maps.pc_sim.samples().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(maps.vsi_sgm.samples().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(maps.vsi_smn.samples().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!((maps.vif_gain.mean() - 1.0).abs() < 0.05);
    }

    #[test]
    fn extract_all_is_deterministic() {
        let img = textured_color(30, 64, 64);
        let dist = textured_color(31, 64, 64);
        let a = extract_all(&img, &dist).unwrap();
        let b = extract_all(&img, &dist).unwrap();
        assert_eq!(a.haar_weight, b.haar_weight);
        assert_eq!(a.pc_sim, b.pc_sim);
        assert_eq!(a.pc_max, b.pc_max);
        assert_eq!(a.vif_gain, b.vif_gain);
        assert_eq!(a.vsi_sgm, b.vsi_sgm);
        assert_eq!(a.vsi_smn, b.vsi_smn);
        assert_eq!(a.ref_grad, b.ref_grad);
        assert_eq!(a.chroma_kl, b.chroma_kl);
    }

    #[test]
    fn extract_all_desaturation_moves_chroma_not_structure() {
        let img = textured_color(32, 96, 96);
        let (y, _, _) = rgb_to_yiq(&img);
        // pull every channel halfway toward the luminance plane
        let desat = ColorImage::new(
            img.r.zip(&y, |c, l| (0.5 * c + 0.5 * l).clamp(0.0, 1.0)).unwrap(),
            img.g.zip(&y, |c, l| (0.5 * c + 0.5 * l).clamp(0.0, 1.0)).unwrap(),
            img.b.zip(&y, |c, l| (0.5 * c + 0.5 * l).clamp(0.0, 1.0)).unwrap(),
        )
        .unwrap();
        let maps = extract_all(&img, &desat).unwrap();
        assert!(maps.chroma_kl.mu_delta_c > 1e-3);
        assert!(maps.vsi_sgm.mean() > 0.98);
    }

    #[test]
    fn extract_all_blockwise_corruption_doubles_sgm_spread() {
        let img = textured_color(33, 96, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(34);

        // block corruption: zero out a few 16x16 blocks
        let mut block = img.clone();
        for &(br, bc) in &[(8usize, 8usize), (40, 40), (72, 24)] {
            for r in br..br + 16 {
                for c in bc..bc + 16 {
                    block.r.set(r, c, 0.5);
                    block.g.set(r, c, 0.5);
                    block.b.set(r, c, 0.5);
                }
            }
        }
        let block_maps = extract_all(&img, &block).unwrap();

        // global noise counterpart tuned to a similar mean similarity
        let noise = ColorImage::new(
            img.r.map(|v| (v + 0.02 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0)),
            img.g.map(|v| (v + 0.02 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0)),
            img.b.map(|v| (v + 0.02 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0)),
        )
        .unwrap();
        let noise_maps = extract_all(&img, &noise).unwrap();

        let std = |p: &ImagePlane| {
            let m = p.mean();
            (p.samples().iter().map(|&v| (v - m) * (v - m)).sum::<f64>()
                / p.samples().len() as f64)
                .sqrt()
        };
        assert!(
            std(&block_maps.vsi_sgm) > 1.5 * std(&noise_maps.vsi_sgm),
            "block std {} vs noise std {}",
            std(&block_maps.vsi_sgm),
            std(&noise_maps.vsi_sgm)
        );
    }
}
