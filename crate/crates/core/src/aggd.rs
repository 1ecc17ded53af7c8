//! Asymmetric generalized Gaussian statistics: each perceptual map is
//! reduced to the six-number descriptor {alpha, scale, mu, sigma, kappa,
//! gamma}, and a MapSet flattens into the canonical 45-entry terminal
//! vector for the GP engine.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::features::MapSet;
use crate::image::ImagePlane;

/// Search interval for the AGGD shape parameter.
pub const ALPHA_MIN: f64 = 0.2;
pub const ALPHA_MAX: f64 = 10.0;
/// Fallback shape for degenerate (constant) maps.
pub const ALPHA_FALLBACK: f64 = 2.0;

/// The six AGGD statistics of one map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggdDescriptor {
    pub alpha_hat: f64,
    pub sigma_bar_sq: f64,
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// Set when the degeneracy rule fired (constant or zero-variance map).
    pub degenerate: bool,
}

/// Per-map statistic names, in descriptor order.
pub const STAT_NAMES: [&str; 6] = ["alpha", "scale", "mu", "sigma", "kappa", "gamma"];

/// Canonical map prefixes, in MapSet field order.
pub const MAP_NAMES: [&str; 7] = [
    "haar.weight",
    "pc.sim",
    "pc.max",
    "vif.gain",
    "vsi.sgm",
    "vsi.smn",
    "ref.grad",
];

pub const CHROMA_NAMES: [&str; 3] = ["chroma.kl.i", "chroma.kl.q", "chroma.kl.mu"];

/// Total terminal count: 7 maps x 6 stats + 3 chroma scalars.
pub const FEATURE_COUNT: usize = MAP_NAMES.len() * STAT_NAMES.len() + CHROMA_NAMES.len();

/// The ordered, named terminal vector for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_COUNT {
            return Err(Error::Schema(format!(
                "feature vector must have {} entries, got {}",
                FEATURE_COUNT,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite feature value".into()));
        }
        Ok(FeatureVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn by_name(&self, name: &str) -> Result<f64> {
        let idx = feature_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("unknown feature name: {}", name)))?;
        Ok(self.values[idx])
    }
}

/// The canonical "metric.map.stat" name list; terminal indices are stable
/// across the whole run.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_COUNT);
    for map in MAP_NAMES {
        for stat in STAT_NAMES {
            names.push(format!("{}.{}", map, stat));
        }
    }
    for name in CHROMA_NAMES {
        names.push(name.to_string());
    }
    names
}

/// RMS of the strictly negative and strictly positive partitions of the
/// mean-centered coefficients. An empty partition yields 0.
pub fn partition_rms(map: &ImagePlane) -> (f64, f64) {
    let mean = map.mean();
    let mut sum_l = 0.0;
    let mut n_l = 0usize;
    let mut sum_r = 0.0;
    let mut n_r = 0usize;
    for &v in map.samples() {
        let x = v - mean;
        if x < 0.0 {
            sum_l += x * x;
            n_l += 1;
        } else if x > 0.0 {
            sum_r += x * x;
            n_r += 1;
        }
    }
    let sigma_l = if n_l > 0 { (sum_l / n_l as f64).sqrt() } else { 0.0 };
    let sigma_r = if n_r > 0 { (sum_r / n_r as f64).sqrt() } else { 0.0 };
    (sigma_l, sigma_r)
}

/// Empirical moment ratio rho = (E|M|)^2 / E[M^2] of the centered map.
/// Returns None for a degenerate (zero second moment) map.
pub fn moment_ratio(map: &ImagePlane) -> Option<f64> {
    let mean = map.mean();
    let n = map.samples().len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for &v in map.samples() {
        let x = v - mean;
        abs_sum += x.abs();
        sq_sum += x * x;
    }
    let e_abs = abs_sum / n;
    let e_sq = sq_sum / n;
    if e_sq <= 0.0 {
        None
    } else {
        Some((e_abs * e_abs) / e_sq)
    }
}

/// Theoretical GGD moment ratio Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a)),
/// strictly increasing in a.
pub fn theoretical_ratio(alpha: f64) -> f64 {
    (2.0 * ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp()
}

/// Inverts the theoretical moment ratio over [0.2, 10] by golden-section
/// search on the squared residual. Out-of-range rho clamps to the nearest
/// endpoint of the theoretical range and flags degeneracy.
pub fn fit_alpha(rho: f64) -> (f64, bool) {
    let lo_ratio = theoretical_ratio(ALPHA_MIN);
    let hi_ratio = theoretical_ratio(ALPHA_MAX);
    let (rho, degenerate) = if rho <= lo_ratio {
        (lo_ratio, true)
    } else if rho >= hi_ratio {
        (hi_ratio, true)
    } else {
        (rho, false)
    };

    let objective = |alpha: f64| {
        let d = theoretical_ratio(alpha) - rho;
        d * d
    };
    const PHI: f64 = 0.618_033_988_749_894_8;
    let mut a = ALPHA_MIN;
    let mut b = ALPHA_MAX;
    let mut x1 = b - PHI * (b - a);
    let mut x2 = a + PHI * (b - a);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while b - a > 1e-6 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - PHI * (b - a);
            f1 = objective(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + PHI * (b - a);
            f2 = objective(x2);
        }
    }
    (0.5 * (a + b), degenerate)
}

/// Raw (uncentered-map) population moments. A constant map yields
/// (c, 0, 3, 0) by the degeneracy rule.
pub fn empirical_moments(map: &ImagePlane) -> (f64, f64, f64, f64) {
    let first = map.samples()[0];
    if map.samples().iter().all(|&v| v == first) {
        return (first, 0.0, 3.0, 0.0);
    }
    let n = map.samples().len() as f64;
    let mu = map.mean();
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &v in map.samples() {
        let d = v - mu;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let sigma = m2.sqrt();
    if sigma <= 0.0 {
        return (mu, 0.0, 3.0, 0.0);
    }
    (mu, sigma, m4 / (m2 * m2), m3 / (m2 * sigma))
}

/// Full six-statistic descriptor for one map.
pub fn describe(map: &ImagePlane) -> AggdDescriptor {
    let (sigma_l, sigma_r) = partition_rms(map);
    let sigma_bar_sq = 0.5 * (sigma_l * sigma_l + sigma_r * sigma_r);
    let (mu, sigma, kappa, gamma) = empirical_moments(map);
    let (alpha_hat, degenerate) = match moment_ratio(map) {
        Some(rho) => fit_alpha(rho),
        None => (ALPHA_FALLBACK, true),
    };
    AggdDescriptor {
        alpha_hat,
        sigma_bar_sq,
        mu,
        sigma,
        kappa,
        gamma,
        degenerate,
    }
}

/// Flattens a MapSet into the canonical 45-entry terminal vector.
pub fn featurize(maps: &MapSet) -> Result<FeatureVector> {
    let planes = [
        &maps.haar_weight,
        &maps.pc_sim,
        &maps.pc_max,
        &maps.vif_gain,
        &maps.vsi_sgm,
        &maps.vsi_smn,
        &maps.ref_grad,
    ];
    let mut values = Vec::with_capacity(FEATURE_COUNT);
    for plane in planes {
        let d = describe(plane);
        values.extend_from_slice(&[
            d.alpha_hat,
            d.sigma_bar_sq,
            d.mu,
            d.sigma,
            d.kappa,
            d.gamma,
        ]);
    }
    values.push(maps.chroma_kl.d_kl_i);
    values.push(maps.chroma_kl.d_kl_q);
    values.push(maps.chroma_kl.mu_delta_c);
    FeatureVector::from_values(values)
}
