//! Dataset ingestion, feature caching, and config file handling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::aggd::{feature_names, featurize, FeatureVector, FEATURE_COUNT};
use crate::error::{Error, Result};
use crate::features;
use crate::gp::{EvolutionConfig, FitnessKind, OperatorSet};
use crate::image::ColorImage;

/// One reference/distorted pair with its subjective score and grouping keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub ref_path: PathBuf,
    pub dist_path: PathBuf,
    pub mos: f64,
    pub reference_id: String,
    pub distortion_id: u32,
    pub level: u32,
}

impl PairRecord {
    /// Cache key: the distorted file name is unique within a dataset.
    pub fn pair_key(&self) -> String {
        self.dist_path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default()
    }
}

/// Schema version written into cache files; bump on layout changes.
pub const CACHE_SCHEMA_VERSION: u32 = 1;

/// Hash over every numeric design constant of the extraction pipeline.
/// Two caches agree only if they were produced by identical extractors.
pub fn extractor_config_hash() -> String {
    let mut hasher = Sha256::new();
    let mut feed = |label: &str, v: f64| {
        hasher.update(label.as_bytes());
        hasher.update(v.to_le_bytes());
    };
    feed("pc.t1", features::PC_T1);
    feed("pc.eps", features::PC_EPSILON);
    feed("pc.scales", features::PC_SCALES as f64);
    feed("pc.orients", features::PC_ORIENTATIONS as f64);
    feed("pc.minwave", features::PC_MIN_WAVELENGTH);
    feed("pc.scaling", features::PC_SCALING);
    feed("pc.sigmaonf", features::PC_SIGMA_ONF);
    feed("vsi.c2", features::VSI_C2);
    feed("vsi.c3", features::VSI_C3);
    feed("vsi.floor", features::VSI_SMN_FLOOR);
    feed("vif.eps", features::VIF_EPSILON);
    feed("vif.scales", features::VIF_SCALES as f64);
    feed("kl.bins", features::KL_BINS as f64);
    feed("kl.smooth", features::KL_SMOOTHING);
    feed("aggd.amin", crate::aggd::ALPHA_MIN);
    feed("aggd.amax", crate::aggd::ALPHA_MAX);
    feed("features", FEATURE_COUNT as f64);
    for row in crate::image::YIQ_MATRIX.iter().chain(crate::image::LMN_MATRIX.iter()) {
        for &v in row {
            feed("m", v);
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{:02x}", b));
    }
    out
}

/// In-memory feature cache keyed by distorted-file name.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    entries: BTreeMap<String, FeatureVector>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&FeatureVector> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: String, fv: FeatureVector) {
        self.entries.insert(key, fv);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Writes the cache in the canonical CSV layout: a schema/hash header
    /// followed by a column-name row, entries sorted by key.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "# cache v{} extractor {}\n",
            CACHE_SCHEMA_VERSION,
            extractor_config_hash()
        ));
        out.push_str("pair_key");
        for name in feature_names() {
            out.push(',');
            out.push_str(&name);
        }
        out.push('\n');
        for (key, fv) in &self.entries {
            out.push_str(key);
            for v in fv.values() {
                out.push_str(&format!(",{:.17e}", v));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache file, failing hard on schema-version or extractor-hash
    /// mismatch so stale features can never silently leak into training.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Schema("empty cache file".into()))?;
        let expected = format!(
            "# cache v{} extractor {}",
            CACHE_SCHEMA_VERSION,
            extractor_config_hash()
        );
        if header.trim() != expected {
            return Err(Error::Schema(format!(
                "cache header mismatch: found '{}', expected '{}'",
                header.trim(),
                expected
            )));
        }
        let columns = lines.next().ok_or_else(|| Error::Schema("cache file missing column row".into()))?;
        let expected_cols: Vec<String> = std::iter::once("pair_key".to_string())
            .chain(feature_names())
            .collect();
        let found_cols: Vec<&str> = columns.split(',').collect();
        if found_cols.len() != expected_cols.len()
            || found_cols.iter().zip(&expected_cols).any(|(a, b)| *a != b)
        {
            return Err(Error::Schema(
                "cache column names do not match the canonical feature layout".into(),
            ));
        }
        let mut cache = Self::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let key = parts.next().unwrap().to_string();
            let values: Vec<f64> = parts
                .map(|p| {
                    p.trim().parse::<f64>().map_err(|_| Error::Parse {
                        location: format!("{}:{}", path.display(), lineno + 3),
                        reason: format!("bad feature value '{}'", p),
                    })
                })
                .collect::<Result<_>>()?;
            let fv = FeatureVector::from_values(values)?;
            cache.insert(key, fv);
        }
        Ok(cache)
    }
}

/// Parses a TID2013-style listing: each line is "<mos> <file name>", with
/// file names following the iRR_DD_L grammar (reference, distortion, level).
pub fn load_tid2013(root: &Path) -> Result<Vec<PairRecord>> {
    let listing = root.join("mos_with_names.txt");
    let text = fs::read_to_string(&listing).map_err(|e| Error::io(&listing, e))?;
    let refs_dir = root.join("reference_images");
    let dist_dir = root.join("distorted_images");
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let location = format!("{}:{}", listing.display(), lineno + 1);
        let mut parts = line.split_whitespace();
        let mos: f64 = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Parse {
                location: location.clone(),
                reason: "expected '<mos> <name>'".into(),
            })?;
        let name = parts.next().ok_or_else(|| Error::Parse {
            location: location.clone(),
            reason: "missing file name".into(),
        })?;
        let (reference_id, distortion_id, level) = parse_tid_name(name, &location)?;
        let dist_path = find_case_insensitive(&dist_dir, name)?;
        let ref_name = format!("{}.BMP", reference_id.to_ascii_uppercase());
        let ref_path = find_case_insensitive(&refs_dir, &ref_name)?;
        records.push(PairRecord {
            ref_path,
            dist_path,
            mos,
            reference_id,
            distortion_id,
            level,
        });
    }
    if records.is_empty() {
        return Err(Error::Ingestion("listing contained no pairs".into()));
    }
    Ok(records)
}

/// Splits a distorted-file name like "i05_11_3.bmp" into its grouping keys.
fn parse_tid_name(name: &str, location: &str) -> Result<(String, u32, u32)> {
    let stem = name
        .rsplit_once('.')
        .map(|(s, _)| s)
        .unwrap_or(name)
        .to_ascii_lowercase();
    let parts: Vec<&str> = stem.split('_').collect();
    let err = |reason: String| Error::Parse {
        location: location.to_string(),
        reason,
    };
    if parts.len() != 3 {
        return Err(err(format!("file name '{}' is not iRR_DD_L", name)));
    }
    if !parts[0].starts_with('i') {
        return Err(err(format!("reference token '{}' must start with 'i'", parts[0])));
    }
    parts[0][1..]
        .parse::<u32>()
        .map_err(|_| err(format!("bad reference number in '{}'", name)))?;
    let distortion_id = parts[1]
        .parse::<u32>()
        .map_err(|_| err(format!("bad distortion number in '{}'", name)))?;
    let level = parts[2]
        .parse::<u32>()
        .map_err(|_| err(format!("bad level in '{}'", name)))?;
    Ok((parts[0].to_string(), distortion_id, level))
}

/// Looks a file up ignoring name case; listing case and on-disk case differ
/// between dataset distributions.
fn find_case_insensitive(dir: &Path, name: &str) -> Result<PathBuf> {
    let direct = dir.join(name);
    if direct.exists() {
        return Ok(direct);
    }
    let wanted = name.to_ascii_lowercase();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_name().to_string_lossy().to_ascii_lowercase() == wanted {
            return Ok(entry.path());
        }
    }
    Err(Error::Ingestion(format!(
        "file '{}' not found in {}",
        name,
        dir.display()
    )))
}

/// Loads a generic manifest CSV with the exact header
/// `ref_path,dist_path,mos,reference_id,distortion_id,level`.
/// Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Schema("empty manifest".into()))?;
    if header.trim() != "ref_path,dist_path,mos,reference_id,distortion_id,level" {
        return Err(Error::Schema(format!(
            "unexpected manifest header '{}'",
            header.trim()
        )));
    }
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut records = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{}:{}", path.display(), lineno + 1);
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Parse {
                location,
                reason: format!("expected 6 fields, found {}", parts.len()),
            });
        }
        let parse_num = |v: &str, what: &str| -> Result<f64> {
            v.trim().parse::<f64>().map_err(|_| Error::Parse {
                location: location.clone(),
                reason: format!("bad {} '{}'", what, v),
            })
        };
        records.push(PairRecord {
            ref_path: resolve(parts[0].trim()),
            dist_path: resolve(parts[1].trim()),
            mos: parse_num(parts[2], "mos")?,
            reference_id: parts[3].trim().to_string(),
            distortion_id: parse_num(parts[4], "distortion_id")? as u32,
            level: parse_num(parts[5], "level")? as u32,
        });
    }
    if records.is_empty() {
        return Err(Error::Ingestion("manifest contained no pairs".into()));
    }
    Ok(records)
}

/// A per-pair extraction failure, reported alongside successful entries.
#[derive(Debug)]
pub struct ExtractionFailure {
    pub pair_key: String,
    pub error: Error,
}

/// Extracts features for every pair not already cached, in parallel, and
/// merges the results in canonical key order. Already-cached pairs are
/// skipped, making repeated invocations idempotent.
pub fn extract_and_cache(
    records: &[PairRecord],
    cache: &mut FeatureCache,
) -> (usize, Vec<ExtractionFailure>) {
    let pending: Vec<&PairRecord> = {
        let mut seen = std::collections::BTreeSet::new();
        records
            .iter()
            .filter(|r| cache.get(&r.pair_key()).is_none() && seen.insert(r.pair_key()))
            .collect()
    };
    let mut results: Vec<(String, Result<FeatureVector>)> = pending
        .par_iter()
        .map(|r| {
            let fv = (|| {
                let reference = ColorImage::load(&r.ref_path)?;
                let distorted = ColorImage::load(&r.dist_path)?;
                let maps = features::extract_all(&reference, &distorted)?;
                featurize(&maps)
            })();
            (r.pair_key(), fv)
        })
        .collect();
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut failures = Vec::new();
    let mut added = 0;
    for (key, res) in results {
        match res {
            Ok(fv) => {
                cache.insert(key, fv);
                added += 1;
            }
            Err(error) => failures.push(ExtractionFailure { pair_key: key, error }),
        }
    }
    (added, failures)
}

/// Parses an evolution config in `key = value` line format. Lines starting
/// with '#' are comments; unknown keys are an error so typos cannot
/// silently fall back to defaults.
pub fn parse_evolution_config(text: &str, seed: u64) -> Result<EvolutionConfig> {
    let mut cfg = EvolutionConfig { seed, ..EvolutionConfig::default() };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
            "line {}: expected 'key = value', found '{}'",
            lineno + 1,
            line
        )))?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            Error::Config(format!("line {}: bad {} '{}'", lineno + 1, what, value))
        };
        match key {
            "warm_population" => cfg.warm_pop = value.parse().map_err(|_| bad("integer"))?,
            "warm_generations" => {
                cfg.warm_gens = value.parse().map_err(|_| bad("integer"))?
            }
            "population" => cfg.main_pop = value.parse().map_err(|_| bad("integer"))?,
            "generations" => cfg.main_gens = value.parse().map_err(|_| bad("integer"))?,
            "crossover_rate" => cfg.crossover_rate = value.parse().map_err(|_| bad("number"))?,
            "mutation_rate" => cfg.mutation_rate = value.parse().map_err(|_| bad("number"))?,
            "tournament_size" => cfg.tournament_size = value.parse().map_err(|_| bad("integer"))?,
            "pareto_sample" => cfg.pareto_sample = value.parse().map_err(|_| bad("integer"))?,
            "elitism" => cfg.elitism = value.parse().map_err(|_| bad("integer"))?,
            "max_program_len" => cfg.max_len = value.parse().map_err(|_| bad("integer"))?,
            "operator_set" => {
                cfg.operator_set = OperatorSet::parse(value).map_err(|_| bad("operator set"))?
            }
            "fitness" => {
                cfg.fitness_kind = FitnessKind::parse(value).map_err(|_| bad("fitness kind"))?
            }
            "cold_start" => cfg.cold_start = value.parse().map_err(|_| bad("boolean"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{}'",
                    lineno + 1,
                    other
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses an evolution config file.
pub fn load_evolution_config(path: &Path, seed: u64) -> Result<EvolutionConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_evolution_config(&text, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn sample_vector(offset: f64) -> FeatureVector {
        let values: Vec<f64> = (0..FEATURE_COUNT).map(|i| offset + i as f64 * 0.25).collect();
        FeatureVector::from_values(values).unwrap()
    }

    #[test]
    fn cache_round_trip_preserves_bits() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("features.csv");
        let mut cache = FeatureCache::new();
        cache.insert("b.png".into(), sample_vector(0.1));
        cache.insert("a.png".into(), sample_vector(std::f64::consts::PI));
        cache.save(&path).unwrap();
        let loaded = FeatureCache::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for key in ["a.png", "b.png"] {
            let orig = cache.get(key).unwrap();
            let back = loaded.get(key).unwrap();
            for (a, b) in orig.values().iter().zip(back.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn cache_rejects_tampered_header() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("features.csv");
        let mut cache = FeatureCache::new();
        cache.insert("a.png".into(), sample_vector(1.0));
        cache.save(&path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replacen("extractor", "extractor x", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(
            FeatureCache::load(&path),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn cache_rejects_wrong_column_order() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("features.csv");
        let mut cache = FeatureCache::new();
        cache.insert("a.png".into(), sample_vector(1.0));
        cache.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = lines[1].replacen("pair_key", "key", 1);
        fs::write(&path, lines.join("\n")).unwrap();
        assert!(FeatureCache::load(&path).is_err());
    }

    #[test]
    fn tid_name_grammar() {
        let loc = "test".to_string();
        let (r, d, l) = parse_tid_name("i05_11_3.bmp", &loc).unwrap();
        assert_eq!((r.as_str(), d, l), ("i05", 11, 3));
        let (r, d, l) = parse_tid_name("I25_24_5.BMP", &loc).unwrap();
        assert_eq!((r.as_str(), d, l), ("i25", 24, 5));
        assert!(parse_tid_name("i05_11.bmp", &loc).is_err());
        assert!(parse_tid_name("x05_11_3.bmp", &loc).is_err());
        assert!(parse_tid_name("i05_aa_3.bmp", &loc).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("manifest.csv");
        fs::write(
            &path,
            "ref_path,dist_path,mos,reference_id,distortion_id,level\n\
             refs/r1.png,dist/r1_blur_1.png,5.25,r1,1,1\n\
             refs/r2.png,dist/r2_sat_2.png,3.5,r2,2,2\n",
        )
        .unwrap();
        let records = load_manifest(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].mos, 5.25);
        assert_eq!(records[0].reference_id, "r1");
        assert_eq!(records[1].distortion_id, 2);
        assert_eq!(records[0].ref_path, dir.path().join("refs/r1.png"));
        assert_eq!(records[1].pair_key(), "r2_sat_2.png");
    }

    #[test]
    fn manifest_rejects_bad_header_and_rows() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("manifest.csv");
        fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(load_manifest(&path).is_err());
        fs::write(
            &path,
            "ref_path,dist_path,mos,reference_id,distortion_id,level\n\
             r.png,d.png,abc,r1,1,1\n",
        )
        .unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn config_parsing_defaults_and_overrides() {
        let cfg = parse_evolution_config("", 7).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.main_pop, 600);
        let cfg = parse_evolution_config(
            "# comment\npopulation = 50\ngenerations = 5\noperator_set = strict\nfitness = pearson\ncold_start = true\n",
            3,
        )
        .unwrap();
        assert_eq!(cfg.main_pop, 50);
        assert_eq!(cfg.main_gens, 5);
        assert_eq!(cfg.operator_set, OperatorSet::Strict);
        assert_eq!(cfg.fitness_kind, FitnessKind::Pearson);
        assert!(cfg.cold_start);
    }

    #[test]
    fn config_rejects_unknown_key_and_bad_rates() {
        assert!(parse_evolution_config("populaton = 50\n", 1).is_err());
        assert!(parse_evolution_config("crossover_rate = 0.9\n", 1).is_err());
    }

    #[test]
    fn extractor_hash_is_stable_within_build() {
        assert_eq!(extractor_config_hash(), extractor_config_hash());
        assert_eq!(extractor_config_hash().len(), 16);
    }

    #[test]
    fn extract_and_cache_synthetic_pairs() {
        let dir = TempDir::new().unwrap();
        let mk = |name: &str, seed: u64| -> PathBuf {
            let img = crate::features::tests::textured_color(seed, 64, 64);
            let path = dir.path().join(name);
            save_png(&img, &path);
            path
        };
        let r1 = mk("ref1.png", 11);
        let d1 = mk("dist1.png", 12);
        let d2 = mk("dist2.png", 13);
        let records = vec![
            PairRecord {
                ref_path: r1.clone(),
                dist_path: d1,
                mos: 5.0,
                reference_id: "r1".into(),
                distortion_id: 1,
                level: 1,
            },
            PairRecord {
                ref_path: r1.clone(),
                dist_path: d2,
                mos: 4.0,
                reference_id: "r1".into(),
                distortion_id: 1,
                level: 2,
            },
            PairRecord {
                ref_path: r1,
                dist_path: dir.path().join("missing.png"),
                mos: 3.0,
                reference_id: "r1".into(),
                distortion_id: 2,
                level: 1,
            },
        ];
        let mut cache = FeatureCache::new();
        let (added, failures) = extract_and_cache(&records, &mut cache);
        assert_eq!(added, 2);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].pair_key, "missing.png");
        // idempotent: nothing new on the second pass
        let (added, failures) = extract_and_cache(&records[..2], &mut cache);
        assert_eq!(added, 0);
        assert!(failures.is_empty());
    }

    fn save_png(img: &ColorImage, path: &Path) {
        let (h, w) = (img.r.height(), img.r.width());
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for r in 0..h {
            for c in 0..w {
                let px = |p: &crate::image::ImagePlane| {
                    (p.samples()[r * w + c] * 255.0).round().clamp(0.0, 255.0) as u8
                };
                buf.put_pixel(c as u32, r as u32, image::Rgb([px(&img.r), px(&img.g), px(&img.b)]));
            }
        }
        buf.save(path).unwrap();
    }
}
