//! Synthetic counting scenes and JSON-lines dataset files.
//!
//! A scene stands in for an image: its feature vector carries a noisy view
//! of the true count (`ln y` and `y / count_max`) followed by pure-noise
//! distractors. Counts follow a discretised log-normal truncated to
//! `[count_min, count_max]`, with the location fitted so the truncated mean
//! matches the requested mean.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Length of every generated feature vector.
pub const FEATURE_DIM: usize = 8;

/// Tag of the domain reserved for out-of-domain testing.
pub const OUT_OF_DOMAIN_TAG: &str = "manatee-like";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub features: Vec<f64>,
    pub truth: u64,
    pub domain_tag: String,
    pub split: Split,
}

impl Scene {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.truth < 1 {
            return Err(format!("truth must be >= 1, got {}", self.truth));
        }
        if let Some(i) = self.features.iter().position(|x| !x.is_finite()) {
            return Err(format!("feature {i} is not finite"));
        }
        Ok(())
    }

    /// Hash of the scene content, ignoring the split label.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.truth.hash(&mut h);
        self.domain_tag.hash(&mut h);
        for x in &self.features {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Count statistics and size of one generated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub n: usize,
    pub count_min: u64,
    pub count_max: u64,
    pub count_mean: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
}

pub fn default_noise_sigma() -> f64 {
    0.15
}

impl DomainSpec {
    pub fn new(n: usize, count_min: u64, count_max: u64, count_mean: f64) -> Self {
        DomainSpec {
            n,
            count_min,
            count_max,
            count_mean,
            noise_sigma: default_noise_sigma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("domain spec needs n >= 1".into()));
        }
        if self.count_min < 1 {
            return Err(Error::Config("count_min must be >= 1".into()));
        }
        let (lo, hi) = (self.count_min as f64, self.count_max as f64);
        if !(lo <= self.count_mean && self.count_mean <= hi) {
            return Err(Error::Config(format!(
                "infeasible domain spec: mean {} outside [{}, {}]",
                self.count_mean, self.count_min, self.count_max
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

fn upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Probability mass of each integer count under a log-normal(mu, sigma)
/// rounded to the nearest integer and truncated to `[lo, hi]`.
fn count_weights(lo: u64, hi: u64, mu: f64, sigma: f64) -> Vec<f64> {
    (lo..=hi)
        .map(|k| {
            let a = ((k as f64 - 0.5).max(f64::MIN_POSITIVE).ln() - mu) / sigma;
            let b = ((k as f64 + 0.5).ln() - mu) / sigma;
            // Difference of tails on whichever side keeps precision.
            if a > 0.0 {
                upper_tail(a) - upper_tail(b)
            } else {
                upper_tail(-b) - upper_tail(-a)
            }
        })
        .collect()
}

fn weighted_mean(lo: u64, weights: &[f64]) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    (total > 0.0).then(|| {
        weights
            .iter()
            .enumerate()
            .map(|(i, w)| (lo + i as u64) as f64 * w)
            .sum::<f64>()
            / total
    })
}

/// Count distribution fitted to a domain spec.
#[derive(Clone, Debug)]
pub struct CountModel {
    pub lo: u64,
    pub mu: f64,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl CountModel {
    pub fn fit(spec: &DomainSpec) -> Result<Self> {
        spec.validate()?;
        let (lo, hi) = (spec.count_min, spec.count_max);
        let sigma = ((hi as f64 / lo as f64).ln() / 4.0).clamp(0.25, 1.5);
        if lo == hi {
            return Ok(CountModel {
                lo,
                mu: (lo as f64).ln(),
                sigma,
                weights: vec![1.0],
            });
        }
        // Truncated mean is increasing in mu; bisect.
        let mut a = (lo as f64).ln() - 6.0 * sigma;
        let mut b = (hi as f64).ln() + 6.0 * sigma;
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let mean = weighted_mean(lo, &count_weights(lo, hi, mid, sigma)).unwrap_or(if mid < (lo as f64).ln() {
                lo as f64
            } else {
                hi as f64
            });
            if mean < spec.count_mean {
                a = mid;
            } else {
                b = mid;
            }
        }
        let mu = 0.5 * (a + b);
        let weights = count_weights(lo, hi, mu, sigma);
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("could not fit count distribution".into()));
        }
        Ok(CountModel { lo, mu, sigma, weights })
    }

    pub fn mean(&self) -> f64 {
        weighted_mean(self.lo, &self.weights).unwrap_or(self.lo as f64)
    }
}

/// Feature vector for a scene with count `truth`.
fn features_for(truth: u64, count_max: u64, noise: &mut impl FnMut() -> f64) -> Vec<f64> {
    let y = truth as f64;
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.push(y.ln() + noise());
    f.push(y / count_max as f64 + noise());
    for _ in 2..FEATURE_DIM {
        f.push(noise());
    }
    f
}

/// Generates `spec.n` scenes for one domain and split.
pub fn generate_domain(spec: &DomainSpec, tag: &str, split: Split, seed: u64) -> Result<Vec<Scene>> {
    let model = CountModel::fit(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index =
        WeightedIndex::new(&model.weights).map_err(|e| Error::Config(format!("degenerate count distribution: {e}")))?;
    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut scenes = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let truth = model.lo + index.sample(&mut rng) as u64;
        let mut noise = || normal.sample(&mut rng);
        let features = features_for(truth, spec.count_max, &mut noise);
        scenes.push(Scene {
            features,
            truth,
            domain_tag: tag.to_string(),
            split,
        });
    }
    Ok(scenes)
}

/// One domain of a synthetic suite. Domains without a training spec are test-only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteDomain {
    pub tag: String,
    pub train: Option<DomainSpec>,
    pub test: DomainSpec,
}

/// Synthetic counting suite with per-domain count statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub domains: Vec<SuiteDomain>,
}

impl Default for SuiteSpec {
    /// Five training domains plus a test-only out-of-domain set, with
    /// sizes and count ranges taken from common counting benchmarks.
    fn default() -> Self {
        let d = |tag: &str, train: Option<DomainSpec>, test: DomainSpec| SuiteDomain {
            tag: tag.to_string(),
            train,
            test,
        };
        SuiteSpec {
            domains: vec![
                d(
                    "sheep-like",
                    Some(DomainSpec::new(1000, 1, 105, 31.0)),
                    DomainSpec::new(100, 1, 103, 29.0),
                ),
                d(
                    "characters-like",
                    Some(DomainSpec::new(1000, 5, 3546, 326.0)),
                    DomainSpec::new(100, 13, 1709, 365.0),
                ),
                // The published test row for this domain is internally
                // inconsistent (mean equals max), so the training statistics are reused.
                d(
                    "pedestrians-like",
                    Some(DomainSpec::new(400, 12, 578, 123.0)),
                    DomainSpec::new(100, 12, 578, 123.0),
                ),
                d(
                    "wheat-like",
                    Some(DomainSpec::new(1000, 1, 125, 45.0)),
                    DomainSpec::new(100, 1, 115, 49.0),
                ),
                d(
                    "cars-like",
                    Some(DomainSpec::new(403, 9, 95, 34.0)),
                    DomainSpec::new(100, 15, 107, 42.0),
                ),
                d(OUT_OF_DOMAIN_TAG, None, DomainSpec::new(100, 1, 50, 16.0)),
            ],
        }
    }
}

impl SuiteSpec {
    pub fn with_noise(mut self, sigma: f64) -> Self {
        for d in &mut self.domains {
            if let Some(t) = d.train.as_mut() {
                t.noise_sigma = sigma;
            }
            d.test.noise_sigma = sigma;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("suite has no domains".into()));
        }
        if !self.domains.iter().any(|d| d.train.is_some()) {
            return Err(Error::Config("suite has no training domain".into()));
        }
        let mut seen = HashSet::new();
        for d in &self.domains {
            if !seen.insert(d.tag.as_str()) {
                return Err(Error::Config(format!("duplicate domain tag {}", d.tag)));
            }
            if let Some(t) = &d.train {
                t.validate()?;
            }
            d.test.validate()?;
        }
        Ok(())
    }

    /// Tags of domains that never appear in training.
    pub fn test_only_tags(&self) -> Vec<String> {
        self.domains
            .iter()
            .filter(|d| d.train.is_none())
            .map(|d| d.tag.clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

const MAX_REDRAWS: usize = 64;

/// Generates every split of the suite. Test scenes whose content collides
/// with a training scene are redrawn so the splits are disjoint.
pub fn generate_suite(suite: &SuiteSpec, seed: u64) -> Result<Dataset> {
    suite.validate()?;
    let mut train = Vec::new();
    for d in &suite.domains {
        if let Some(spec) = &d.train {
            let s = seeding::derive(&format!("{}/train", d.tag), seed);
            train.extend(generate_domain(spec, &d.tag, Split::Train, s)?);
        }
    }
    let train_hashes: HashSet<u64> = train.iter().map(Scene::content_hash).collect();
    let mut test = Vec::new();
    for d in &suite.domains {
        let s = seeding::derive(&format!("{}/test", d.tag), seed);
        let mut scenes = generate_domain(&d.test, &d.tag, Split::Test, s)?;
        for (i, scene) in scenes.iter_mut().enumerate() {
            let mut attempt = 0;
            while train_hashes.contains(&scene.content_hash()) {
                attempt += 1;
                if attempt > MAX_REDRAWS {
                    return Err(Error::Config(format!(
                        "cannot draw a test scene for {} disjoint from training data",
                        d.tag
                    )));
                }
                let redraw_seed = seeding::derive_indexed(s, &[i as u64, attempt as u64]);
                let one = DomainSpec { n: 1, ..d.test.clone() };
                *scene = generate_domain(&one, &d.tag, Split::Test, redraw_seed)?.remove(0);
            }
        }
        test.extend(scenes);
    }
    Ok(Dataset { train, test })
}

/// Fails if any scene content appears in both lists.
pub fn check_disjoint(train: &[Scene], test: &[Scene]) -> Result<()> {
    let hashes: HashSet<u64> = train.iter().map(Scene::content_hash).collect();
    match test.iter().position(|s| hashes.contains(&s.content_hash())) {
        Some(i) => Err(Error::Config(format!(
            "test scene {i} also appears in the training split"
        ))),
        None => Ok(()),
    }
}

/// Reads a JSON-lines scene file. Either every line parses or nothing is returned.
pub fn load_jsonl(path: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let scene: Scene = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        scene.validate().map_err(err)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn save_jsonl(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub domain: String,
    pub split: Split,
    pub samples: usize,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
}

/// Per-domain, per-split count statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub rows: Vec<SummaryRow>,
}

impl DatasetSummary {
    pub fn row(&self, domain: &str, split: Split) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.domain == domain && r.split == split)
    }

    pub fn render_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.domain.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<width$}  {:<5}  {:>7}  {:>6}  {:>6}  {:>9}\n",
            "domain", "split", "samples", "min", "max", "mean"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<5}  {:>7}  {:>6}  {:>6}  {:>9.2}",
                r.domain, r.split, r.samples, r.min, r.max, r.mean
            );
        }
        out
    }
}

pub fn summarize(scenes: &[Scene]) -> Result<DatasetSummary> {
    if scenes.is_empty() {
        return Err(Error::Domain("cannot summarise an empty scene list".into()));
    }
    let mut groups: BTreeMap<(String, Split), Vec<u64>> = BTreeMap::new();
    for s in scenes {
        groups.entry((s.domain_tag.clone(), s.split)).or_default().push(s.truth);
    }
    let rows = groups
        .into_iter()
        .map(|((domain, split), counts)| SummaryRow {
            domain,
            split,
            samples: counts.len(),
            min: *counts.iter().min().expect("non-empty group"),
            max: *counts.iter().max().expect("non-empty group"),
            mean: counts.iter().sum::<u64>() as f64 / counts.len() as f64,
        })
        .collect();
    Ok(DatasetSummary { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sheep() -> DomainSpec {
        DomainSpec::new(1000, 1, 105, 31.0)
    }

    #[test]
    fn sheep_like_matches_calibration() {
        let scenes = generate_domain(&sheep(), "sheep-like", Split::Train, 7).unwrap();
        let s = summarize(&scenes).unwrap();
        let row = s.row("sheep-like", Split::Train).unwrap();
        assert_eq!(row.samples, 1000);
        assert!(row.min >= 1 && row.max <= 105);
        assert!((26.35..=35.65).contains(&row.mean), "mean {}", row.mean);
    }

    #[test]
    fn characters_like_matches_calibration() {
        let spec = DomainSpec::new(1000, 5, 3546, 326.0);
        let model = CountModel::fit(&spec).unwrap();
        assert!((model.mean() - 326.0).abs() < 1e-6 * 326.0);
        let scenes = generate_domain(&spec, "characters-like", Split::Train, 8).unwrap();
        let row = summarize(&scenes).unwrap().rows.remove(0);
        assert!(row.min >= 5 && row.max <= 3546);
        assert!((row.mean - 326.0).abs() <= 0.15 * 326.0, "mean {}", row.mean);
    }

    #[test]
    fn zero_noise_single_scene_is_deterministic() {
        let spec = DomainSpec {
            noise_sigma: 0.0,
            ..DomainSpec::new(1, 10, 40, 20.0)
        };
        let s = generate_domain(&spec, "x", Split::Test, 1).unwrap().remove(0);
        let y = s.truth as f64;
        let mut expected = vec![y.ln(), y / 40.0];
        expected.extend([0.0; 6]);
        assert_eq!(s.features, expected);
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let spec = DomainSpec::new(10, 5, 50, 60.0);
        assert!(matches!(
            generate_domain(&spec, "x", Split::Train, 0),
            Err(Error::Config(_))
        ));
        let spec = DomainSpec::new(0, 5, 50, 20.0);
        assert!(generate_domain(&spec, "x", Split::Train, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_suite(&SuiteSpec::default(), 3).unwrap();
        let b = generate_suite(&SuiteSpec::default(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_suite(&SuiteSpec::default(), 4).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn default_suite_has_disjoint_splits_and_test_only_domain() {
        let suite = SuiteSpec::default();
        let data = generate_suite(&suite, 11).unwrap();
        assert_eq!(data.train.len(), 3803);
        assert_eq!(data.test.len(), 600);
        check_disjoint(&data.train, &data.test).unwrap();
        assert!(data.train.iter().all(|s| s.domain_tag != OUT_OF_DOMAIN_TAG));
        let ood: Vec<&Scene> = data.test.iter().filter(|s| s.domain_tag == OUT_OF_DOMAIN_TAG).collect();
        assert_eq!(ood.len(), 100);
        assert!(ood.iter().all(|s| (1..=50).contains(&s.truth)));
        assert_eq!(suite.test_only_tags(), vec![OUT_OF_DOMAIN_TAG.to_string()]);
    }

    #[test]
    fn noiseless_suite_redraws_collisions() {
        let suite = SuiteSpec {
            domains: vec![SuiteDomain {
                tag: "tiny".into(),
                train: Some(DomainSpec {
                    noise_sigma: 0.0,
                    ..DomainSpec::new(50, 1, 1000, 100.0)
                }),
                test: DomainSpec {
                    noise_sigma: 0.0,
                    ..DomainSpec::new(20, 1, 1000, 100.0)
                },
            }],
        };
        let data = generate_suite(&suite, 2).unwrap();
        check_disjoint(&data.train, &data.test).unwrap();
    }

    #[test]
    fn summary_examples() {
        let mk = |t: u64| Scene {
            features: vec![0.0; 8],
            truth: t,
            domain_tag: "d".into(),
            split: Split::Test,
        };
        let s = summarize(&[mk(7)]).unwrap();
        assert_eq!(
            s.rows[0],
            SummaryRow {
                domain: "d".into(),
                split: Split::Test,
                samples: 1,
                min: 7,
                max: 7,
                mean: 7.0
            }
        );
        let s = summarize(&[mk(1), mk(3)]).unwrap();
        assert_eq!(s.rows[0].mean, 2.0);
        assert!(matches!(summarize(&[]), Err(Error::Domain(_))));
        assert!(s.render_table().contains("samples"));
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());

        let scenes = generate_domain(&sheep(), "sheep-like", Split::Train, 5).unwrap();
        save_jsonl(&path, &scenes[..100]).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), scenes[..100].to_vec());

        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[41] = "{\"features\": [1.0, ".into();
        fs::write(&path, lines.join("\n")).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 42),
            other => panic!("expected parse error, got {other:?}"),
        }

        fs::write(&path, r#"{"features":[0.0],"truth":0,"domain_tag":"d","split":"test"}"#).unwrap();
        let err = load_jsonl(&path).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("truth"));
    }
}
