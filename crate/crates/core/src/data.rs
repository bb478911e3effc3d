//! Task streams: synthetic multi-domain generation, CSV ingestion, and
//! deterministic stratified splits.
//!
//! A stream is an ordered list of increments. Each increment contributes a
//! contiguous block of new class ids, a domain tag, and train/test samples.
//! The synthetic generator places the two domains in opposite half-spaces of
//! feature space and pairs up classes within a domain along a shared offset
//! direction, so related classes exist for the distillation terms to couple.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// One labelled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

/// One increment of a task stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementSpec {
    pub new_class_ids: Vec<usize>,
    pub domain: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Ordered increments; `stage_boundary` is the index of the first increment
/// of the second domain (equal to the increment count for single-domain
/// streams).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskStream {
    increments: Vec<IncrementSpec>,
    stage_boundary: usize,
}

impl TaskStream {
    /// Validates and wraps a list of increments.
    ///
    /// Class ids must form a gap-free `0..N` enumeration in increment order,
    /// every sample must carry one of its increment's new class ids, and the
    /// domain may change at most once.
    pub fn new(increments: Vec<IncrementSpec>) -> Result<Self> {
        if increments.is_empty() {
            return Err(Error::Domain("a stream needs at least one increment".into()));
        }
        let mut next_class = 0usize;
        for (i, inc) in increments.iter().enumerate() {
            if inc.new_class_ids.is_empty() {
                return Err(Error::Domain(format!("increment {i} adds no classes")));
            }
            for &cid in &inc.new_class_ids {
                if cid != next_class {
                    return Err(Error::Domain(format!(
                        "increment {i} declares class {cid}, expected {next_class} \
                         (ids must be gap-free in stream order)"
                    )));
                }
                next_class += 1;
            }
            for s in inc.train.iter().chain(inc.test.iter()) {
                if !inc.new_class_ids.contains(&s.label) {
                    return Err(Error::Domain(format!(
                        "increment {i} contains a sample labelled {} outside its classes",
                        s.label
                    )));
                }
                if s.domain != inc.domain {
                    return Err(Error::Domain(format!(
                        "increment {i} contains a sample from domain {} (increment domain {})",
                        s.domain, inc.domain
                    )));
                }
            }
            if inc.train.is_empty() {
                return Err(Error::Domain(format!("increment {i} has no training samples")));
            }
        }
        let mut stage_boundary = increments.len();
        let first_domain = increments[0].domain;
        for (i, inc) in increments.iter().enumerate() {
            if inc.domain != first_domain {
                stage_boundary = i;
                break;
            }
        }
        for (i, inc) in increments.iter().enumerate() {
            let expect = if i < stage_boundary {
                first_domain
            } else {
                increments[stage_boundary].domain
            };
            if inc.domain != expect {
                return Err(Error::Domain(
                    "domains must switch at most once along the stream".into(),
                ));
            }
        }
        Ok(TaskStream { increments, stage_boundary })
    }

    pub fn increments(&self) -> &[IncrementSpec] {
        &self.increments
    }

    pub fn stage_boundary(&self) -> usize {
        self.stage_boundary
    }

    pub fn total_classes(&self) -> usize {
        self.increments.iter().map(|i| i.new_class_ids.len()).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.increments[0].train[0].features.len()
    }
}

/// Parameters of the synthetic two-domain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dims: usize,
    pub cluster_spread: f64,
    /// Training samples generated per class.
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub classes_per_domain: Vec<usize>,
    /// Classes added by each increment, per domain. Lengths must sum to the
    /// matching `classes_per_domain` entry.
    pub increments_per_domain: Vec<Vec<usize>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dims: 16,
            cluster_spread: 0.35,
            samples_per_class: 160,
            test_per_class: 40,
            classes_per_domain: vec![7, 5],
            increments_per_domain: vec![vec![2, 1, 1, 1, 1, 1], vec![1, 1, 1, 1, 1]],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims < 2 {
            return Err(Error::Domain("generator needs dims >= 2".into()));
        }
        if !(self.cluster_spread >= 0.0) || !self.cluster_spread.is_finite() {
            return Err(Error::Domain("cluster_spread must be finite and >= 0".into()));
        }
        if self.samples_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Domain("samples_per_class and test_per_class must be >= 1".into()));
        }
        if self.classes_per_domain.is_empty()
            || self.classes_per_domain.len() != self.increments_per_domain.len()
        {
            return Err(Error::Domain(
                "classes_per_domain and increments_per_domain must align".into(),
            ));
        }
        if self.classes_per_domain.len() > 2 {
            return Err(Error::Domain("the generator supports at most two domains".into()));
        }
        for (d, (&classes, incs)) in
            self.classes_per_domain.iter().zip(self.increments_per_domain.iter()).enumerate()
        {
            if classes < 2 {
                return Err(Error::Domain(format!("domain {d} needs at least 2 classes")));
            }
            if incs.iter().sum::<usize>() != classes || incs.iter().any(|&n| n == 0) {
                return Err(Error::Domain(format!(
                    "domain {d} increment sizes must be positive and sum to {classes}"
                )));
            }
        }
        Ok(())
    }
}

/// Distance below which two cluster bases are re-drawn.
const MIN_BASE_SEPARATION: f64 = 2.5;
/// Offset between the two classes of a within-domain pair.
const PAIR_GAP: f64 = 1.5;

fn unit_vector(dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v: Vec<f64> = (0..dims).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates a two-domain stream of Gaussian clusters.
///
/// Domain 0 cluster bases live in the `x0 > 0` half-space and domain 1 bases
/// are mirrored into `x0 < 0`, standing in for a modality shift. Within a
/// domain, consecutive classes form pairs separated by a shared offset
/// direction, standing in for related conditions.
pub fn generate_synthetic_stream(spec: &SyntheticSpec, seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    let mut mean_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stream-means", 0));
    let mut increments = Vec::new();
    let mut class_id = 0usize;
    for (domain, incs) in spec.increments_per_domain.iter().enumerate() {
        let sign = if domain == 0 { 1.0 } else { -1.0 };
        let n_classes = spec.classes_per_domain[domain];
        let offset_dir = unit_vector(spec.dims, &mut mean_rng);
        // one base per class pair, kept apart by rejection
        let mut bases: Vec<Vec<f64>> = Vec::new();
        while bases.len() < n_classes.div_ceil(2) {
            let mut cand: Vec<f64> = (0..spec.dims).map(|_| mean_rng.random_range(-2.0..2.0)).collect();
            cand[0] = sign * mean_rng.random_range(1.0..3.0);
            let far_enough = bases.iter().all(|b| {
                let d2: f64 = b.iter().zip(cand.iter()).map(|(a, c)| (a - c) * (a - c)).sum();
                d2.sqrt() >= MIN_BASE_SEPARATION
            });
            if far_enough || bases.len() > 64 {
                bases.push(cand);
            }
        }
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
        for local in 0..n_classes {
            let base = &bases[local / 2];
            if local % 2 == 0 {
                means.push(base.clone());
            } else {
                means.push(
                    base.iter().zip(offset_dir.iter()).map(|(b, u)| b + PAIR_GAP * u).collect(),
                );
            }
        }
        let mut local_class = 0usize;
        for &n_new in incs {
            let ids: Vec<usize> = (class_id..class_id + n_new).collect();
            let mut train = Vec::new();
            let mut test = Vec::new();
            for k in 0..n_new {
                let mean = &means[local_class + k];
                let cid = class_id + k;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, "stream-class", cid as u64));
                let normal = Normal::new(0.0, 1.0).expect("valid normal");
                let mut draw = |n: usize, out: &mut Vec<Sample>| {
                    for _ in 0..n {
                        let features: Vec<f64> = mean
                            .iter()
                            .map(|m| m + spec.cluster_spread * normal.sample(&mut rng))
                            .collect();
                        out.push(Sample { features, label: cid, domain });
                    }
                };
                draw(spec.samples_per_class, &mut train);
                draw(spec.test_per_class, &mut test);
            }
            increments.push(IncrementSpec { new_class_ids: ids, domain, train, test });
            class_id += n_new;
            local_class += n_new;
        }
    }
    TaskStream::new(increments)
}

/// Loads `domain,label,f0,...,f{d-1}` rows. Line numbers in errors count the
/// header as line 1.
pub fn load_csv_dataset(path: &Path) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse { line: 0, msg: format!("{}: {e}", path.display()) })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.len() < 3 || &headers[0] != "domain" || &headers[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header domain,label,f0,...".into(),
        });
    }
    let dim = headers.len() - 2;
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if record.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", dim + 2, record.len()),
            });
        }
        let parse_usize = |field: &str, name: &str| {
            field.trim().parse::<usize>().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid {name} '{field}'"),
            })
        };
        let domain = parse_usize(&record[0], "domain")?;
        let label = parse_usize(&record[1], "label")?;
        let mut features = Vec::with_capacity(dim);
        for f in 0..dim {
            let raw = &record[f + 2];
            let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric feature '{raw}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("non-finite feature '{raw}'") });
            }
            features.push(v);
        }
        samples.push(Sample { features, label, domain });
    }
    Ok(samples)
}

/// Writes samples in the layout `load_csv_dataset` reads. Floats use the
/// shortest round-trip form so export-then-load is lossless.
pub fn save_csv_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    if samples.iter().any(|s| s.features.len() != dim) {
        return Err(Error::Shape("inconsistent feature dimension in dataset".into()));
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "domain,label")?;
    for f in 0..dim {
        write!(file, ",f{f}")?;
    }
    writeln!(file)?;
    for s in samples {
        write!(file, "{},{}", s.domain, s.label)?;
        for v in &s.features {
            write!(file, ",{v}")?;
        }
        writeln!(file)?;
    }
    Ok(())
}

/// Seeded stratified split: per class, a shuffled `train_fraction` share
/// goes to train and the rest to test. Disjoint and exhaustive.
pub fn split(dataset: &[Sample], train_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        per_class.entry(s.label).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut indices) in per_class {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", class as u64));
        indices.shuffle(&mut rng);
        let n_train = (indices.len() as f64 * train_fraction).round() as usize;
        let n_train = n_train.min(indices.len());
        for (k, idx) in indices.into_iter().enumerate() {
            if k < n_train {
                train.push(dataset[idx].clone());
            } else {
                test.push(dataset[idx].clone());
            }
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stream_shape() {
        let stream = generate_synthetic_stream(&SyntheticSpec::default(), 7).unwrap();
        assert_eq!(stream.increments().len(), 11);
        assert_eq!(stream.total_classes(), 12);
        assert_eq!(stream.stage_boundary(), 6);
        assert_eq!(stream.increments()[0].new_class_ids, vec![0, 1]);
        assert_eq!(stream.increments()[6].domain, 1);
        // head growth mirrors the 6-increment first stage reaching 7 classes
        let first_stage: usize =
            stream.increments()[..6].iter().map(|i| i.new_class_ids.len()).sum();
        assert_eq!(first_stage, 7);
    }

    #[test]
    fn stream_ids_are_gap_free() {
        let stream = generate_synthetic_stream(&SyntheticSpec::default(), 3).unwrap();
        let mut next = 0;
        for inc in stream.increments() {
            for &cid in &inc.new_class_ids {
                assert_eq!(cid, next);
                next += 1;
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_stream(&spec, 99).unwrap();
        let b = generate_synthetic_stream(&spec, 99).unwrap();
        for (x, y) in a.increments().iter().zip(b.increments()) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.test, y.test);
        }
    }

    #[test]
    fn domains_occupy_opposite_half_spaces() {
        let stream = generate_synthetic_stream(&SyntheticSpec::default(), 5).unwrap();
        for inc in stream.increments() {
            for s in inc.train.iter().chain(inc.test.iter()) {
                // bases sit at |x0| >= 1 and the spread is small, so the sign
                // of the first coordinate identifies the domain
                if inc.domain == 0 {
                    assert!(s.features[0] > 0.0);
                } else {
                    assert!(s.features[0] < 0.0);
                }
            }
        }
    }

    /// Separable limit: with no spread, classifying each test point by its
    /// nearest class centroid (computed from train data) is perfect.
    #[test]
    fn zero_spread_is_nearest_centroid_separable() {
        let spec = SyntheticSpec { cluster_spread: 0.0, samples_per_class: 5, test_per_class: 3, ..SyntheticSpec::default() };
        let stream = generate_synthetic_stream(&spec, 11).unwrap();
        let mut centroids: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for inc in stream.increments() {
            for s in &inc.train {
                let c = centroids.entry(s.label).or_insert_with(|| vec![0.0; spec.dims]);
                for (ci, fi) in c.iter_mut().zip(s.features.iter()) {
                    *ci += fi / spec.samples_per_class as f64;
                }
            }
        }
        for inc in stream.increments() {
            for s in &inc.test {
                let best = centroids
                    .iter()
                    .map(|(cid, c)| {
                        let d2: f64 =
                            c.iter().zip(s.features.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                        (cid, d2)
                    })
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .map(|(cid, _)| *cid)
                    .unwrap();
                assert_eq!(best, s.label);
            }
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut spec = SyntheticSpec { dims: 1, ..SyntheticSpec::default() };
        assert!(generate_synthetic_stream(&spec, 0).is_err());
        spec = SyntheticSpec { increments_per_domain: vec![vec![7], vec![5]], ..SyntheticSpec::default() };
        assert!(spec.validate().is_ok());
        spec = SyntheticSpec { increments_per_domain: vec![vec![6], vec![5]], ..SyntheticSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let stream = generate_synthetic_stream(
            &SyntheticSpec { samples_per_class: 3, test_per_class: 1, ..SyntheticSpec::default() },
            21,
        )
        .unwrap();
        let samples: Vec<Sample> = stream.increments()[0].train.clone();
        save_csv_dataset(&path, &samples).unwrap();
        let loaded = load_csv_dataset(&path).unwrap();
        assert_eq!(samples, loaded);
    }

    #[test]
    fn csv_reports_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "domain,label,f0,f1\n0,0,1.5,2.5\n0,1,3.5\n").unwrap();
        match load_csv_dataset(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "domain,label,f0,f1\n0,0,1.5,oops\n").unwrap();
        match load_csv_dataset(&path).unwrap_err() {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("oops"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_loads_valid_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ok.csv");
        std::fs::write(&path, "domain,label,f0,f1\n0,0,1.0,2.0\n0,1,-1.5,0.25\n1,2,0,0\n")
            .unwrap();
        let samples = load_csv_dataset(&path).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[1].features, vec![-1.5, 0.25]);
        assert_eq!(samples[2].domain, 1);
    }

    #[test]
    fn split_is_stratified_disjoint_exhaustive() {
        let mut dataset = Vec::new();
        for class in 0..3usize {
            for i in 0..10usize {
                dataset.push(Sample {
                    features: vec![class as f64, i as f64],
                    label: class,
                    domain: 0,
                });
            }
        }
        let (train, test) = split(&dataset, 0.5, 4).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(test.len(), 15);
        for class in 0..3usize {
            assert_eq!(train.iter().filter(|s| s.label == class).count(), 5);
        }
        let mut union: Vec<_> = train.iter().chain(test.iter()).cloned().collect();
        union.sort_by(|a, b| a.features.partial_cmp(&b.features).unwrap());
        let mut original = dataset.clone();
        original.sort_by(|a, b| a.features.partial_cmp(&b.features).unwrap());
        assert_eq!(union, original);
        // determinism
        let (train2, _) = split(&dataset, 0.5, 4).unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split(&[], 0.0, 1).is_err());
        assert!(split(&[], 1.0, 1).is_err());
    }
}
