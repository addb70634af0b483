//! Synthetic dataset generation, CSV ingestion, and Dirichlet non-IID
//! partitioning.
//!
//! All generators are bit-deterministic given their seeds; the Dirichlet
//! sampler draws Gamma(alpha, 1) variates from the project generator
//! ([`crate::seeds::Rng64`]) and normalizes, following the per-class
//! convention: for each class, client proportions are Dirichlet-sampled and
//! the class indices are dealt out by cumulative share.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeds::{subsystem_seed, Rng64};

/// A labelled dataset: one input row per sample, labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} rows",
                labels.len(),
                inputs.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Materializes the subset of samples at `indices` (in the given order).
    pub fn gather(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Size(format!("index {i} out of {}", self.len())));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            inputs: Matrix::new(indices.len(), d, data)?,
            labels,
            classes: self.classes,
        })
    }
}

/// Disjoint client shards covering a full index set.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn client_count(&self) -> usize {
        self.shards.len()
    }

    /// One line per client, indices space-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for shard in &self.shards {
            let toks: Vec<String> = shard.iter().map(|i| i.to_string()).collect();
            out.push_str(&toks.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut shards = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut shard = Vec::new();
            for tok in line.split_whitespace() {
                let idx: usize = tok
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad index {tok:?} on line {lineno}")))?;
                shard.push(idx);
            }
            shards.push(shard);
        }
        Ok(Self { shards })
    }
}

/// Gaussian-cluster classification task: class means seeded on the unit
/// sphere, per-cluster spread, labels balanced (round-robin) so any suffix
/// split stays class-balanced.
pub fn generate_synthetic(
    n: usize,
    d_x: usize,
    classes: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::Size(format!(
            "need at least one sample per class ({n} samples, {classes} classes)"
        )));
    }
    let mut rng = Rng64::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut m: Vec<f64> = (0..d_x).map(|_| normal.sample(&mut rng)).collect();
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in m.iter_mut() {
            *v /= norm;
        }
        means.push(m);
    }
    let mut data = Vec::with_capacity(n * d_x);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..d_x {
            data.push(means[c][j] + cluster_spread * normal.sample(&mut rng));
        }
        labels.push(c);
    }
    Dataset::new(Matrix::new(n, d_x, data)?, labels, classes)
}

/// Dirichlet non-IID partition: for each class, client proportions are drawn
/// from Dir(alpha, ..., alpha) and that class's shuffled indices are assigned
/// by cumulative share. Retries with derived seeds (up to 10) if any client
/// ends up empty.
pub fn dirichlet_partition(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::Input("need at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Input(format!("alpha must be positive, got {alpha}")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    for attempt in 0..10u64 {
        let mut rng = Rng64::seed_from_u64(subsystem_seed(seed, "dirichlet", &[attempt]));
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for c in 0..classes {
            let mut idx: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .map(|(i, _)| i)
                .collect();
            idx.shuffle(&mut rng);
            let props = dirichlet_proportions(clients, alpha, &mut rng);
            let mut cum = 0.0;
            let mut start = 0usize;
            for (k, &p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == clients {
                    idx.len()
                } else {
                    (cum * idx.len() as f64).round() as usize
                };
                let end = end.min(idx.len()).max(start);
                shards[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in shards.iter_mut() {
                s.sort_unstable();
            }
            return Ok(Partition { shards });
        }
    }
    Err(Error::Data(format!(
        "a client received zero samples in all 10 partition attempts \
         (K={clients}, alpha={alpha})"
    )))
}

fn dirichlet_proportions(k: usize, alpha: f64, rng: &mut Rng64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // All draws underflowed to zero (tiny alpha); fall back to a
        // one-hot assignment so the retry logic can proceed.
        let mut out = vec![0.0; k];
        out[0] = 1.0;
        return out;
    }
    draws.iter().map(|d| d / total).collect()
}

/// Uniform without-replacement index sample, deterministic in `seed`.
pub fn subsample_indices(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > n {
        return Err(Error::Size(format!("cannot draw {m} of {n} samples")));
    }
    let mut rng = Rng64::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first m entries are the sample.
    for i in 0..m {
        let j = i + (rng.next_u64() as usize) % (n - i);
        idx.swap(i, j);
    }
    idx.truncate(m);
    Ok(idx)
}

/// Uniform without-replacement subset of a dataset.
pub fn subsample(dataset: &Dataset, m: usize, seed: u64) -> Result<Dataset> {
    let idx = subsample_indices(dataset.len(), m, seed)?;
    dataset.gather(&idx)
}

/// Index split reserving the last `fraction` of samples for evaluation.
pub fn split_last_fraction(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let test_len = ((n as f64) * fraction).floor() as usize;
    let train_len = n - test_len;
    ((0..train_len).collect(), (train_len..n).collect())
}

/// Reads a CSV dataset: optional header row, last column is the integer
/// label, remaining columns are features.
pub fn read_csv(path: &std::path::Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    read_csv_str(&text)
}

pub fn read_csv_str(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(text.as_bytes());
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("csv record {i}: {e}")))?;
        if record.len() < 2 {
            return Err(Error::Parse(format!(
                "csv record {i} has {} fields, need at least 2",
                record.len()
            )));
        }
        let parsed: Option<Vec<f64>> = record.iter().map(|f| f.trim().parse().ok()).collect();
        let Some(values) = parsed else {
            if i == 0 {
                continue; // header row
            }
            return Err(Error::Parse(format!("non-numeric field in csv record {i}")));
        };
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse(format!(
                    "csv record {i} has {} fields, expected {w}",
                    values.len()
                )));
            }
            _ => {}
        }
        let label_raw = values[values.len() - 1];
        if label_raw < 0.0 || label_raw.fract() != 0.0 {
            return Err(Error::Data(format!(
                "csv record {i}: label {label_raw} is not a non-negative integer"
            )));
        }
        rows.push((values[..values.len() - 1].to_vec(), label_raw as usize));
    }
    if rows.is_empty() {
        return Err(Error::Data("csv contains no data rows".into()));
    }
    let d = rows[0].0.len();
    let classes = rows.iter().map(|(_, l)| l + 1).max().unwrap();
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for (features, label) in rows {
        data.extend_from_slice(&features);
        labels.push(label);
    }
    let n = labels.len();
    Dataset::new(Matrix::new(n, d, data)?, labels, classes)
}

/// Writes a dataset as CSV with a `f0,...,label` header.
pub fn write_csv(dataset: &Dataset, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, to_csv_string(dataset))?;
    Ok(())
}

pub fn to_csv_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..dataset.feature_dim())
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..dataset.len() {
        let mut fields: Vec<String> = dataset.inputs.row(i).iter().map(|v| format!("{v}")).collect();
        fields.push(dataset.labels[i].to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_all_zero_labels() {
        let ds = generate_synthetic(10, 3, 1, 0.5, 1).unwrap();
        assert!(ds.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn generation_deterministic() {
        let a = generate_synthetic(40, 5, 4, 0.3, 7).unwrap();
        let b = generate_synthetic(40, 5, 4, 0.3, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tight_clusters_separable_by_centroids() {
        let ds = generate_synthetic(500, 8, 5, 0.01, 3).unwrap();
        // Nearest-centroid oracle on empirical class means.
        let d = ds.feature_dim();
        let mut centroids = vec![vec![0.0; d]; ds.classes()];
        let mut counts = vec![0usize; ds.classes()];
        for i in 0..ds.len() {
            let c = ds.labels()[i];
            counts[c] += 1;
            for (j, v) in ds.inputs().row(i).iter().enumerate() {
                centroids[c][j] += v;
            }
        }
        for (c, count) in counts.iter().enumerate() {
            for v in centroids[c].iter_mut() {
                *v /= *count as f64;
            }
        }
        let mut correct = 0usize;
        for i in 0..ds.len() {
            let row = ds.inputs().row(i);
            let best = (0..ds.classes())
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&centroids[a]).map(|(x, m)| (x - m).powi(2)).sum();
                    let db: f64 = row.iter().zip(&centroids[b]).map(|(x, m)| (x - m).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == ds.labels()[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "centroid accuracy {acc}");
    }

    #[test]
    fn balanced_labels() {
        let ds = generate_synthetic(103, 4, 10, 0.2, 5).unwrap();
        let mut counts = vec![0usize; 10];
        for &l in ds.labels() {
            counts[l] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1);
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = vec![0, 1, 2, 0, 1, 2, 0];
        let p = dirichlet_partition(&labels, 1, 0.5, 1).unwrap();
        assert_eq!(p.shards().len(), 1);
        assert_eq!(p.shards()[0], vec![0, 1, 2, 3, 4, 5, 6]);
    }

    fn total_variation(counts: &[usize], reference: &[f64]) -> f64 {
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .zip(reference.iter())
            .map(|(&c, &r)| (c as f64 / total as f64 - r).abs())
            .sum::<f64>()
            / 2.0
    }

    #[test]
    fn huge_alpha_approaches_global_mix() {
        let ds = generate_synthetic(2000, 4, 10, 0.3, 11).unwrap();
        let global = vec![0.1f64; 10];
        let mut worst: f64 = 0.0;
        for seed in 0..50u64 {
            let p = dirichlet_partition(ds.labels(), 5, 1e6, seed).unwrap();
            for shard in p.shards() {
                let mut counts = vec![0usize; 10];
                for &i in shard {
                    counts[ds.labels()[i]] += 1;
                }
                worst = worst.max(total_variation(&counts, &global));
            }
        }
        assert!(worst <= 0.02, "worst TV distance {worst}");
    }

    #[test]
    fn small_alpha_concentrates_classes() {
        let ds = generate_synthetic(2000, 4, 10, 0.3, 13).unwrap();
        let mut shares = Vec::new();
        for seed in 0..50u64 {
            let p = dirichlet_partition(ds.labels(), 10, 0.1, seed).unwrap();
            for shard in p.shards() {
                let mut counts = vec![0usize; 10];
                for &i in shard {
                    counts[ds.labels()[i]] += 1;
                }
                let dominant = *counts.iter().max().unwrap();
                shares.push(dominant as f64 / shard.len() as f64);
            }
        }
        let mean = shares.iter().sum::<f64>() / shares.len() as f64;
        assert!(mean >= 0.5, "mean dominant-class share {mean}");
    }

    #[test]
    fn heterogeneity_decreases_with_alpha() {
        let ds = generate_synthetic(3000, 4, 10, 0.3, 17).unwrap();
        let global = vec![0.1f64; 10];
        let mut mean_tv = Vec::new();
        for &alpha in &[0.1, 1.0, 10.0, 1e6] {
            let mut tvs = Vec::new();
            for seed in 0..20u64 {
                let p = dirichlet_partition(ds.labels(), 8, alpha, seed).unwrap();
                for shard in p.shards() {
                    let mut counts = vec![0usize; 10];
                    for &i in shard {
                        counts[ds.labels()[i]] += 1;
                    }
                    tvs.push(total_variation(&counts, &global));
                }
            }
            mean_tv.push(tvs.iter().sum::<f64>() / tvs.len() as f64);
        }
        for w in mean_tv.windows(2) {
            assert!(w[0] > w[1], "TV not decreasing: {mean_tv:?}");
        }
    }

    #[test]
    fn partition_disjoint_and_covering() {
        let ds = generate_synthetic(500, 3, 7, 0.3, 19).unwrap();
        for (k, alpha, seed) in [(3usize, 0.2, 1u64), (7, 0.5, 2), (12, 5.0, 3)] {
            let p = dirichlet_partition(ds.labels(), k, alpha, seed).unwrap();
            let mut seen = vec![false; ds.len()];
            for shard in p.shards() {
                for &i in shard {
                    assert!(!seen[i], "index {i} assigned twice");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "not all indices covered");
        }
    }

    #[test]
    fn subsample_full_is_permutation() {
        let idx = subsample_indices(20, 20, 5).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_without_replacement() {
        let idx = subsample_indices(50, 30, 9).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 30);
    }

    #[test]
    fn subsample_too_large_errors() {
        assert!(subsample_indices(5, 6, 0).is_err());
    }

    #[test]
    fn subsample_single_index_uniform() {
        let n = 10usize;
        let trials = 10_000u64;
        let mut counts = vec![0usize; n];
        for seed in 0..trials {
            counts[subsample_indices(n, 1, seed).unwrap()[0]] += 1;
        }
        let expected = trials as f64 / n as f64;
        let sigma = (trials as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() <= 4.0 * sigma,
                "index {i} drawn {c} times (expected {expected} +- {sigma})"
            );
        }
    }

    #[test]
    fn partition_text_round_trip() {
        let labels = vec![0, 1, 0, 1, 2, 2, 0, 1];
        let p = dirichlet_partition(&labels, 3, 1.0, 4).unwrap();
        let back = Partition::from_text(&p.to_text()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn csv_round_trip_with_header() {
        let ds = generate_synthetic(25, 3, 4, 0.4, 21).unwrap();
        let text = to_csv_string(&ds);
        let back = read_csv_str(&text).unwrap();
        assert_eq!(ds.labels(), back.labels());
        assert_eq!(ds.inputs(), back.inputs());
    }

    #[test]
    fn csv_headerless_accepted() {
        let back = read_csv_str("1.5,2.5,0\n-1.0,0.25,1\n").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.classes(), 2);
        assert_eq!(back.labels(), &[0, 1]);
    }

    #[test]
    fn csv_bad_label_rejected() {
        assert!(read_csv_str("1.0,2.0,0.5\n").is_err());
        assert!(read_csv_str("1.0,2.0,-1\n").is_err());
    }

    #[test]
    fn split_fraction_sizes() {
        let (train, test) = split_last_fraction(10, 0.2);
        assert_eq!(train, (0..8).collect::<Vec<_>>());
        assert_eq!(test, vec![8, 9]);
    }
}
