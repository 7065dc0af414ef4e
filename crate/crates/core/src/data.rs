//! Synthetic Gaussian-cluster data, CSV ingestion and non-IID client partitioning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labelled feature rows, `N × input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Argument(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::dim(labels.len() * input_dim, inputs.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Argument(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset inputs must be finite".into()));
        }
        Ok(Self {
            inputs,
            labels,
            input_dim,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs,
            labels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            split,
        }
    }

    /// Concatenates datasets sharing shape and class count.
    pub fn concat(parts: &[&Dataset], split: Split) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Degenerate("nothing to concatenate".into()))?;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.input_dim != first.input_dim {
                return Err(Error::dim(first.input_dim, p.input_dim));
            }
            if p.num_classes != first.num_classes {
                return Err(Error::dim(first.num_classes, p.num_classes));
            }
            inputs.extend_from_slice(&p.inputs);
            labels.extend_from_slice(&p.labels);
        }
        Ok(Dataset {
            inputs,
            labels,
            input_dim: first.input_dim,
            num_classes: first.num_classes,
            split,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, labels, self.input_dim)
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone(), self.input_dim)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Class means of a Gaussian-cluster distribution. Datasets sampled from the
/// same source share class structure regardless of the sampling seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSource {
    means: Vec<f64>,
    input_dim: usize,
    num_classes: usize,
}

impl SyntheticSource {
    /// One mean per class, uniform on the sphere of radius `class_separation`.
    pub fn new(num_classes: usize, input_dim: usize, class_separation: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 || input_dim == 0 {
            return Err(Error::Argument(
                "num_classes and input_dim must be positive".into(),
            ));
        }
        if !(class_separation > 0.0 && class_separation.is_finite()) {
            return Err(Error::Argument(format!(
                "class_separation must be positive, got {class_separation}"
            )));
        }
        let mut rng = rng::rng_for(seed, &[stream::SYNTH_MEANS]);
        let mut means = Vec::with_capacity(num_classes * input_dim);
        for _ in 0..num_classes {
            let dir: Vec<f64> = loop {
                let v: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                if v.iter().any(|x: &f64| *x != 0.0) {
                    break v;
                }
            };
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            means.extend(dir.iter().map(|x| class_separation * x / norm));
        }
        Ok(Self {
            means,
            input_dim,
            num_classes,
        })
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.input_dim..(class + 1) * self.input_dim]
    }

    /// `samples_per_class` unit-covariance draws around each mean, class-major order.
    pub fn sample(&self, samples_per_class: usize, split: Split, seed: u64) -> Result<Dataset> {
        if samples_per_class == 0 {
            return Err(Error::Argument("samples_per_class must be positive".into()));
        }
        let mut rng = rng::rng_for(seed, &[stream::SYNTH_SAMPLES]);
        let n = self.num_classes * samples_per_class;
        let mut inputs = Vec::with_capacity(n * self.input_dim);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.num_classes {
            for _ in 0..samples_per_class {
                for &m in self.mean(c) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    inputs.push(m + z);
                }
                labels.push(c);
            }
        }
        Dataset::new(inputs, labels, self.input_dim, self.num_classes, split)
    }
}

/// Gaussian clusters with one mean per class on a sphere of radius
/// `class_separation` and unit within-class covariance.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    SyntheticSource::new(num_classes, input_dim, class_separation, seed)?.sample(
        samples_per_class,
        Split::Train,
        seed,
    )
}

/// Loads a headered CSV whose last column is an integer class label.
pub fn load_csv(path: &Path, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, 0, e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(parse_err(
            1,
            headers.len(),
            "need at least one feature column and a label column".into(),
        ));
    }
    let width = headers.len();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record.map_err(|e| parse_err(row, 0, e.to_string()))?;
        if record.len() != width {
            return Err(parse_err(
                row,
                record.len(),
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        for (col, field) in record.iter().enumerate().take(width - 1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(row, col + 1, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, col + 1, format!("non-finite value {field:?}")));
            }
            inputs.push(v);
        }
        let label_field = &record[width - 1];
        let y: usize = label_field
            .trim()
            .parse()
            .map_err(|_| parse_err(row, width, format!("not a class label: {label_field:?}")))?;
        if let Some(c) = num_classes {
            if y >= c {
                return Err(parse_err(row, width, format!("label {y} out of range for {c} classes")));
            }
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(parse_err(2, 0, "no data rows".into()));
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(inputs, labels, width - 1, classes, split)
}

/// Assignment of dataset indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub beta: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// Per-client class histograms.
    pub fn histograms(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|idx| {
                let mut h = vec![0; num_classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Shannon entropy (nats) of each client's label distribution.
    pub fn label_entropies(&self, labels: &[usize], num_classes: usize) -> Vec<f64> {
        self.histograms(labels, num_classes)
            .iter()
            .map(|h| {
                let n: usize = h.iter().sum();
                if n == 0 {
                    return 0.0;
                }
                h.iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / n as f64;
                        -p * p.ln()
                    })
                    .sum()
            })
            .collect()
    }

    /// True when every index in `0..n` appears in exactly one client list.
    pub fn covers_exactly(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for idx in &self.client_indices {
            for &i in idx {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Proportions `p ~ Dirichlet(β·1_k)` via normalized Gamma draws. If every
/// draw underflows (possible for very small β) the mass goes to one client
/// chosen uniformly, the β → 0 limit of the distribution.
fn dirichlet_proportions(rng: &mut ChaCha8Rng, gamma: &Gamma<f64>, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Inverse-CDF draw from a categorical distribution.
fn categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the cumulative sum short of 1
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn indices_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    by_class
}

/// Moves one sample from the largest client into each empty one, then sorts.
fn repair_and_sort(clients: &mut [Vec<usize>]) {
    for k in 0..clients.len() {
        if clients[k].is_empty() {
            let donor = (0..clients.len())
                .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
                .expect("at least one client");
            if clients[donor].len() > 1 {
                let moved = clients[donor].pop().expect("non-empty donor");
                clients[k].push(moved);
            }
        }
    }
    for c in clients.iter_mut() {
        c.sort_unstable();
    }
}

fn check_beta(beta: f64) -> Result<Gamma<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Argument(format!("beta must be positive, got {beta}")));
    }
    Gamma::new(beta, 1.0).map_err(|e| Error::Argument(e.to_string()))
}

/// Label-skewed split: for each class (ascending), draw `p ~ Dirichlet(β·1_K)`
/// and send each of that class's samples (ascending index) to a client drawn
/// from `p`. Empty clients receive one sample from the largest client.
pub fn dirichlet_partition(labels: &[usize], k: usize, beta: f64, seed: u64) -> Result<Partition> {
    let gamma = check_beta(beta)?;
    if k == 0 {
        return Err(Error::Argument("client count must be positive".into()));
    }
    let mut clients = vec![Vec::new(); k];
    if k == 1 {
        clients[0] = (0..labels.len()).collect();
        return Ok(Partition {
            client_indices: clients,
            beta,
            seed,
        });
    }
    let mut rng = rng::rng_for(seed, &[stream::PARTITION]);
    for idx in indices_by_class(labels).values() {
        let p = dirichlet_proportions(&mut rng, &gamma, k);
        for &i in idx {
            clients[categorical(&mut rng, &p)].push(i);
        }
    }
    repair_and_sort(&mut clients);
    Ok(Partition {
        client_indices: clients,
        beta,
        seed,
    })
}

/// Like [`dirichlet_partition`], except every sample of `exclusive_classes`
/// goes to `target` and the remaining classes are spread over the other
/// `K − 1` clients only. The target therefore holds exactly the exclusive classes.
pub fn exclusive_class_partition(
    labels: &[usize],
    k: usize,
    beta: f64,
    seed: u64,
    target: usize,
    exclusive_classes: &[usize],
) -> Result<Partition> {
    let gamma = check_beta(beta)?;
    if k < 2 {
        return Err(Error::Argument(
            "exclusive-class partition needs at least two clients".into(),
        ));
    }
    if target >= k {
        return Err(Error::Argument(format!("target {target} out of range for {k} clients")));
    }
    let others: Vec<usize> = (0..k).filter(|&c| c != target).collect();
    let mut clients = vec![Vec::new(); k];
    let mut rng = rng::rng_for(seed, &[stream::PARTITION]);
    for (class, idx) in indices_by_class(labels) {
        if exclusive_classes.contains(&class) {
            clients[target].extend_from_slice(&idx);
            continue;
        }
        let p = dirichlet_proportions(&mut rng, &gamma, others.len());
        for &i in &idx {
            clients[others[categorical(&mut rng, &p)]].push(i);
        }
    }
    if clients[target].is_empty() {
        return Err(Error::Degenerate(
            "exclusive classes have no samples; target would be empty".into(),
        ));
    }
    // the target never donates: it must keep exactly the exclusive classes
    let mut rest: Vec<Vec<usize>> = others.iter().map(|&c| std::mem::take(&mut clients[c])).collect();
    repair_and_sort(&mut rest);
    for (&c, idx) in others.iter().zip(rest) {
        clients[c] = idx;
    }
    clients[target].sort_unstable();
    Ok(Partition {
        client_indices: clients,
        beta,
        seed,
    })
}

/// Stratified train/test split of one client's samples. The test size is
/// `round(test_fraction · n)` clamped to `[1, n − 1]`, distributed over the
/// client's classes by largest remainder.
pub fn split_client(
    dataset: &Dataset,
    partition: &Partition,
    client_id: usize,
    test_fraction: f64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let idx = partition
        .client_indices
        .get(client_id)
        .ok_or_else(|| Error::Argument(format!("unknown client {client_id}")))?;
    let n = idx.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "client {client_id} has {n} sample(s); need at least 2 to split"
        )));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        by_class.entry(dataset.labels()[i]).or_default().push(i);
    }
    let frac = n_test as f64 / n as f64;
    let mut quotas: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(&c, members)| {
            let exact = frac * members.len() as f64;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut remaining = n_test - quotas.iter().map(|q| q.1).sum::<usize>();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &o in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        let cap = by_class[&quotas[o].0].len();
        if quotas[o].1 < cap {
            quotas[o].1 += 1;
            remaining -= 1;
        }
    }

    let mut rng = rng::rng_for(partition.seed, &[stream::CLIENT_SPLIT, client_id as u64]);
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (class, quota, _) in quotas {
        let mut members = by_class[&class].clone();
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..quota]);
        train.extend_from_slice(&members[quota..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train, Split::Train), dataset.subset(&test, Split::Test)))
}
