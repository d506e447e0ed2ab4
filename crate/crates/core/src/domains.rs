//! Multi-domain datasets: the synthetic shifted-spurious generator, CSV
//! ingestion/emission, and per-step aligned minibatches.
//!
//! Every generated domain shares the invariant block: class means at the
//! vertices of a regular simplex (norm 2) plus isotropic noise. The spurious
//! block is a domain-private rotation of a second simplex layout, indexed by
//! a latent "spurious class" that equals the label with probability ρ and is
//! uniform otherwise. The last domain of a generated suite uses a fresh
//! rotation, so a model leaning on spurious features is misled there.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Fraction of each class routed to the validation split.
pub const VAL_FRACTION: f64 = 0.2;

/// Minimum Frobenius distance between the held-out rotation and any source rotation.
pub const MIN_ROTATION_GAP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    /// Number of source domains; one extra held-out domain is generated.
    pub num_sources: usize,
    pub num_classes: usize,
    pub n_per_domain: usize,
    pub d_inv: usize,
    pub d_spu: usize,
    pub spurious_strength: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            num_sources: 3,
            num_classes: 5,
            n_per_domain: 1000,
            d_inv: 8,
            d_spu: 8,
            spurious_strength: 0.9,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SuiteSpec {
    pub fn dim(&self) -> usize {
        self.d_inv + self.d_spu
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.num_sources < 2 {
            return bad(format!("need at least 2 source domains, got {}", self.num_sources));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return bad(format!(
                "spurious strength must lie in [0, 1], got {}",
                self.spurious_strength
            ));
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be positive and finite, got {}", self.noise));
        }
        if self.d_inv < self.num_classes - 1 {
            return bad(format!(
                "d_inv = {} cannot hold a {}-class simplex (needs {})",
                self.d_inv,
                self.num_classes,
                self.num_classes - 1
            ));
        }
        if self.d_spu != 0 && self.d_spu < self.num_classes - 1 {
            return bad(format!(
                "d_spu = {} must be 0 or at least {}",
                self.d_spu,
                self.num_classes - 1
            ));
        }
        if self.n_per_domain < 2 * self.num_classes {
            return bad(format!(
                "n_per_domain = {} too small for {} classes",
                self.n_per_domain, self.num_classes
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub name: String,
    /// N × d.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Vec<Split>,
    /// Latent spurious class per sample (generated suites only).
    pub spurious_labels: Option<Vec<usize>>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        domain_id: usize,
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split_seed: u64,
    ) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelRange {
                label,
                classes: num_classes,
            });
        }
        let split = stratified_split(&labels, num_classes, split_seed ^ (domain_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let train_idx = (0..labels.len()).filter(|&i| split[i] == Split::Train).collect();
        let val_idx = (0..labels.len()).filter(|&i| split[i] == Split::Val).collect();
        Ok(DomainDataset {
            domain_id,
            name: name.into(),
            features,
            labels,
            num_classes,
            split,
            spurious_labels: None,
            train_idx,
            val_idx,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val_idx
    }

    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn val_set(&self) -> (Tensor, Vec<usize>) {
        self.subset(&self.val_idx)
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        (self.features.clone(), self.labels.clone())
    }
}

/// Per class: shuffle members and send `round(0.2·n_k)` of them to validation.
fn stratified_split(labels: &[usize], num_classes: usize, seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = vec![Split::Train; labels.len()];
    for k in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        members.shuffle(&mut rng);
        let n_val = (members.len() as f64 * VAL_FRACTION).round() as usize;
        for &i in &members[..n_val] {
            split[i] = Split::Val;
        }
    }
    split
}

/// A collection of domains sharing feature width and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub domains: Vec<DomainDataset>,
    pub num_classes: usize,
    pub dim: usize,
    /// Generator provenance, absent for CSV suites.
    pub spec: Option<SuiteSpec>,
    /// Row-major d_spu × d_spu spurious rotation per domain (generated suites only).
    pub rotations: Vec<Vec<f64>>,
}

impl Suite {
    pub fn from_domains(domains: Vec<DomainDataset>) -> Result<Self> {
        let first = domains
            .first()
            .ok_or_else(|| Error::Invalid("a suite needs at least one domain".into()))?;
        let (num_classes, dim) = (first.num_classes, first.dim());
        for d in &domains {
            if d.num_classes != num_classes || d.dim() != dim {
                return Err(Error::Invalid(format!(
                    "domain {} has d={}, K={} but the suite has d={dim}, K={num_classes}",
                    d.domain_id,
                    d.dim(),
                    d.num_classes
                )));
            }
        }
        Ok(Suite {
            domains,
            num_classes,
            dim,
            spec: None,
            rotations: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Index of the domain with the given id.
    pub fn position(&self, domain_id: usize) -> Option<usize> {
        self.domains.iter().position(|d| d.domain_id == domain_id)
    }

    /// Sources = every domain except `held_out`.
    pub fn leave_out(&self, held_out: usize) -> Result<DomainSplit> {
        if self.position(held_out).is_none() {
            return Err(Error::Invalid(format!("no domain with id {held_out}")));
        }
        let sources: Vec<usize> = self
            .domains
            .iter()
            .map(|d| d.domain_id)
            .filter(|&id| id != held_out)
            .collect();
        if sources.len() < 2 {
            return Err(Error::Invalid(format!(
                "holding out domain {held_out} leaves {} source domain(s); at least 2 are needed",
                sources.len()
            )));
        }
        Ok(DomainSplit {
            sources,
            target: Some(held_out),
        })
    }

    /// The generator's designated split: all but the last domain are sources.
    pub fn default_split(&self) -> Result<DomainSplit> {
        let last = self
            .domains
            .last()
            .ok_or_else(|| Error::Invalid("empty suite".into()))?
            .domain_id;
        self.leave_out(last)
    }

    pub fn domain(&self, domain_id: usize) -> &DomainDataset {
        &self.domains[self.position(domain_id).expect("unknown domain id")]
    }
}

/// Which domains train (in expert order) and which one is held out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSplit {
    pub sources: Vec<usize>,
    pub target: Option<usize>,
}

fn simplex_vertices(num_classes: usize, dim: usize, norm: f64) -> Vec<Vec<f64>> {
    // Helmert coordinates of e_k - 1/K in the (K-1)-dimensional complement of 1.
    let k = num_classes;
    let raw: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut v = vec![0.0; dim];
            for j in 1..k {
                let h = (j * (j + 1)) as f64;
                v[j - 1] = if c < j {
                    1.0 / h.sqrt()
                } else if c == j {
                    -(j as f64) / h.sqrt()
                } else {
                    0.0
                };
            }
            v
        })
        .collect();
    raw.into_iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x * norm / n).collect()
        })
        .collect()
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows.concat()
}

pub fn frobenius_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix_seed(seed, stream)
}

/// Generates `num_sources` source domains plus one held-out domain.
pub fn generate_suite(spec: &SuiteSpec) -> Result<Suite> {
    spec.validate()?;
    let k = spec.num_classes;
    let n_domains = spec.num_sources + 1;
    let inv_means = simplex_vertices(k, spec.d_inv, 2.0);
    let spu_means = if spec.d_spu > 0 {
        simplex_vertices(k, spec.d_spu, 2.0)
    } else {
        vec![Vec::new(); k]
    };

    let mut rot_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xA11CE));
    let mut rotations: Vec<Vec<f64>> = (0..spec.num_sources)
        .map(|_| random_rotation(spec.d_spu, &mut rot_rng))
        .collect();
    loop {
        let candidate = random_rotation(spec.d_spu, &mut rot_rng);
        let clear = spec.d_spu == 0
            || rotations
                .iter()
                .all(|r| frobenius_distance(r, &candidate) > MIN_ROTATION_GAP);
        if clear {
            rotations.push(candidate);
            break;
        }
    }

    let d = spec.dim();
    let mut domains = Vec::with_capacity(n_domains);
    for (dom, rotation) in rotations.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, dom as u64 + 1));
        let mut labels: Vec<usize> = (0..spec.n_per_domain).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let mut spurious = Vec::with_capacity(labels.len());
        let mut data = Vec::with_capacity(labels.len() * d);
        for &y in &labels {
            let s = if rng.random::<f64>() < spec.spurious_strength {
                y
            } else {
                rng.random_range(0..k)
            };
            spurious.push(s);
            for j in 0..spec.d_inv {
                let eps: f64 = rng.sample(StandardNormal);
                data.push(inv_means[y][j] + spec.noise * eps);
            }
            for r in 0..spec.d_spu {
                let mean: f64 = (0..spec.d_spu)
                    .map(|c| rotation[r * spec.d_spu + c] * spu_means[s][c])
                    .sum();
                let eps: f64 = rng.sample(StandardNormal);
                data.push(mean + spec.noise * eps);
            }
        }
        let name = if dom < spec.num_sources {
            format!("source-{dom}")
        } else {
            "held-out".to_string()
        };
        let features = Tensor::new(vec![labels.len(), d], data)?;
        let mut ds = DomainDataset::new(dom, name, features, labels, k, spec.seed)?;
        ds.spurious_labels = Some(spurious);
        domains.push(ds);
    }
    let mut suite = Suite::from_domains(domains)?;
    suite.spec = Some(spec.clone());
    suite.rotations = rotations;
    Ok(suite)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Mean over classes of corr(1[y = k], 1[s = k]) using the latent spurious class.
///
/// With `s = y` w.p. ρ and uniform otherwise, each per-class correlation is ρ.
pub fn latent_spurious_correlation(ds: &DomainDataset) -> Option<f64> {
    let s = ds.spurious_labels.as_ref()?;
    let k = ds.num_classes;
    let total: f64 = (0..k)
        .map(|c| {
            let a: Vec<f64> = ds.labels.iter().map(|&y| (y == c) as u8 as f64).collect();
            let b: Vec<f64> = s.iter().map(|&v| (v == c) as u8 as f64).collect();
            pearson(&a, &b)
        })
        .sum();
    Some(total / k as f64)
}

/// Mean over classes of corr(⟨x_spu, R ν_k⟩, 1[y = k]) measured on features.
pub fn spurious_projection_correlation(suite: &Suite, domain_id: usize) -> Option<f64> {
    let spec = suite.spec.as_ref()?;
    if spec.d_spu == 0 {
        return None;
    }
    let pos = suite.position(domain_id)?;
    let ds = &suite.domains[pos];
    let rot = &suite.rotations[pos];
    let means = simplex_vertices(spec.num_classes, spec.d_spu, 2.0);
    let k = spec.num_classes;
    let total: f64 = (0..k)
        .map(|c| {
            let dir: Vec<f64> = (0..spec.d_spu)
                .map(|r| (0..spec.d_spu).map(|j| rot[r * spec.d_spu + j] * means[c][j]).sum())
                .collect();
            let proj: Vec<f64> = (0..ds.len())
                .map(|i| {
                    let row = &ds.features.row(i)[spec.d_inv..];
                    row.iter().zip(&dir).map(|(x, w)| x * w).sum()
                })
                .collect();
            let ind: Vec<f64> = ds.labels.iter().map(|&y| (y == c) as u8 as f64).collect();
            pearson(&proj, &ind)
        })
        .sum();
    Some(total / k as f64)
}

/// How to read a multi-domain CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvOptions {
    pub domain_column: String,
    pub label_column: String,
    /// Class count; inferred as `max label + 1` when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Standardize features to zero mean and unit variance over the pooled domains.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_true() -> bool {
    true
}

impl CsvOptions {
    pub fn new(domain_column: &str, label_column: &str) -> Self {
        CsvOptions {
            domain_column: domain_column.into(),
            label_column: label_column.into(),
            num_classes: None,
            standardize: true,
            split_seed: 0,
        }
    }
}

/// Reads one or more CSV files (same header) into one dataset per distinct domain value.
pub fn load_csv_suite(paths: &[PathBuf], opts: &CsvOptions) -> Result<Suite> {
    let mut header: Option<Vec<String>> = None;
    let mut feature_cols: Vec<usize> = Vec::new();
    let (mut dom_col, mut lab_col) = (0, 0);
    let mut rows: Vec<(String, Vec<f64>, usize)> = Vec::new();

    for path in paths {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_error(path, 0, "", e.to_string()))?;
        let this_header: Vec<String> = reader
            .headers()
            .map_err(|e| csv_error(path, 0, "", e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        match &header {
            Some(h) if *h != this_header => {
                return Err(csv_error(path, 0, "", "header differs from the first file".into()));
            }
            Some(_) => {}
            None => {
                let find = |name: &str| {
                    this_header
                        .iter()
                        .position(|h| h == name)
                        .ok_or_else(|| csv_error(path, 0, name, "missing column".into()))
                };
                dom_col = find(&opts.domain_column)?;
                lab_col = find(&opts.label_column)?;
                feature_cols = (0..this_header.len())
                    .filter(|&c| c != dom_col && c != lab_col)
                    .collect();
                if feature_cols.is_empty() {
                    return Err(csv_error(path, 0, "", "no feature columns".into()));
                }
                header = Some(this_header);
            }
        }
        let names = header.as_ref().unwrap();
        for (r, record) in reader.records().enumerate() {
            let row_no = r + 2;
            let record = record.map_err(|e| csv_error(path, row_no, "", e.to_string()))?;
            let mut features = Vec::with_capacity(feature_cols.len());
            for &c in &feature_cols {
                let cell = record.get(c).unwrap_or("");
                let v: f64 = cell.trim().parse().map_err(|_| {
                    csv_error(path, row_no, &names[c], format!("non-numeric value {cell:?}"))
                })?;
                features.push(v);
            }
            let label_cell = record.get(lab_col).unwrap_or("").trim();
            let label: usize = label_cell.parse().map_err(|_| {
                csv_error(path, row_no, &names[lab_col], format!("invalid label {label_cell:?}"))
            })?;
            if let Some(k) = opts.num_classes {
                if label >= k {
                    return Err(Error::LabelRange { label, classes: k });
                }
            }
            let domain = record.get(dom_col).unwrap_or("").trim().to_string();
            rows.push((domain, features, label));
        }
    }

    let num_classes = match opts.num_classes {
        Some(k) => k,
        None => rows.iter().map(|r| r.2).max().map_or(0, |m| m + 1).max(2),
    };

    // Integer domain values keep their numeric id; other values are ranked.
    let all_int = rows.iter().all(|r| r.0.parse::<usize>().is_ok());
    let mut groups: BTreeMap<(usize, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let key = if all_int {
            (r.0.parse().unwrap(), String::new())
        } else {
            (0, r.0.clone())
        };
        groups.entry(key).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Invalid(format!(
            "CSV input holds {} distinct domain(s); at least 2 are needed",
            groups.len()
        )));
    }

    let d = feature_cols.len();
    let (mean, std) = if opts.standardize {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(&r.1) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(&r.1).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        (mean, std)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };

    let mut domains = Vec::new();
    for (rank, ((num_id, name), members)) in groups.into_iter().enumerate() {
        let (id, name) = if all_int {
            (num_id, rows[members[0]].0.clone())
        } else {
            (rank, name)
        };
        let mut data = Vec::with_capacity(members.len() * d);
        let mut labels = Vec::with_capacity(members.len());
        for &i in &members {
            for j in 0..d {
                let v = rows[i].1[j];
                data.push(if opts.standardize { (v - mean[j]) / std[j] } else { v });
            }
            labels.push(rows[i].2);
        }
        let features = Tensor::new(vec![members.len(), d], data)?;
        domains.push(DomainDataset::new(id, name, features, labels, num_classes, opts.split_seed)?);
    }
    Suite::from_domains(domains)
}

fn csv_error(path: &Path, row: usize, column: &str, message: String) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    }
}

/// Writes `features…, domain, label` rows with round-trip float formatting.
pub fn write_domain_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, "", e.to_string()))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("domain".into());
    header.push("label".into());
    w.write_record(&header)
        .map_err(|e| csv_error(path, 0, "", e.to_string()))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.domain_id.to_string());
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec)
            .map_err(|e| csv_error(path, i + 2, "", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One source domain's slice of a step's batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPart {
    pub domain_id: usize,
    /// Row indices into the domain's full dataset.
    pub sample_idx: Vec<usize>,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Per-domain minibatches and their row-aligned concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub parts: Vec<BatchPart>,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
}

/// Deterministic epoch-wise sampler over the training splits of the sources.
///
/// Sample position `p = step·b + j` of a domain maps to epoch `p / n` and
/// slot `p % n` of that epoch's seeded permutation, so batches depend only
/// on `(seed, step)`.
pub struct Batcher<'a> {
    domains: Vec<&'a DomainDataset>,
    batch_per_domain: usize,
    seed: u64,
    cache: HashMap<(usize, usize), Vec<usize>>,
}

impl<'a> Batcher<'a> {
    pub fn new(suite: &'a Suite, sources: &[usize], batch_per_domain: usize, seed: u64) -> Result<Self> {
        if batch_per_domain == 0 {
            return Err(Error::Invalid("batch_per_domain must be positive".into()));
        }
        let domains: Vec<&DomainDataset> = sources
            .iter()
            .map(|&id| {
                suite
                    .position(id)
                    .map(|p| &suite.domains[p])
                    .ok_or_else(|| Error::Invalid(format!("no domain with id {id}")))
            })
            .collect::<Result<_>>()?;
        for d in &domains {
            if d.train_indices().len() < batch_per_domain {
                return Err(Error::Invalid(format!(
                    "batch_per_domain = {batch_per_domain} exceeds the {} training samples of domain {}",
                    d.train_indices().len(),
                    d.domain_id
                )));
            }
        }
        Ok(Batcher {
            domains,
            batch_per_domain,
            seed,
            cache: HashMap::new(),
        })
    }

    fn permutation(&mut self, pos: usize, epoch: usize) -> &[usize] {
        let seed = self.seed;
        let domain = self.domains[pos];
        self.cache.retain(|&(p, e), _| p != pos || e + 1 >= epoch);
        self.cache.entry((pos, epoch)).or_insert_with(|| {
            let mut idx = domain.train_indices().to_vec();
            let stream = ((domain.domain_id as u64) << 32) ^ epoch as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stream));
            idx.shuffle(&mut rng);
            idx
        })
    }

    pub fn batch(&mut self, step: usize) -> Batch {
        let b = self.batch_per_domain;
        let mut parts = Vec::with_capacity(self.domains.len());
        for pos in 0..self.domains.len() {
            let n = self.domains[pos].train_indices().len();
            let mut sample_idx = Vec::with_capacity(b);
            for j in 0..b {
                let p = step * b + j;
                let perm = self.permutation(pos, p / n);
                sample_idx.push(perm[p % n]);
            }
            let ds = self.domains[pos];
            let (x, labels) = ds.subset(&sample_idx);
            parts.push(BatchPart {
                domain_id: ds.domain_id,
                sample_idx,
                x,
                labels,
            });
        }
        let xs: Vec<&Tensor> = parts.iter().map(|p| &p.x).collect();
        let x = Tensor::concat_rows(&xs).expect("sources share feature width");
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        let domain_ids = parts
            .iter()
            .flat_map(|p| std::iter::repeat_n(p.domain_id, p.labels.len()))
            .collect();
        Batch {
            parts,
            x,
            labels,
            domain_ids,
        }
    }
}

/// Convenience wrapper: the batch for `(seed, step)` over `sources`.
pub fn make_batches(
    suite: &Suite,
    sources: &[usize],
    batch_per_domain: usize,
    seed: u64,
    step: usize,
) -> Result<Batch> {
    Ok(Batcher::new(suite, sources, batch_per_domain, seed)?.batch(step))
}
