//! Datasets: synthetic biased generation, CSV ingestion, seeded splits and
//! feature-space augmentation.
//!
//! CSV schema: a header `f0,...,f{d-1},target,sensitive` followed by one
//! row per sample, decimal floats for features, a non-negative integer
//! target and a sensitive attribute of 0 or 1.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    targets: Vec<usize>,
    sensitive: Vec<u8>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Vec<usize>, sensitive: Vec<u8>, num_classes: usize) -> Result<Self> {
        let m = features.rows();
        if targets.len() != m || sensitive.len() != m {
            return Err(Error::data(format!(
                "{m} feature rows, {} targets, {} sensitive values",
                targets.len(),
                sensitive.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::data(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= num_classes) {
            return Err(Error::data(format!("target {t} out of range for {num_classes} classes")));
        }
        if let Some(a) = sensitive.iter().find(|&&a| a > 1) {
            return Err(Error::data(format!("sensitive attribute must be 0 or 1, got {a}")));
        }
        if !features.is_finite() {
            return Err(Error::data("features contain NaN or infinity"));
        }
        Ok(Self {
            features,
            targets,
            sensitive,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn sensitive(&self) -> &[u8] {
        &self.sensitive
    }

    /// Sample counts of sensitive groups 0 and 1.
    pub fn group_counts(&self) -> [usize; 2] {
        let ones = self.sensitive.iter().filter(|&&a| a == 1).count();
        [self.len() - ones, ones]
    }

    /// Same data, re-declared with `num_classes` classes (must cover every target).
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        Self::new(self.features, self.targets, self.sensitive, num_classes)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            sensitive: indices.iter().map(|&i| self.sensitive[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("target".into());
        header.push("sensitive".into());
        w.write_record(&header).map_err(csv_io)?;
        for (i, row) in self.features.iter_rows().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.targets[i].to_string());
            rec.push(self.sensitive[i].to_string());
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads a dataset in the CSV schema above. The class count is one more
/// than the largest target seen (at least 2).
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_csv(file, path)
}

pub fn read_csv<R: Read>(reader: R, path: &Path) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let schema_err = |line: u64, message: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let width = header.len();
    if width < 3 {
        return Err(schema_err(1, format!("expected at least 3 columns, found {width}")));
    }
    let dim = width - 2;
    for (j, name) in header.iter().take(dim).enumerate() {
        if name.trim() != format!("f{j}") {
            return Err(schema_err(1, format!("column {j} must be named f{j}, found `{name}`")));
        }
    }
    if header[dim].trim() != "target" || header[dim + 1].trim() != "sensitive" {
        return Err(schema_err(1, "last two columns must be `target,sensitive`".into()));
    }

    let mut values = Vec::new();
    let mut targets = Vec::new();
    let mut sensitive = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(schema_err(line, format!("expected {width} columns, found {}", rec.len())));
        }
        for j in 0..dim {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("f{j}: `{}` is not a number", &rec[j])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("f{j}: non-finite value")));
            }
            values.push(v);
        }
        let t: usize = rec[dim]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("target: `{}` is not a class index", &rec[dim])))?;
        let a: u8 = match rec[dim + 1].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(schema_err(line, format!("sensitive must be 0 or 1, found `{other}`")));
            }
        };
        targets.push(t);
        sensitive.push(a);
    }
    let num_classes = targets.iter().max().map_or(2, |&t| (t + 1).max(2));
    let features = Matrix::new(targets.len(), dim, values)?;
    Dataset::new(features, targets, sensitive, num_classes)
}

/// Parameters of the synthetic biased dataset.
///
/// Signal dimensions carry the class through group-specific Gaussian noise.
/// Spurious dimensions are an exact class code for a fraction `ρ` of group 0
/// and noise otherwise, so a shortcut exists for one group only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub samples: usize,
    pub num_classes: usize,
    pub signal_dims: usize,
    pub spurious_dims: usize,
    /// ρ: probability that a group-0 sample carries the class code.
    pub spurious_strength: f64,
    /// Noise standard deviation for groups 0 and 1.
    pub group_noise: [f64; 2],
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            samples: 4000,
            num_classes: 3,
            signal_dims: 4,
            spurious_dims: 4,
            spurious_strength: 0.8,
            group_noise: [0.6, 1.0],
            class_separation: 1.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn dim(&self) -> usize {
        self.signal_dims + self.spurious_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.signal_dims == 0 {
            return Err(Error::config("synthetic data needs at least one signal dimension"));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(Error::config(format!(
                "spurious_strength must lie in [0, 1], got {}",
                self.spurious_strength
            )));
        }
        if self.group_noise.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("group_noise entries must be non-negative"));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return Err(Error::config("class_separation must be non-negative"));
        }
        if self.samples < 2 * self.num_classes {
            return Err(Error::data(format!(
                "{} samples cannot represent {} classes (need at least {})",
                self.samples,
                self.num_classes,
                2 * self.num_classes
            )));
        }
        Ok(())
    }
}

/// `count` unit vectors in `dim` dimensions: the standard basis when it is
/// large enough, normalized Gaussian draws otherwise.
fn unit_directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if count <= dim {
        return (0..count)
            .map(|c| (0..dim).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect();
    }
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_classes;
    let signal_dirs = unit_directions(n, spec.signal_dims, &mut rng);
    let spurious_dirs = if spec.spurious_dims > 0 {
        unit_directions(n, spec.spurious_dims, &mut rng)
    } else {
        Vec::new()
    };

    let d = spec.dim();
    let mut values = Vec::with_capacity(spec.samples * d);
    let mut targets = Vec::with_capacity(spec.samples);
    let mut sensitive = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let a = u8::from(rng.random_bool(0.5));
        let y = rng.random_range(0..n);
        let sigma = spec.group_noise[a as usize];
        for &mu in &signal_dirs[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(spec.class_separation * mu + sigma * z);
        }
        if spec.spurious_dims > 0 {
            let coded = a == 0 && rng.random_bool(spec.spurious_strength);
            for &nu in &spurious_dirs[y] {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(if coded { spec.class_separation * nu } else { sigma * z });
            }
        }
        targets.push(y);
        sensitive.push(a);
    }
    let data = Dataset::new(Matrix::new(spec.samples, d, values)?, targets, sensitive, n)?;
    if data.group_counts().contains(&0) {
        return Err(Error::data(format!(
            "{} samples drew a single sensitive group; use more samples or another seed",
            spec.samples
        )));
    }
    Ok(data)
}

/// Index lists of a train/validation/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// `(target, sensitive)` cells too small to stratify; placed in train.
    pub small_cells: Vec<(usize, u8)>,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub small_cells: Vec<(usize, u8)>,
}

const MIN_STRATIFIED_CELL: usize = 3;

pub fn split_indices(data: &Dataset, fractions: [f64; 3], seed: u64, stratify: bool) -> Result<SplitIndices> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::config(format!("split fractions must be non-negative, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions sum to {total}, expected 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        small_cells: Vec::new(),
    };

    let cells: Vec<(Option<(usize, u8)>, Vec<usize>)> = if stratify {
        let mut cells = Vec::new();
        for y in 0..data.num_classes() {
            for a in 0..=1u8 {
                let idx: Vec<usize> = (0..data.len())
                    .filter(|&i| data.targets[i] == y && data.sensitive[i] == a)
                    .collect();
                if !idx.is_empty() {
                    cells.push((Some((y, a)), idx));
                }
            }
        }
        cells
    } else {
        vec![(None, (0..data.len()).collect())]
    };

    for (key, mut idx) in cells {
        idx.shuffle(&mut rng);
        let c = idx.len();
        if let Some(key) = key {
            if c < MIN_STRATIFIED_CELL {
                out.small_cells.push(key);
                out.train.extend(idx);
                continue;
            }
        }
        let n_train = ((fractions[0] * c as f64).round() as usize).min(c);
        let n_val = ((fractions[1] * c as f64).round() as usize).min(c - n_train);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Seeded train/validation/test split. In stratified mode every
/// `(target, sensitive)` cell is divided in the requested proportions.
pub fn split(data: &Dataset, fractions: [f64; 3], seed: u64, stratify: bool) -> Result<Splits> {
    let idx = split_indices(data, fractions, seed, stratify)?;
    Ok(Splits {
        train: data.subset(&idx.train),
        val: data.subset(&idx.val),
        test: data.subset(&idx.test),
        small_cells: idx.small_cells,
    })
}

/// Appends `copies` Gaussian-jittered replicas of every sample; labels are
/// preserved and the originals come first.
pub fn augment_jitter(data: &Dataset, sigma: f64, copies: usize, seed: u64) -> Result<Dataset> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::config(format!("jitter sigma must be non-negative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = data.features.clone();
    let mut targets = data.targets.clone();
    let mut sensitive = data.sensitive.clone();
    for _ in 0..copies {
        let mut noisy = data.features.clone();
        for v in noisy.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
        features = features.vstack(&noisy)?;
        targets.extend_from_slice(&data.targets);
        sensitive.extend_from_slice(&data.sensitive);
    }
    Dataset::new(features, targets, sensitive, data.num_classes)
}
