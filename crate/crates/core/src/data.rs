//! Dataset ingestion and preprocessing.

use std::io::{BufRead, Read, Write};

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Features, LabeledExample};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("idx: {0}")]
    Idx(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("dataset is empty")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub examples: Vec<LabeledExample<T>>,
    /// Feature dimension `p`.
    pub features: usize,
    /// Class count `K` (2 for binary tasks).
    pub classes: usize,
    pub repr: Representation,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.classes == 2
    }

    fn with_examples(&self, examples: Vec<LabeledExample<T>>) -> Self {
        Self {
            name: self.name.clone(),
            examples,
            features: self.features,
            classes: self.classes,
            repr: self.repr,
        }
    }

    /// Converts the scalar type of every feature value.
    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            examples: self
                .examples
                .iter()
                .map(|e| LabeledExample {
                    features: e.features.cast(),
                    label: e.label,
                    true_label: e.true_label,
                })
                .collect(),
            features: self.features,
            classes: self.classes,
            repr: self.repr,
        }
    }

    /// Keeps only the first `n` examples.
    pub fn truncate(mut self, n: usize) -> Self {
        self.examples.truncate(n);
        self
    }

    /// Concatenates two datasets with matching shapes.
    pub fn concat(mut self, other: Dataset<T>) -> Result<Self, DataError> {
        if other.features != self.features || other.classes != self.classes {
            return Err(DataError::Unsupported("cannot concatenate datasets of different shapes".into()));
        }
        self.examples.extend(other.examples);
        Ok(self)
    }
}

fn binary_or_class(raw: f64, line: usize) -> Result<usize, DataError> {
    if raw == -1.0 || raw == 0.0 {
        Ok(0)
    } else if raw == 1.0 {
        Ok(1)
    } else if raw.fract() == 0.0 && raw > 1.0 && raw < 1e9 {
        Ok(raw as usize)
    } else {
        Err(parse_err(line, format!("unsupported label {raw}")))
    }
}

/// Parses LIBSVM text (`label idx:val ...`, 1-based indices). Labels −1/0 map to
/// 0 and +1 to 1; other non-negative integers are kept as class indices.
pub fn parse_libsvm<T: Real, R: BufRead>(
    reader: R,
    name: &str,
    features: Option<usize>,
) -> Result<Dataset<T>, DataError> {
    let mut examples = Vec::new();
    let mut max_index = 0usize;
    let mut max_label = 0usize;
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let label_tok = parts.next().ok_or_else(|| parse_err(lineno, "missing label"))?;
        let raw: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, format!("non-numeric label {label_tok:?}")))?;
        let label = binary_or_class(raw, lineno)?;
        max_label = max_label.max(label);
        let mut entries: Vec<(u32, T)> = Vec::new();
        let mut last: Option<u32> = None;
        for tok in parts {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, format!("malformed feature {tok:?}")))?;
            let i: u32 = i
                .parse()
                .map_err(|_| parse_err(lineno, format!("non-numeric index in {tok:?}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| parse_err(lineno, format!("non-numeric value in {tok:?}")))?;
            if i == 0 {
                return Err(parse_err(lineno, "feature indices are 1-based"));
            }
            if last.is_some_and(|l| i <= l) {
                return Err(parse_err(lineno, "feature indices must be strictly increasing"));
            }
            last = Some(i);
            max_index = max_index.max(i as usize);
            entries.push((i - 1, T::lit(v)));
        }
        examples.push(LabeledExample::new(Features::sparse(entries), label));
    }
    if examples.is_empty() {
        return Err(DataError::Empty);
    }
    let p = match features {
        Some(p) if p < max_index => {
            return Err(DataError::Unsupported(format!(
                "feature index {max_index} exceeds declared dimension {p}"
            )))
        }
        Some(p) => p,
        None => max_index,
    };
    Ok(Dataset {
        name: name.to_string(),
        examples,
        features: p.max(1),
        classes: (max_label + 1).max(2),
        repr: Representation::Sparse,
    })
}

/// Writes LIBSVM text; binary labels are written as `+1`/`-1`.
pub fn serialize_libsvm<T: Real, W: Write>(data: &Dataset<T>, mut out: W) -> Result<(), DataError> {
    for ex in &data.examples {
        let label = match (data.is_binary(), ex.label) {
            (true, 1) => "+1".to_string(),
            (true, _) => "-1".to_string(),
            (false, l) => l.to_string(),
        };
        write!(out, "{label}")?;
        let mut err = None;
        ex.features.for_each_nonzero(|j, v| {
            if err.is_none() {
                if let Err(e) = write!(out, " {}:{}", j + 1, v.as_f64()) {
                    err = Some(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelColumn {
    First,
    #[default]
    Last,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CsvOptions {
    #[serde(default)]
    pub label_column: LabelColumn,
    #[serde(default)]
    pub has_header: bool,
    /// Rescale each feature column to `[0, 1]`.
    #[serde(default)]
    pub min_max: bool,
}

/// Parses a rectangular numeric table; feature columns keep file order.
pub fn parse_csv<T: Real, R: Read>(reader: R, name: &str, opts: &CsvOptions) -> Result<Dataset<T>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut width = None;
    let mut max_label = 0;
    for (k, rec) in rdr.records().enumerate() {
        let lineno = k + 1 + usize::from(opts.has_header);
        let rec = rec.map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(parse_err(lineno, format!("expected {w} columns, found {}", rec.len())));
        }
        if w < 2 {
            return Err(parse_err(lineno, "need a label column and at least one feature"));
        }
        let label_at = match opts.label_column {
            LabelColumn::First => 0,
            LabelColumn::Last => w - 1,
            LabelColumn::Index(i) if i < w => i,
            LabelColumn::Index(i) => return Err(parse_err(lineno, format!("label column {i} out of range"))),
        };
        let mut feats = Vec::with_capacity(w - 1);
        let mut label = 0;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(lineno, format!("non-numeric field {field:?} in column {}", c + 1)))?;
            if c == label_at {
                label = binary_or_class(v, lineno)?;
            } else {
                feats.push(v);
            }
        }
        max_label = max_label.max(label);
        rows.push((feats, label));
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let p = rows[0].0.len();
    if opts.min_max {
        for j in 0..p {
            let (lo, hi) = rows
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.0[j]), hi.max(r.0[j])));
            let span = hi - lo;
            for r in rows.iter_mut() {
                r.0[j] = if span > 0.0 { (r.0[j] - lo) / span } else { 0.0 };
            }
        }
    }
    let examples = rows
        .into_iter()
        .map(|(f, l)| LabeledExample::new(Features::Dense(f.into_iter().map(T::lit).collect()), l))
        .collect();
    Ok(Dataset {
        name: name.to_string(),
        examples,
        features: p,
        classes: (max_label + 1).max(2),
        repr: Representation::Dense,
    })
}

/// Writes a headerless table with the label in the last column.
pub fn serialize_csv<T: Real, W: Write>(data: &Dataset<T>, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    for ex in &data.examples {
        let mut row: Vec<String> = ex
            .features
            .to_dense(data.features)
            .iter()
            .map(|v| format!("{}", v.as_f64()))
            .collect();
        row.push(ex.label.to_string());
        w.write_record(&row).map_err(|e| DataError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Reads an IDX image/label pair. Pixels are scaled by 1/255; zero pixels are
/// not stored.
pub fn parse_idx<T: Real, R1: Read, R2: Read>(
    mut images: R1,
    mut labels: R2,
    name: &str,
) -> Result<Dataset<T>, DataError> {
    let magic = images.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGES {
        return Err(DataError::Idx(format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = images.read_u32::<BigEndian>()? as usize;
    let rows = images.read_u32::<BigEndian>()? as usize;
    let cols = images.read_u32::<BigEndian>()? as usize;
    let magic = labels.read_u32::<BigEndian>()?;
    if magic != IDX_LABELS {
        return Err(DataError::Idx(format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n_labels = labels.read_u32::<BigEndian>()? as usize;
    if n_labels != n {
        return Err(DataError::Idx(format!("{n} images but {n_labels} labels")));
    }
    let p = rows * cols;
    let mut pixels = vec![0u8; p];
    let mut label_bytes = vec![0u8; n];
    labels.read_exact(&mut label_bytes)?;
    let scale = T::lit(1.0 / 255.0);
    let mut examples = Vec::with_capacity(n);
    for &label in &label_bytes {
        images.read_exact(&mut pixels)?;
        if label > 9 {
            return Err(DataError::Idx(format!("label {label} out of range")));
        }
        let entries = pixels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(j, &v)| (j as u32, T::from_u8(v).unwrap() * scale))
            .collect();
        examples.push(LabeledExample::new(Features::sparse(entries), label as usize));
    }
    if examples.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(Dataset {
        name: name.to_string(),
        examples,
        features: p,
        classes: 10,
        repr: Representation::Sparse,
    })
}

/// Flips each training label with probability `fraction`, keeping the clean label.
pub fn flip_labels<T: Real>(data: &Dataset<T>, fraction: f64, seed: u64) -> Result<Dataset<T>, DataError> {
    if !data.is_binary() {
        return Err(DataError::Unsupported("label flipping needs a binary dataset".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DataError::Unsupported(format!("flip fraction {fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = data
        .examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            let truth = e.truth();
            e.true_label = Some(truth);
            if rng.random::<f64>() < fraction {
                e.label = 1 - e.label;
            }
            e
        })
        .collect();
    Ok(data.with_examples(examples))
}

/// Optional seeded shuffle, then a prefix/suffix split with `round(fraction · n)` training examples.
pub fn split_shuffle<T: Real>(
    data: &Dataset<T>,
    train_fraction: f64,
    seed: u64,
    shuffle: bool,
) -> Result<(Dataset<T>, Dataset<T>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Unsupported(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut examples = data.examples.clone();
    if shuffle {
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let cut = (train_fraction * examples.len() as f64).round() as usize;
    let test = examples.split_off(cut);
    Ok((data.with_examples(examples), data.with_examples(test)))
}

/// Seeded downsampling of every class to the size of the smallest; original order is kept.
pub fn balance_classes<T: Real>(data: &Dataset<T>, seed: u64) -> Dataset<T> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
    for (i, e) in data.examples.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let target = by_class.iter().filter(|c| !c.is_empty()).map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; data.len()];
    for class in by_class.iter_mut() {
        class.shuffle(&mut rng);
        for &i in class.iter().take(target) {
            keep[i] = true;
        }
    }
    let examples = data
        .examples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k).map(|(e, _)| e.clone())
        .collect();
    data.with_examples(examples)
}
