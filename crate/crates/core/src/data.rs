//! Sparse datasets: text loaders, normalization, and synthetic generators.
//!
//! Internally every dataset uses dense class ids `0..num_classes`. Loaders
//! that encounter arbitrary label values (LIBSVM integers, XMLC label lists)
//! compact the distinct labels that actually occur, in sorted order, and
//! keep the original values in `class_ids` so predictions can be reported in
//! the source vocabulary.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// One observation: sorted sparse features and a dense class id.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExample {
    /// Strictly increasing feature indices.
    pub indices: Vec<u32>,
    /// One value per index.
    pub values: Vec<f64>,
    pub label: u32,
}

/// A multiclass dataset with dense labels `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<SparseExample>,
    pub num_features: usize,
    pub num_classes: usize,
    /// Original label of each dense class, when labels were compacted.
    pub class_ids: Option<Vec<i64>>,
    /// Ground-truth class probabilities, for synthetic data.
    pub true_probs: Option<Vec<f64>>,
}

/// Feature scaling modes. Each divides values in place and reports the
/// divisors used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalize {
    /// One divisor: the largest absolute feature value in the dataset.
    GlobalMaxAbs,
    /// One divisor per feature column.
    PerFeatureMaxAbs,
    /// A fixed positive divisor (e.g. 255 for byte-valued pixels).
    Fixed(f64),
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Checks every structural invariant: labels and feature indices in
    /// range, indices strictly increasing, values finite, metadata lengths
    /// consistent.
    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::InvalidArgument("dataset has no examples".into()));
        }
        if let Some(ids) = &self.class_ids {
            if ids.len() != self.num_classes {
                return Err(Error::DimensionMismatch {
                    what: "class_ids",
                    expected: self.num_classes,
                    got: ids.len(),
                });
            }
        }
        if let Some(p) = &self.true_probs {
            if p.len() != self.num_classes {
                return Err(Error::DimensionMismatch {
                    what: "true_probs",
                    expected: self.num_classes,
                    got: p.len(),
                });
            }
        }
        for ex in &self.examples {
            if ex.label as usize >= self.num_classes {
                return Err(Error::ClassOutOfRange {
                    class: ex.label as usize,
                    num_classes: self.num_classes,
                });
            }
            if ex.indices.len() != ex.values.len() {
                return Err(Error::DimensionMismatch {
                    what: "example indices vs values",
                    expected: ex.indices.len(),
                    got: ex.values.len(),
                });
            }
            let mut prev: Option<u32> = None;
            for (&i, &v) in ex.indices.iter().zip(&ex.values) {
                if i as usize >= self.num_features {
                    return Err(Error::InvalidArgument(format!(
                        "feature index {i} out of range for {} features",
                        self.num_features
                    )));
                }
                if let Some(p) = prev {
                    if i <= p {
                        return Err(Error::InvalidArgument(format!(
                            "feature indices not strictly increasing at {i}"
                        )));
                    }
                }
                prev = Some(i);
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: "feature value",
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Largest absolute feature value in the dataset; 0 when there are no
    /// nonzero features.
    pub fn max_abs_value(&self) -> f64 {
        let mut m = 0.0f64;
        for ex in &self.examples {
            for &v in &ex.values {
                m = m.max(v.abs());
            }
        }
        m
    }

    /// Number of examples per class.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for ex in &self.examples {
            counts[ex.label as usize] += 1;
        }
        counts
    }

    /// Scales all feature values in place; returns the divisors applied
    /// (one entry for the global/fixed modes, one per feature otherwise).
    /// Columns that are entirely zero keep divisor 1.
    pub fn normalize(&mut self, mode: Normalize) -> Result<Vec<f64>> {
        match mode {
            Normalize::Fixed(d) => {
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::NonPositive {
                        what: "fixed divisor",
                        value: d,
                    });
                }
                for ex in &mut self.examples {
                    for v in &mut ex.values {
                        *v /= d;
                    }
                }
                Ok(vec![d])
            }
            Normalize::GlobalMaxAbs => {
                let mut m = 0.0f64;
                for ex in &self.examples {
                    for &v in &ex.values {
                        m = m.max(v.abs());
                    }
                }
                let d = if m > 0.0 { m } else { 1.0 };
                for ex in &mut self.examples {
                    for v in &mut ex.values {
                        *v /= d;
                    }
                }
                Ok(vec![d])
            }
            Normalize::PerFeatureMaxAbs => {
                let mut maxes = vec![0.0f64; self.num_features];
                for ex in &self.examples {
                    for (&i, &v) in ex.indices.iter().zip(&ex.values) {
                        let m = &mut maxes[i as usize];
                        *m = m.max(v.abs());
                    }
                }
                let divisors: Vec<f64> =
                    maxes.iter().map(|&m| if m > 0.0 { m } else { 1.0 }).collect();
                for ex in &mut self.examples {
                    for (&i, v) in ex.indices.iter().zip(&mut ex.values) {
                        *v /= divisors[i as usize];
                    }
                }
                Ok(divisors)
            }
        }
    }

    /// Re-expresses this dataset in another dataset's class vocabulary and
    /// feature dimension — used to align a test split with its training
    /// split. Fails if a label here does not occur in `class_ids`, or if a
    /// feature index exceeds `num_features`.
    pub fn align_to(&mut self, class_ids: &[i64], num_features: usize) -> Result<()> {
        let own_ids: Vec<i64> = match &self.class_ids {
            Some(ids) => ids.clone(),
            None => (0..self.num_classes as i64).collect(),
        };
        let mapped: Vec<u32> = own_ids
            .iter()
            .map(|id| {
                class_ids
                    .iter()
                    .position(|c| c == id)
                    .map(|p| p as u32)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "label {id} does not occur in the reference class set"
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        if self.num_features > num_features {
            return Err(Error::DimensionMismatch {
                what: "feature dimension",
                expected: num_features,
                got: self.num_features,
            });
        }
        for ex in &mut self.examples {
            ex.label = mapped[ex.label as usize];
        }
        self.num_classes = class_ids.len();
        self.num_features = num_features;
        self.class_ids = Some(class_ids.to_vec());
        self.true_probs = None;
        Ok(())
    }
}

fn parse_feature(
    tok: &str,
    path: &str,
    line_no: usize,
) -> Result<(u32, f64)> {
    let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
        path: path.into(),
        line: line_no,
        detail: format!("expected index:value, got {tok:?}"),
    })?;
    let i: u32 = idx.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line: line_no,
        detail: format!("bad feature index {idx:?}"),
    })?;
    let v: f64 = val.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line: line_no,
        detail: format!("bad feature value {val:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.into(),
            line: line_no,
            detail: format!("non-finite feature value {val:?}"),
        });
    }
    Ok((i, v))
}

fn sort_features(
    mut feats: Vec<(u32, f64)>,
    path: &str,
    line_no: usize,
) -> Result<(Vec<u32>, Vec<f64>)> {
    feats.sort_by_key(|&(i, _)| i);
    for w in feats.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Parse {
                path: path.into(),
                line: line_no,
                detail: format!("duplicate feature index {}", w[0].0),
            });
        }
    }
    Ok(feats.into_iter().unzip())
}

/// Loads LIBSVM-format text: one `label idx:val idx:val ...` line per
/// example. Labels may be arbitrary integers; they are compacted in sorted
/// order (see [`Dataset::class_ids`]). Feature indexing is auto-detected: if
/// index 0 never occurs the file is treated as 1-based.
pub fn load_libsvm(path: &Path) -> Result<Dataset> {
    let path_str = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut raw: Vec<(i64, Vec<(u32, f64)>)> = Vec::new();
    let mut min_index = u32::MAX;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let label_tok = toks.next().unwrap();
        let label: i64 = label_tok.parse().map_err(|_| Error::Parse {
            path: path_str.clone(),
            line: line_no,
            detail: format!("bad label {label_tok:?}"),
        })?;
        let mut feats = Vec::new();
        for tok in toks {
            let (idx, val) = parse_feature(tok, &path_str, line_no)?;
            min_index = min_index.min(idx);
            feats.push((idx, val));
        }
        raw.push((label, feats));
    }
    if raw.is_empty() {
        return Err(Error::Parse {
            path: path_str,
            line: 0,
            detail: "no examples".into(),
        });
    }

    let offset = if min_index == u32::MAX || min_index == 0 {
        0
    } else {
        1
    };
    let mut labels: Vec<i64> = raw.iter().map(|(l, _)| *l).collect();
    labels.sort_unstable();
    labels.dedup();

    let mut num_features = 0usize;
    let mut examples = Vec::with_capacity(raw.len());
    for (line_idx, (label, feats)) in raw.into_iter().enumerate() {
        let dense = labels.binary_search(&label).unwrap() as u32;
        let shifted: Vec<(u32, f64)> =
            feats.into_iter().map(|(i, v)| (i - offset, v)).collect();
        let (indices, values) = sort_features(shifted, &path_str, line_idx + 1)?;
        if let Some(&max) = indices.last() {
            num_features = num_features.max(max as usize + 1);
        }
        examples.push(SparseExample {
            indices,
            values,
            label: dense,
        });
    }

    let ds = Dataset {
        examples,
        num_features,
        num_classes: labels.len(),
        class_ids: Some(labels),
        true_probs: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes LIBSVM-format text with 1-based feature indices and original
/// labels where known. Loading the result reproduces the dataset exactly,
/// provided every class occurs in some example (the format cannot express
/// empty classes or trailing all-zero feature columns).
pub fn save_libsvm(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in &data.examples {
        let label = match &data.class_ids {
            Some(ids) => ids[ex.label as usize],
            None => ex.label as i64,
        };
        write!(w, "{label}")?;
        for (&i, &v) in ex.indices.iter().zip(&ex.values) {
            write!(w, " {}:{}", i + 1, v)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of an extreme-multilabel dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelRow {
    pub labels: Vec<u32>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

/// An XMLC-format dataset: explicit dimensions plus multilabel rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelData {
    pub num_features: usize,
    pub num_classes: usize,
    pub rows: Vec<MultiLabelRow>,
}

/// Loads XMLC-format text: a `N D K` header line, then one
/// `l1,l2,... idx:val ...` line per example (0-based labels and feature
/// indices). A row may have no labels, in which case the line starts with a
/// space before its features.
pub fn load_xmlc(path: &Path) -> Result<MultiLabelData> {
    let path_str = path.display().to_string();
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            path: path_str.clone(),
            line: 1,
            detail: format!("bad header {:?}, expected \"N D K\"", header.trim()),
        })?;
    if dims.len() != 3 {
        return Err(Error::Parse {
            path: path_str,
            line: 1,
            detail: format!("bad header {:?}, expected \"N D K\"", header.trim()),
        });
    }
    let (n, d, k) = (dims[0], dims[1], dims[2]);

    let mut rows = Vec::with_capacity(n);
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 2;
        let line = line?;
        let trimmed = line.trim_end();
        if trimmed.trim().is_empty() && rows.len() >= n {
            continue;
        }
        let (label_part, feat_part) = match trimmed.split_once(' ') {
            Some((l, f)) => (l, f),
            None => (trimmed, ""),
        };
        let mut labels = Vec::new();
        if !label_part.is_empty() {
            for tok in label_part.split(',') {
                let l: u32 = tok.parse().map_err(|_| Error::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    detail: format!("bad label {tok:?}"),
                })?;
                if l as usize >= k {
                    return Err(Error::Parse {
                        path: path_str.clone(),
                        line: line_no,
                        detail: format!("label {l} out of range for {k} classes"),
                    });
                }
                labels.push(l);
            }
        }
        let mut feats = Vec::new();
        for tok in feat_part.split_whitespace() {
            let (idx, val) = parse_feature(tok, &path_str, line_no)?;
            if idx as usize >= d {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    detail: format!("feature index {idx} out of range for {d} features"),
                });
            }
            feats.push((idx, val));
        }
        let (indices, values) = sort_features(feats, &path_str, line_no)?;
        rows.push(MultiLabelRow {
            labels,
            indices,
            values,
        });
    }
    if rows.len() != n {
        return Err(Error::Parse {
            path: path_str,
            line: rows.len() + 1,
            detail: format!("header promised {n} rows, found {}", rows.len()),
        });
    }
    Ok(MultiLabelData {
        num_features: d,
        num_classes: k,
        rows,
    })
}

/// Writes XMLC-format text; inverse of [`load_xmlc`].
pub fn save_xmlc(path: &Path, data: &MultiLabelData) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "{} {} {}",
        data.rows.len(),
        data.num_features,
        data.num_classes
    )?;
    for row in &data.rows {
        let labels: Vec<String> = row.labels.iter().map(|l| l.to_string()).collect();
        write!(w, "{}", labels.join(","))?;
        for (&i, &v) in row.indices.iter().zip(&row.values) {
            write!(w, " {i}:{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Projects a multilabel dataset to multiclass by keeping each row's first
/// label (in file order). Classes are compacted to those that occur, with
/// the original XMLC label ids kept in `class_ids`. Rows without any label
/// are an error that names them.
pub fn first_label_projection(data: &MultiLabelData) -> Result<Dataset> {
    let unlabeled: Vec<usize> = data
        .rows
        .iter()
        .enumerate()
        .filter(|(_, row)| row.labels.is_empty())
        .map(|(i, _)| i)
        .collect();
    if !unlabeled.is_empty() {
        let shown: Vec<String> = unlabeled.iter().take(10).map(|i| i.to_string()).collect();
        let suffix = if unlabeled.len() > 10 { ", ..." } else { "" };
        return Err(Error::InvalidArgument(format!(
            "{} rows have no label (rows {}{})",
            unlabeled.len(),
            shown.join(", "),
            suffix
        )));
    }
    let kept: Vec<(&MultiLabelRow, u32)> = data
        .rows
        .iter()
        .map(|row| (row, row.labels[0]))
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "no rows with labels to project".into(),
        ));
    }
    let mut occurring: Vec<u32> = kept.iter().map(|&(_, l)| l).collect();
    occurring.sort_unstable();
    occurring.dedup();
    let examples = kept
        .into_iter()
        .map(|(row, l)| SparseExample {
            indices: row.indices.clone(),
            values: row.values.clone(),
            label: occurring.binary_search(&l).unwrap() as u32,
        })
        .collect();
    let ds = Dataset {
        examples,
        num_features: data.num_features,
        num_classes: occurring.len(),
        class_ids: Some(occurring.iter().map(|&l| l as i64).collect()),
        true_probs: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Projects a multilabel dataset to multiclass against a fixed class-id
/// list (the one a model was trained with): each row keeps its first label,
/// remapped to that label's position in `class_ids`. Rows without a label,
/// or whose first label is missing from the list, are an error that names
/// them, since silently dropping rows would skew every evaluation metric.
pub fn projection_onto_classes(data: &MultiLabelData, class_ids: &[i64]) -> Result<Dataset> {
    if class_ids.is_empty() {
        return Err(Error::InvalidArgument("empty class-id list".into()));
    }
    let mut position: HashMap<i64, u32> = HashMap::with_capacity(class_ids.len());
    for (i, &id) in class_ids.iter().enumerate() {
        if position.insert(id, i as u32).is_some() {
            return Err(Error::InvalidArgument(format!(
                "class id {id} appears twice in the class-id list"
            )));
        }
    }
    let mut bad: Vec<usize> = Vec::new();
    let mut examples = Vec::with_capacity(data.rows.len());
    for (i, row) in data.rows.iter().enumerate() {
        let label = row
            .labels
            .first()
            .and_then(|&l| position.get(&(l as i64)).copied());
        match label {
            Some(label) => examples.push(SparseExample {
                indices: row.indices.clone(),
                values: row.values.clone(),
                label,
            }),
            None => bad.push(i),
        }
    }
    if !bad.is_empty() {
        let shown: Vec<String> = bad.iter().take(10).map(|i| i.to_string()).collect();
        let suffix = if bad.len() > 10 { ", ..." } else { "" };
        return Err(Error::InvalidArgument(format!(
            "{} rows are unlabeled or labeled outside the class-id list (rows {}{})",
            bad.len(),
            shown.join(", "),
            suffix
        )));
    }
    let ds = Dataset {
        examples,
        num_features: data.num_features,
        num_classes: class_ids.len(),
        class_ids: Some(class_ids.to_vec()),
        true_probs: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Synthetic categorical data with no covariates: class weights are squared
/// uniforms, so a handful of classes dominate and many are never drawn. The
/// returned dataset's classes are the ones that actually occur; `true_probs`
/// holds their generating probabilities renormalized over that support, and
/// `class_ids` the original raw class indices.
pub fn synth_categorical(raw_classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    if raw_classes < 2 || n == 0 {
        return Err(Error::InvalidArgument(
            "synthetic data needs at least two classes and one example".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(raw_classes);
    for _ in 0..raw_classes {
        let u: f64 = rng.random();
        weights.push(u * u);
    }
    let mut cdf = Vec::with_capacity(raw_classes);
    let mut total = 0.0;
    for &w in &weights {
        total += w;
        cdf.push(total);
    }

    let mut raw_labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let idx = cdf.partition_point(|&c| c <= u).min(raw_classes - 1);
        raw_labels.push(idx);
    }

    let mut occurring = raw_labels.clone();
    occurring.sort_unstable();
    occurring.dedup();
    let support_mass: f64 = occurring.iter().map(|&k| weights[k]).sum();
    let true_probs: Vec<f64> = occurring.iter().map(|&k| weights[k] / support_mass).collect();

    let examples = raw_labels
        .into_iter()
        .map(|raw| SparseExample {
            indices: Vec::new(),
            values: Vec::new(),
            label: occurring.binary_search(&raw).unwrap() as u32,
        })
        .collect();
    let ds = Dataset {
        examples,
        num_features: 0,
        num_classes: occurring.len(),
        class_ids: Some(occurring.iter().map(|&k| k as i64).collect()),
        true_probs: Some(true_probs),
    };
    ds.validate()?;
    Ok(ds)
}

/// Synthetic Gaussian-blob classification data: one standard-normal center
/// per class, balanced labels assigned round-robin, isotropic noise around
/// the center. Dense features.
pub fn synth_blobs(
    num_classes: usize,
    n: usize,
    num_features: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || n == 0 || num_features == 0 {
        return Err(Error::InvalidArgument(
            "blob data needs at least one class, one example, and one feature".into(),
        ));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::NonPositive {
            what: "noise",
            value: noise,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![0.0f64; num_classes * num_features];
    for c in &mut centers {
        *c = StandardNormal.sample(&mut rng);
    }
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % num_classes) as u32;
        let center = &centers[label as usize * num_features..][..num_features];
        let values: Vec<f64> = center
            .iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                c + noise * z
            })
            .collect();
        examples.push(SparseExample {
            indices: (0..num_features as u32).collect(),
            values,
            label,
        });
    }
    let ds = Dataset {
        examples,
        num_features,
        num_classes,
        class_ids: None,
        true_probs: None,
    };
    ds.validate()?;
    Ok(ds)
}
