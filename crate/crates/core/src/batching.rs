//! Datasets, zero-shot class splits, class-balanced batch sampling and the
//! synthetic blob generator.
//!
//! # Feature file format
//!
//! Plain ASCII text. The first line is `N D`. It is followed by exactly `N`
//! lines, each an integer label and then `D` floats, separated by single
//! spaces and terminated by `\n`. The writer emits floats in scientific
//! notation with 17 significant digits, so a write/read cycle reproduces
//! every `f64` bit for bit. Embedding exports use the same format.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, ParseErrorKind, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    class_index: BTreeMap<usize, Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = features.as_matrix("dataset")?;
        if n != labels.len() {
            return Err(Error::Shape {
                op: "dataset labels",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            class_index.entry(l).or_default().push(i);
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_index,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sorted class ids.
    pub fn classes(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    pub fn rows_of(&self, class: usize) -> &[usize] {
        self.class_index.get(&class).map_or(&[], |v| v.as_slice())
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn subset(&self, classes: &[usize]) -> Result<LabeledDataset> {
        let keep: std::collections::BTreeSet<usize> = classes.iter().copied().collect();
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        LabeledDataset::new(
            self.features.select_rows(&rows),
            rows.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn side(&self, split: &SplitSpec, side: Side) -> Result<LabeledDataset> {
        self.subset(split.classes(side))
    }
}

pub fn read_dataset<R: Read>(r: R) -> Result<LabeledDataset> {
    let mut lines = BufReader::new(r).lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::parse(1, ParseErrorKind::EmptyFile, "no header line")),
    };
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    let (n, d) = match fields.as_slice() {
        [n, d] => match (n.parse::<usize>(), d.parse::<usize>()) {
            (Ok(n), Ok(d)) if d > 0 => (n, d),
            _ => {
                return Err(Error::parse(
                    1,
                    ParseErrorKind::MalformedHeader,
                    format!("expected `N D` with positive D, got `{header}`"),
                ))
            }
        },
        [] => return Err(Error::parse(1, ParseErrorKind::EmptyFile, "blank header")),
        _ => {
            return Err(Error::parse(
                1,
                ParseErrorKind::MalformedHeader,
                format!("expected `N D`, got `{header}`"),
            ))
        }
    };
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if labels.len() == n {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::parse(
                lineno,
                ParseErrorKind::RowCount,
                format!("header declares {n} rows but more follow"),
            ));
        }
        let mut fields = line.split_ascii_whitespace();
        let label = fields.next().ok_or_else(|| {
            Error::parse(
                lineno,
                ParseErrorKind::RowLength,
                format!("expected {} fields, got 0", d + 1),
            )
        })?;
        let label: usize = label.parse().map_err(|_| {
            Error::parse(
                lineno,
                ParseErrorKind::BadLabel,
                format!("`{label}` is not a non-negative integer"),
            )
        })?;
        let values: Vec<&str> = fields.collect();
        if values.len() != d {
            return Err(Error::parse(
                lineno,
                ParseErrorKind::RowLength,
                format!("expected {d} values after the label, got {}", values.len()),
            ));
        }
        for v in values {
            let x: f64 = v.parse().map_err(|_| {
                Error::parse(
                    lineno,
                    ParseErrorKind::BadFloat,
                    format!("`{v}` is not a float"),
                )
            })?;
            if !x.is_finite() {
                return Err(Error::parse(
                    lineno,
                    ParseErrorKind::BadFloat,
                    format!("`{v}` is not finite"),
                ));
            }
            data.push(x);
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(Error::parse(
            labels.len() + 2,
            ParseErrorKind::RowCount,
            format!("header declares {n} rows, found {}", labels.len()),
        ));
    }
    LabeledDataset::new(Tensor::new(vec![n, d], data)?, labels)
}

pub fn write_dataset<W: Write>(ds: &LabeledDataset, w: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "{} {}", ds.len(), ds.dim())?;
    for (i, label) in ds.labels.iter().enumerate() {
        write!(w, "{label}")?;
        for v in ds.features.row(i) {
            write!(w, " {v:.16e}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    read_dataset(std::fs::File::open(path)?)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_dataset(ds, std::fs::File::create(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Train,
    Test,
}

impl Side {
    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "train" => Some(Side::Train),
            "test" => Some(Side::Test),
            _ => None,
        }
    }
}

/// Class-disjoint train/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

impl SplitSpec {
    pub fn classes(&self, side: Side) -> &[usize] {
        match side {
            Side::Train => &self.train_classes,
            Side::Test => &self.test_classes,
        }
    }
}

/// The first `⌈fraction · #classes⌉` class ids (ascending) train, the rest
/// test. At least one class always ends up on each side.
pub fn zero_shot_split(ds: &LabeledDataset, fraction: f64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} not in (0, 1)")));
    }
    let classes = ds.classes();
    if classes.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 classes, dataset has {}",
            classes.len()
        )));
    }
    let cut = ((fraction * classes.len() as f64).ceil() as usize).clamp(1, classes.len() - 1);
    Ok(SplitSpec {
        train_classes: classes[..cut].to_vec(),
        test_classes: classes[cut..].to_vec(),
    })
}

/// `n` classes × `p` samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
}

/// Draws `n` distinct classes from `classes`, then `p` rows of each.
///
/// Rows are drawn without replacement, unless the class has fewer than `p`
/// rows, in which case they are drawn with replacement.
pub fn sample_batch(
    ds: &LabeledDataset,
    classes: &[usize],
    n: usize,
    p: usize,
    rng: &mut Rng,
) -> Result<BatchSpec> {
    if n == 0 || p == 0 {
        return Err(Error::Sampler("batch geometry must be positive".into()));
    }
    if classes.len() < n {
        return Err(Error::Sampler(format!(
            "asked for {n} classes per batch but only {} available",
            classes.len()
        )));
    }
    let mut rows = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n * p);
    for ci in rng.sample_distinct(classes.len(), n) {
        let class = classes[ci];
        let members = ds.rows_of(class);
        if members.is_empty() {
            return Err(Error::Sampler(format!("class {class} has no rows")));
        }
        if members.len() >= p {
            rows.extend(
                rng.sample_distinct(members.len(), p)
                    .into_iter()
                    .map(|j| members[j]),
            );
        } else {
            rows.extend((0..p).map(|_| members[rng.below(members.len())]));
        }
        labels.extend(std::iter::repeat_n(class, p));
    }
    Ok(BatchSpec {
        rows,
        labels,
        classes_per_batch: n,
        samples_per_class: p,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobParams {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Centers vary only in the first `informative` coordinates and are zero
    /// in the rest, which then carry nothing but noise.
    pub informative: usize,
    pub center_scale: f64,
    pub noise: f64,
}

impl BlobParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("blobs.classes", "must be positive"));
        }
        if self.per_class == 0 {
            return Err(Error::config("blobs.per_class", "must be positive"));
        }
        if self.dim == 0 {
            return Err(Error::config("blobs.dim", "must be positive"));
        }
        if self.informative == 0 || self.informative > self.dim {
            return Err(Error::config(
                "blobs.informative",
                "must be in [1, blobs.dim]",
            ));
        }
        if !(self.center_scale >= 0.0) || !self.center_scale.is_finite() {
            return Err(Error::config("blobs.center_scale", "must be non-negative"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("blobs.noise", "must be non-negative"));
        }
        Ok(())
    }
}

/// Isotropic Gaussian clusters around centers drawn uniformly from
/// `[-center_scale, center_scale]` in each informative coordinate. Rows are
/// grouped by class.
pub fn make_blobs(rng: &mut Rng, params: &BlobParams) -> Result<LabeledDataset> {
    params.validate()?;
    let BlobParams {
        classes,
        per_class,
        dim,
        informative,
        center_scale,
        noise,
    } = *params;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|j| {
                    if j < informative {
                        rng.uniform(-center_scale, center_scale)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                data.push(mu + noise * rng.normal());
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![classes * per_class, dim], data)?, labels)
}
