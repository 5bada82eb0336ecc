//! Synthetic Gaussian-mixture datasets and the CSV files that hold datasets
//! and cached teacher logits.
//!
//! Dataset files have a header `x0,...,x{D-1},label` and one sample per row.
//! Logit caches have a header `index,z0,...,z{C-1}` and one row per training
//! sample, holding raw (un-tempered) logits.

use std::io::Write;
use std::path::Path;

use deepkd_core::numkit::{Mat64, Rng};
use deepkd_core::{Error, Result};

use crate::config::validation;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Mat64,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Mat64, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() || features.rows() != labels.len() {
            return Err(validation(format!(
                "dataset needs matching nonzero row counts, got {} features and {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(validation("dataset contains non-finite features"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
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

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenParams {
    pub seed: u64,
    pub n_per_class: usize,
    pub classes: usize,
    /// Gaussian components per class.
    pub components: usize,
    pub dim: usize,
    pub difficulty: f64,
}

/// Mean of component `j` of class `c`.
///
/// All `classes * components` means sit on a ring in the first two coordinates
/// (on a line when `dim == 1`), classes interleaved, with the radius chosen so
/// that neighboring means are `6 sin(pi / classes)` apart, the spacing of the
/// single-component layout on a circle of radius 3.
pub fn component_mean(
    c: usize,
    j: usize,
    classes: usize,
    components: usize,
    dim: usize,
) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    let slot = j * classes + c;
    if dim == 1 {
        m[0] = 3.0 * slot as f64;
        return m;
    }
    let slots = (classes * components) as f64;
    let pi = std::f64::consts::PI;
    let radius = 3.0 * (pi / classes as f64).sin() / (pi / slots).sin();
    let angle = 2.0 * pi * slot as f64 / slots;
    m[0] = radius * angle.cos();
    m[1] = radius * angle.sin();
    m
}

/// Stratified 80/20 train/test split of a Gaussian mixture with isotropic
/// noise of std `0.5 + difficulty`. Samples cycle through their class's
/// components.
pub fn gen_data(p: GenParams) -> Result<(Dataset, Dataset)> {
    if p.classes < 2
        || p.components == 0
        || p.dim == 0
        || p.n_per_class < 5
        || !(p.difficulty >= 0.0 && p.difficulty.is_finite())
    {
        return Err(validation(format!(
            "invalid generator settings: classes {}, components {}, dim {}, n_per_class {}, difficulty {}",
            p.classes, p.components, p.dim, p.n_per_class, p.difficulty
        )));
    }
    let mut rng = Rng::new(p.seed);
    let std = 0.5 + p.difficulty;
    let n_train = p.n_per_class * 4 / 5;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..p.classes {
        let means: Vec<Vec<f64>> = (0..p.components)
            .map(|j| component_mean(c, j, p.classes, p.components, p.dim))
            .collect();
        for i in 0..p.n_per_class {
            let mean = &means[i % p.components];
            let x: Vec<f64> = mean.iter().map(|m| m + std * rng.normal()).collect();
            if i < n_train {
                train.push((x, c));
            } else {
                test.push((x, c));
            }
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    let pack = |rows: Vec<(Vec<f64>, usize)>| -> Result<Dataset> {
        let labels = rows.iter().map(|r| r.1).collect();
        let feats: Vec<Vec<f64>> = rows.into_iter().map(|r| r.0).collect();
        Dataset::new(Mat64::from_rows(&feats)?, labels, p.classes)
    };
    Ok((pack(train)?, pack(test)?))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(io_err(path))?,
    ))
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let write = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        let header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for (row, y) in ds.features.iter_rows().zip(&ds.labels) {
            for v in row {
                write!(w, "{v:.16e},")?;
            }
            writeln!(w, "{y}")?;
        }
        w.flush()
    };
    write(&mut w).map_err(io_err(path))
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        column: 0,
        msg: msg.into(),
    }
}

fn record_line(r: &csv::StringRecord) -> u64 {
    r.position().map_or(0, |p| p.line())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

/// Reads a dataset file; the class count is `max(label) + 1` unless given.
pub fn read_dataset(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = open_csv(path)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = record_line(&rec);
        let n = rec.len();
        if n < 2 {
            return Err(parse_err(
                path,
                line,
                "expected at least one feature and a label",
            ));
        }
        let x = rec
            .iter()
            .take(n - 1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(path, line, format!("bad feature: {e}")))?;
        let y: usize = rec[n - 1]
            .trim()
            .parse()
            .map_err(|e| parse_err(path, line, format!("bad label: {e}")))?;
        rows.push(x);
        labels.push(y);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "dataset has no rows"));
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Mat64::from_rows(&rows).map_err(|e| parse_err(path, 0, e.to_string()))?;
    Dataset::new(features, labels, c).map_err(|e| validation(format!("{}: {e}", path.display())))
}

/// Reads `train.csv` and `test.csv` with a shared class count.
pub fn read_split(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = read_dataset(&dir.join("train.csv"), None)?;
    let mut test = read_dataset(&dir.join("test.csv"), None)?;
    let c = train.num_classes.max(test.num_classes).max(2);
    train.num_classes = c;
    test.num_classes = c;
    if train.dim() != test.dim() {
        return Err(validation(format!(
            "train has {} features but test has {}",
            train.dim(),
            test.dim()
        )));
    }
    Ok((train, test))
}

pub fn write_logits(logits: &Mat64, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let write = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        let header: Vec<String> = (0..logits.cols()).map(|j| format!("z{j}")).collect();
        writeln!(w, "index,{}", header.join(","))?;
        for (i, row) in logits.iter_rows().enumerate() {
            write!(w, "{i}")?;
            for v in row {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write(&mut w).map_err(io_err(path))
}

pub fn read_logits(path: &Path) -> Result<Mat64> {
    let mut rdr = open_csv(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = record_line(&rec);
        let idx: usize = rec
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| parse_err(path, line, format!("bad index: {e}")))?;
        if idx != rows.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected index {}, got {idx}", rows.len()),
            ));
        }
        let z = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(path, line, format!("bad logit: {e}")))?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(validation(format!(
                "{}: line {line}: non-finite logit",
                path.display()
            )));
        }
        rows.push(z);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "logit cache has no rows"));
    }
    Mat64::from_rows(&rows).map_err(|e| parse_err(path, 0, e.to_string()))
}
