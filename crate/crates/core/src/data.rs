//! Labeled datasets: synthetic Gaussian blobs and CSV interchange.
//!
//! CSV rows are `label,x_1,...,x_d` with no header. Values are written in
//! Rust's shortest round-trip form, so save/load is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{l2_norm, squared_distance, Matrix, RngSeed, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::dims(features.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// Class count inferred as `max label + 1`.
    pub fn from_labels(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        let t = labels.iter().max().map_or(0, |&m| m + 1);
        Self::new(features, labels, t)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Row subset in the given order; the class count is kept.
    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Parameters of [`gen_blobs`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub noise_std: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 200,
            input_dim: 64,
            separation: 5.0,
            noise_std: 0.5,
        }
    }
}

/// Splits each class into its first members (train) and its last
/// `test_per_class` members (test). Classes with fewer rows give all of
/// them to the test side.
pub fn split_per_class(dataset: &LabeledDataset, test_per_class: usize) -> (LabeledDataset, LabeledDataset) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in by_class {
        let cut = members.len().saturating_sub(test_per_class);
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (dataset.select(&train), dataset.select(&test))
}

pub const MAX_REJECTION_ROUNDS: usize = 1000;

/// Places `classes` centers at radius `separation` along random directions,
/// redrawing any candidate closer than `separation` to an accepted center.
pub fn blob_centers(spec: &BlobSpec, rng: &mut SeededRng) -> Result<Matrix> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let mut rounds = 0;
    let min_sq = spec.separation * spec.separation;
    while centers.len() < spec.classes {
        let mut dir = rng.gaussians(spec.input_dim);
        let norm = l2_norm(&dir);
        if norm == 0.0 {
            continue;
        }
        for v in &mut dir {
            *v *= spec.separation / norm;
        }
        if centers.iter().all(|c| squared_distance(c, &dir) >= min_sq) {
            centers.push(dir);
        } else {
            rounds += 1;
            if rounds >= MAX_REJECTION_ROUNDS {
                return Err(Error::InfeasibleSeparation {
                    separation: spec.separation,
                    rounds,
                });
            }
        }
    }
    Matrix::from_rows(&centers)
}

/// `classes x per_class` isotropic Gaussian samples around well-separated centers.
/// Rows are grouped by class.
pub fn gen_blobs(spec: &BlobSpec, seed: RngSeed) -> Result<LabeledDataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.input_dim == 0 {
        return Err(Error::invalid("blob counts must be >= 1"));
    }
    if !(spec.separation > 0.0) || !(spec.noise_std >= 0.0) {
        return Err(Error::invalid("blob separation must be > 0 and noise_std >= 0"));
    }
    let mut rng = SeededRng::new(seed);
    let centers = blob_centers(spec, &mut rng)?;
    let n = spec.classes * spec.per_class;
    let mut features = Matrix::zeros(n, spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for i in 0..spec.per_class {
            let row = features.row_mut(class * spec.per_class + i);
            for (x, c) in row.iter_mut().zip(centers.row(class)) {
                *x = c + spec.noise_std * rng.gaussian();
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, spec.classes)
}

fn csv_writer(path: impl AsRef<Path>) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_error)
}

fn write_row(out: &mut csv::Writer<fs::File>, label: impl ToString, values: &[f64]) -> Result<()> {
    let mut record = Vec::with_capacity(values.len() + 1);
    record.push(label.to_string());
    record.extend(values.iter().map(f64::to_string));
    out.write_record(&record).map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match (line, e.into_kind()) {
        (_, csv::ErrorKind::Io(io)) => Error::Io(io),
        (Some(line), kind) => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
        (None, kind) => Error::invalid(format!("csv: {kind:?}")),
    }
}

pub fn save_csv(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = csv_writer(path)?;
    for (row, label) in dataset.features.iter_rows().zip(&dataset.labels) {
        write_row(&mut out, label, row)?;
    }
    out.flush()?;
    Ok(())
}

/// Label used for anchor rows in a 2D export.
pub const ANCHOR_SENTINEL: i64 = -1;

/// Writes `label,e_1,e_2` for every embedding, then one `-1,c_1,c_2` row per
/// anchor. Returns the number of rows written.
pub fn save_2d_export(embeddings: &Matrix, labels: &[usize], anchors: &Matrix, path: impl AsRef<Path>) -> Result<usize> {
    if embeddings.rows() > 0 && embeddings.cols() != 2 {
        return Err(Error::invalid(format!("2D export needs embedding dimension 2, got {}", embeddings.cols())));
    }
    if anchors.cols() != 2 {
        return Err(Error::invalid(format!("2D export needs anchor dimension 2, got {}", anchors.cols())));
    }
    if embeddings.rows() != labels.len() {
        return Err(Error::dims(embeddings.rows(), labels.len()));
    }
    let mut out = csv_writer(path)?;
    for (row, label) in embeddings.iter_rows().zip(labels) {
        write_row(&mut out, label, row)?;
    }
    for c in anchors.iter_rows() {
        write_row(&mut out, ANCHOR_SENTINEL, c)?;
    }
    out.flush()?;
    Ok(embeddings.rows() + anchors.rows())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    parse_csv(&fs::read_to_string(path)?)
}

pub fn parse_csv(text: &str) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    // The reader's positions include skipped blank lines, so count newlines up
    // to the first byte of the record itself.
    let bytes = text.as_bytes();
    let line_at = |pos: Option<&csv::Position>| {
        pos.map_or(0, |p| {
            let mut at = p.byte() as usize;
            while at < bytes.len() && matches!(bytes[at], b'\n' | b'\r') {
                at += 1;
            }
            1 + bytes[..at].iter().filter(|&&b| b == b'\n').count()
        })
    };
    for record in reader.records() {
        let record = record.map_err(|e| match e.position() {
            Some(pos) => Error::Parse {
                line: line_at(Some(pos)),
                message: format!("{:?}", e.kind()),
            },
            None => csv_error(e),
        })?;
        let lineno = line_at(record.position());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: lineno, message };
        let label_cell = record.get(0).unwrap_or_default();
        let label: i64 = label_cell
            .parse()
            .map_err(|_| parse_err(format!("label '{label_cell}' is not an integer")))?;
        if label < 0 {
            return Err(parse_err(format!("negative label {label}")));
        }
        let start = data.len();
        for cell in record.iter().skip(1) {
            data.push(cell.parse::<f64>().map_err(|_| parse_err(format!("'{cell}' is not a number")))?);
        }
        let d = data.len() - start;
        match width {
            None if d == 0 => return Err(parse_err("row has no features".into())),
            None => width = Some(d),
            Some(w) if w != d => return Err(parse_err(format!("ragged row: expected {w} features, found {d}"))),
            Some(_) => {}
        }
        labels.push(label as usize);
    }
    let width = width.ok_or_else(|| Error::invalid("dataset is empty"))?;
    let features = Matrix::from_vec(labels.len(), width, data)?;
    LabeledDataset::from_labels(features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, per_class: usize, dim: usize, sep: f64, std: f64) -> BlobSpec {
        BlobSpec {
            classes,
            per_class,
            input_dim: dim,
            separation: sep,
            noise_std: std,
        }
    }

    #[test]
    fn noiseless_blobs_collapse_per_class() {
        let d = gen_blobs(&spec(3, 5, 4, 2.0, 0.0), RngSeed(1)).unwrap();
        for class in 0..3 {
            let rows: Vec<&[f64]> = (0..d.len()).filter(|&i| d.labels()[i] == class).map(|i| d.features().row(i)).collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn blob_counts_balanced() {
        let d = gen_blobs(&BlobSpec::default(), RngSeed(42)).unwrap();
        assert_eq!(d.len(), 2000);
        assert_eq!(d.class_counts(), vec![200; 10]);
        assert_eq!(d.input_dim(), 64);
    }

    #[test]
    fn centers_respect_separation() {
        let s = spec(10, 1, 16, 5.0, 0.0);
        let c = blob_centers(&s, &mut SeededRng::new(RngSeed(3))).unwrap();
        for i in 0..10 {
            for j in i + 1..10 {
                assert!(squared_distance(c.row(i), c.row(j)).sqrt() >= 5.0);
            }
        }
    }

    #[test]
    fn infeasible_separation_errors() {
        // Ten points on a circle of radius r cannot be pairwise r apart.
        let err = gen_blobs(&spec(10, 1, 2, 5.0, 0.1), RngSeed(0)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSeparation { .. }));
    }

    #[test]
    fn raw_features_are_separable_by_nearest_neighbor() {
        let train = gen_blobs(&spec(10, 50, 64, 5.0, 0.5), RngSeed(7)).unwrap();
        // Leave-one-out 1-NN over the raw features.
        let n = train.len();
        let mut correct = 0;
        for i in 0..n {
            let best = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = squared_distance(train.features().row(i), train.features().row(a));
                    let db = squared_distance(train.features().row(i), train.features().row(b));
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += usize::from(train.labels()[best] == train.labels()[i]);
        }
        assert!(correct as f64 / n as f64 >= 0.99);
    }

    #[test]
    fn split_keeps_class_counts() {
        let d = gen_blobs(&spec(4, 25, 3, 2.0, 0.5), RngSeed(2)).unwrap();
        let (train, test) = split_per_class(&d, 5);
        assert_eq!(train.class_counts(), vec![20; 4]);
        assert_eq!(test.class_counts(), vec![5; 4]);
        assert_eq!(test.num_classes(), 4);
    }

    #[test]
    fn csv_row_format() {
        let d = parse_csv("2,0.5,-1.25\n").unwrap();
        assert_eq!(d.labels(), &[2]);
        assert_eq!(d.features().row(0), &[0.5, -1.25]);
        assert_eq!(d.num_classes(), 3);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let text = "0,1,2\n1,1,2\n0,1,2\n1,1,2\n0,1,2\n1,1,2\n0,1\n";
        let err = parse_csv(text).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }), "{err}");
        assert!(err.to_string().contains("line 7"));
        assert!(matches!(parse_csv("0,1\nx,2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("0,1\n1,abc\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("-1,0.5\n"), Err(Error::Parse { line: 1, .. })));
        // blank lines are skipped but still counted
        let blank = parse_csv("0,1\n\n1,z\n").unwrap_err();
        assert!(matches!(blank, Error::Parse { line: 3, .. }), "{blank}");
    }

    #[test]
    fn export_2d_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let e = Matrix::from_rows(&[[0.5, 1.0], [2.0, -1.0], [0.0, 0.0]]).unwrap();
        let a = Matrix::from_rows(&[[1.0, 1.0], [-2.0, 0.5]]).unwrap();
        assert_eq!(save_2d_export(&e, &[0, 1, 1], &a, &path).unwrap(), 5);
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "1,2,-1");
        assert_eq!(lines[4], "-1,-2,0.5");
        let wide = Matrix::zeros(1, 3);
        assert!(save_2d_export(&wide, &[0], &Matrix::zeros(1, 3), &path).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = gen_blobs(&spec(3, 4, 5, 2.0, 1.0), RngSeed(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&d, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), d);
    }
}
