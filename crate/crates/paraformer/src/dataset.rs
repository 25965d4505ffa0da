//! On-disk dataset format: manifest + edge list + feature/label CSVs + splits.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json   {"name", "n", "m", "d", "c", "directed", "files": {...}}
//! edges.txt       one "u v" pair per line
//! features.csv    n rows of d comma-separated decimals
//! labels.csv      n lines of one integer; -1 marks an unlabeled node
//! splits.json     {"train": [...], "valid": [...], "test": [...]}
//! ```

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{Graph, SplitMask};
use crate::linalg::Mat;

// ---------------------------------------------------------------------------
// core containers
// ---------------------------------------------------------------------------

/// Dense node-feature matrix with all entries validated finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Mat,
}

impl FeatureMatrix {
    pub fn new(data: Mat) -> Result<Self> {
        crate::linalg::ensure_finite(&data, "feature matrix")?;
        Ok(FeatureMatrix { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.data
    }

    pub fn into_mat(self) -> Mat {
        self.data
    }
}

/// Per-node class ids; `None` marks an unlabeled node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    ids: Vec<Option<usize>>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(raw: Vec<i64>, num_classes: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(raw.len());
        for (i, &v) in raw.iter().enumerate() {
            match v {
                -1 => ids.push(None),
                v if v >= 0 && (v as usize) < num_classes => ids.push(Some(v as usize)),
                v => {
                    return Err(Error::LabelOutOfRange {
                        file: "<memory>".into(),
                        line: i + 1,
                        label: v,
                        classes: num_classes,
                    })
                }
            }
        }
        Ok(LabelVector { ids, num_classes })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.ids[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.ids.iter().copied()
    }

    fn to_raw(&self) -> Vec<i64> {
        self.ids
            .iter()
            .map(|v| v.map(|c| c as i64).unwrap_or(-1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestFiles {
    pub edges: String,
    pub features: String,
    pub labels: String,
    pub splits: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub c: usize,
    pub directed: bool,
    pub files: ManifestFiles,
}

impl ManifestFiles {
    pub fn default_names() -> Self {
        ManifestFiles {
            edges: "edges.txt".into(),
            features: "features.csv".into(),
            labels: "labels.csv".into(),
            splits: "splits.json".into(),
        }
    }
}

/// A fully loaded and cross-validated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub graph: Graph,
    pub features: FeatureMatrix,
    pub labels: LabelVector,
    pub splits: SplitMask,
    /// Edge pairs listed in the file before duplicate merging; equals
    /// `graph.m()` when the file is already canonical.
    pub raw_edge_count: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }
}

// ---------------------------------------------------------------------------
// generic CSV matrix helpers (shared with checkpoints)
// ---------------------------------------------------------------------------

/// Reads a dense matrix from comma-separated decimals, one row per line.
pub fn read_matrix_csv(path: &Path) -> Result<Mat> {
    let text = read_to_string(path)?;
    let fname = path.display().to_string();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, tok) in line.split(',').enumerate() {
            let v: f64 = tok.trim().parse().map_err(|e| Error::Parse {
                file: fname.clone(),
                line: idx + 1,
                msg: format!("bad number {tok:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteFeature {
                    file: fname.clone(),
                    line: idx + 1,
                    col,
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    file: fname,
                    line: idx + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Mat::from_shape_vec((n, d), flat).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

/// Writes a dense matrix as comma-separated decimals using the shortest
/// round-trip `f64` formatting, so save→load is bit-exact.
pub fn write_matrix_csv(path: &Path, m: &Mat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.into() });
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// load / save
// ---------------------------------------------------------------------------

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn load_edges(path: &Path, n: usize) -> Result<Vec<(u32, u32)>> {
    let text = read_to_string(path)?;
    let fname = path.display().to_string();
    let mut edges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (a, b) = match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Parse {
                    file: fname,
                    line: idx + 1,
                    msg: format!("expected \"u v\", got {line:?}"),
                })
            }
        };
        let parse = |tok: &str| -> Result<u64> {
            tok.parse().map_err(|e| Error::Parse {
                file: fname.clone(),
                line: idx + 1,
                msg: format!("bad node id {tok:?}: {e}"),
            })
        };
        let (u, v) = (parse(a)?, parse(b)?);
        if u >= n as u64 || v >= n as u64 {
            return Err(Error::EdgeOutOfRange {
                file: fname,
                line: idx + 1,
                u,
                v,
                n,
            });
        }
        edges.push((u as u32, v as u32));
    }
    Ok(edges)
}

fn load_labels(path: &Path, n: usize, c: usize) -> Result<LabelVector> {
    let text = read_to_string(path)?;
    let fname = path.display().to_string();
    let mut raw = Vec::with_capacity(n);
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: i64 = line.parse().map_err(|e| Error::Parse {
            file: fname.clone(),
            line: idx + 1,
            msg: format!("bad label {line:?}: {e}"),
        })?;
        if v != -1 && (v < 0 || v as usize >= c) {
            return Err(Error::LabelOutOfRange {
                file: fname,
                line: idx + 1,
                label: v,
                classes: c,
            });
        }
        raw.push(v);
    }
    if raw.len() != n {
        return Err(Error::shape(
            &format!("labels file {fname}"),
            format!("{n} rows"),
            format!("{} rows", raw.len()),
        ));
    }
    LabelVector::new(raw, c)
}

fn load_splits(path: &Path, n: usize) -> Result<SplitMask> {
    let text = read_to_string(path)?;
    let mask: SplitMask = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    mask.validate(n)?;
    Ok(mask)
}

/// Loads and cross-validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let edges_path = dir.join(&manifest.files.edges);
    let features_path = dir.join(&manifest.files.features);
    let labels_path = dir.join(&manifest.files.labels);
    let splits_path = dir.join(&manifest.files.splits);

    let raw_edges = load_edges(&edges_path, manifest.n)?;
    let raw_edge_count = raw_edges.len();
    let (graph, _merged) = Graph::new_dedup(manifest.n, raw_edges, manifest.directed)?;
    // Edge counts in the wild disagree about duplicate handling, so the
    // declared m may match either the raw listing or the canonical graph.
    if manifest.m != raw_edge_count && manifest.m != graph.m() {
        return Err(Error::shape(
            "manifest edge count",
            format!("{} raw or {} deduplicated", raw_edge_count, graph.m()),
            manifest.m,
        ));
    }

    let fm = read_matrix_csv(&features_path)?;
    if fm.nrows() != manifest.n || fm.ncols() != manifest.d {
        return Err(Error::shape(
            &format!("features file {}", features_path.display()),
            format!("{}x{}", manifest.n, manifest.d),
            format!("{}x{}", fm.nrows(), fm.ncols()),
        ));
    }
    let features = FeatureMatrix::new(fm)?;
    let labels = load_labels(&labels_path, manifest.n, manifest.c)?;
    let splits = load_splits(&splits_path, manifest.n)?;

    Ok(Dataset {
        name: manifest.name,
        graph,
        features,
        labels,
        splits,
        raw_edge_count,
    })
}

/// Writes a dataset directory in the canonical on-disk format. Each edge is
/// written once in canonical order, so a reloaded copy compares equal.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ManifestFiles::default_names();
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        n: ds.n(),
        m: ds.graph.m(),
        d: ds.d(),
        c: ds.num_classes(),
        directed: ds.graph.directed(),
        files: files.clone(),
    };
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    write(
        "manifest.json",
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    let mut edge_text = String::new();
    for &(u, v) in ds.graph.edges() {
        edge_text.push_str(&format!("{u} {v}\n"));
    }
    write(&files.edges, edge_text)?;
    write_matrix_csv(&dir.join(&files.features), ds.features.as_mat())?;
    let label_text: String = ds
        .labels
        .to_raw()
        .iter()
        .map(|v| format!("{v}\n"))
        .collect();
    write(&files.labels, label_text)?;
    write(
        &files.splits,
        serde_json::to_string(&ds.splits).expect("splits serialize") + "\n",
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_dataset() -> Dataset {
        let graph = Graph::new(3, vec![(0, 1), (1, 2)], false).unwrap();
        let features =
            FeatureMatrix::new(array![[0.25, -1.5], [3.0, 0.125], [1e-3, 42.0]]).unwrap();
        let labels = LabelVector::new(vec![0, 1, -1], 2).unwrap();
        let splits = SplitMask {
            train: vec![0],
            valid: vec![1],
            test: vec![2],
        };
        Dataset {
            name: "toy".into(),
            graph,
            features,
            labels,
            splits,
            raw_edge_count: 2,
        }
    }

    #[test]
    fn save_load_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.graph, ds.graph);
        assert_eq!(loaded.features, ds.features);
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.splits, ds.splits);

        // Saving the loaded copy reproduces the first save byte-for-byte.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        for name in ["manifest.json", "edges.txt", "features.csv", "labels.csv", "splits.json"] {
            let a = fs::read(dir.path().join(name)).unwrap();
            let b = fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across saves");
        }
    }

    #[test]
    fn empty_edge_file_loads_as_edgeless_graph() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy_dataset();
        ds.graph = Graph::new(3, vec![], false).unwrap();
        ds.raw_edge_count = 0;
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.graph.m(), 0);
        assert_eq!(loaded.n(), 3);
    }

    #[test]
    fn feature_column_mismatch_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy_dataset(), dir.path()).unwrap();
        // Manifest declares d=2; rewrite features with 3 columns.
        fs::write(dir.path().join("features.csv"), "1,2,3\n4,5,6\n7,8,9\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn non_finite_feature_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy_dataset(), dir.path()).unwrap();
        fs::write(dir.path().join("features.csv"), "1,2\n3,NaN\n5,6\n").unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            Error::NonFiniteFeature { line, col, .. } => {
                assert_eq!((line, col), (2, 1));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn out_of_range_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy_dataset(), dir.path()).unwrap();
        fs::write(dir.path().join("labels.csv"), "0\n7\n-1\n").unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            Error::LabelOutOfRange { line, label, classes, .. } => {
                assert_eq!((line, label, classes), (2, 7, 2));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn missing_file_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy_dataset(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("edges.txt")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            Error::MissingFile { .. }
        ));
    }

    #[test]
    fn manifest_edge_count_accepts_raw_or_dedup() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy_dataset(), dir.path()).unwrap();
        // Duplicate one edge: file now lists 3 raw pairs, 2 canonical.
        fs::write(dir.path().join("edges.txt"), "0 1\n1 2\n1 0\n").unwrap();
        // Manifest still says m=2 (dedup count) → accepted.
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.graph.m(), 2);
        assert_eq!(ds.raw_edge_count, 3);
        // m=3 (raw count) → also accepted.
        let manifest_path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&manifest_path).unwrap();
        fs::write(&manifest_path, text.replace("\"m\": 2", "\"m\": 3")).unwrap();
        assert!(load_dataset(dir.path()).is_ok());
        // m=9 matches neither → error.
        let text = fs::read_to_string(&manifest_path).unwrap();
        fs::write(&manifest_path, text.replace("\"m\": 3", "\"m\": 9")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn matrix_csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = array![
            [std::f64::consts::PI, -1.0 / 3.0],
            [f64::MIN_POSITIVE, 6.02214076e23]
        ];
        write_matrix_csv(&path, &m).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn label_vector_flags_unlabeled_entries() {
        let lv = LabelVector::new(vec![2, -1, 0], 3).unwrap();
        assert_eq!(lv.label(0), Some(2));
        assert_eq!(lv.label(1), None);
        assert!(LabelVector::new(vec![3], 3).is_err());
    }
}
