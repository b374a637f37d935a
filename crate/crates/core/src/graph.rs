//! Planetoid-style citation graphs, node alignment and vertical partitioning.
//!
//! A `<name>.content` file holds one node per line,
//! `node_id <tab> f_1 … f_k <tab> label`; a `<name>.cites` file holds one
//! citation per line, `cited <tab> citing`. Edges are stored undirected as
//! `(min, max)` node-index pairs, de-duplicated, without self loops.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synthetic;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{0} contains no records")]
    Empty(PathBuf),
    #[error("no `.content` file found in {0}")]
    MissingContent(PathBuf),
    #[error("the two parties share no node ids")]
    EmptyIntersection,
    #[error("ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("split leaves party {0:?} without any {1}")]
    EmptySide(Party, &'static str),
    #[error("need at least {needed} nodes, have {have}")]
    TooFewNodes { needed: usize, have: usize },
    #[error("views disagree: {0}")]
    ViewMismatch(&'static str),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Data-holding party. The active party owns the labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    /// Company A: features and edges only.
    Passive,
    /// Company B: features, edges and labels.
    Active,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub node_ids: Vec<String>,
    /// `nodes × feature_dim`
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Class names in index order (sorted).
    pub class_names: Vec<String>,
    /// Canonical `(min, max)` undirected pairs, sorted.
    pub edges: Vec<(usize, usize)>,
    pub report: LoadReport,
}

/// What the loader saw besides the kept edges.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub raw_edge_rows: usize,
    pub dropped_unknown: usize,
    pub duplicate_edges: usize,
    pub self_loops: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub nodes: usize,
    pub edges: usize,
    pub features: usize,
    pub classes: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} nodes, {} edges, {} features, {} classes", self.nodes, self.edges, self.features, self.classes)
    }
}

/// Published statistics of the three benchmark graphs.
pub const REFERENCE_STATS: [(&str, DatasetStats); 3] = [
    ("cora", DatasetStats { nodes: 2708, edges: 5409, features: 1433, classes: 7 }),
    ("pubmed", DatasetStats { nodes: 19717, edges: 44338, features: 500, classes: 3 }),
    ("citeseer", DatasetStats { nodes: 3327, edges: 4732, features: 3703, classes: 6 }),
];

pub fn reference_stats(name: &str) -> Option<DatasetStats> {
    let lower = name.to_ascii_lowercase();
    REFERENCE_STATS.iter().find(|(n, _)| *n == lower).map(|(_, s)| *s)
}

/// Field-by-field difference `observed - expected`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsDelta {
    pub dataset: String,
    pub expected: DatasetStats,
    pub observed: DatasetStats,
}

impl StatsDelta {
    pub fn is_exact(&self) -> bool {
        self.expected == self.observed
    }
}

impl fmt::Display for StatsDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = |o: usize, e: usize| o as i64 - e as i64;
        write!(
            f,
            "{}: expected [{}], observed [{}], delta nodes {:+} edges {:+} features {:+} classes {:+}",
            self.dataset,
            self.expected,
            self.observed,
            d(self.observed.nodes, self.expected.nodes),
            d(self.observed.edges, self.expected.edges),
            d(self.observed.features, self.expected.features),
            d(self.observed.classes, self.expected.classes),
        )
    }
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            nodes: self.num_nodes(),
            edges: self.edges.len(),
            features: self.feature_dim(),
            classes: self.num_classes(),
        }
    }

    /// Compare against the published statistics; `None` for unknown names.
    pub fn check_reference(&self) -> Option<StatsDelta> {
        reference_stats(&self.name).map(|expected| StatsDelta {
            dataset: self.name.clone(),
            expected,
            observed: self.stats(),
        })
    }

    /// Adjacency lists over node indices.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        adjacency(self.num_nodes(), &self.edges)
    }

    /// Induced subgraph on a seeded random sample of `n` nodes (kept in their
    /// original order).
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.num_nodes() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.num_nodes()).collect();
        idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        let mut remap = vec![usize::MAX; self.num_nodes()];
        for (new, &old) in idx.iter().enumerate() {
            remap[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(u, v)| {
                let (a, b) = (remap[u], remap[v]);
                (a != usize::MAX && b != usize::MAX).then_some((a.min(b), a.max(b)))
            })
            .collect();
        Dataset {
            name: self.name.clone(),
            node_ids: idx.iter().map(|&i| self.node_ids[i].clone()).collect(),
            features: self.features.select(Axis(0), &idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            edges,
            report: self.report.clone(),
        }
    }
}

pub fn adjacency(num_nodes: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); num_nodes];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    adj
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.to_path_buf(), source })
}

/// Load a `.content` / `.cites` pair.
pub fn load_planetoid(content_path: &Path, cites_path: &Path) -> Result<Dataset> {
    let content = read(content_path)?;
    let malformed =
        |line: usize, reason: String| GraphError::Malformed { path: content_path.to_path_buf(), line, reason };

    let mut node_ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(malformed(lineno + 1, format!("expected id, features and label, got {} fields", fields.len())));
        }
        let id = fields[0].to_string();
        let label = fields[fields.len() - 1].to_string();
        let feats = fields[1..fields.len() - 1]
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| malformed(lineno + 1, format!("bad feature value: {e}")))?;
        if let Some(first) = rows.first() {
            if first.len() != feats.len() {
                return Err(malformed(lineno + 1, format!("expected {} features, got {}", first.len(), feats.len())));
            }
        }
        if index.insert(id.clone(), node_ids.len()).is_some() {
            return Err(malformed(lineno + 1, format!("duplicate node id {id}")));
        }
        node_ids.push(id);
        rows.push(feats);
        raw_labels.push(label);
    }
    if node_ids.is_empty() {
        return Err(GraphError::Empty(content_path.to_path_buf()));
    }

    let class_names: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels = raw_labels.iter().map(|l| class_names.binary_search(l).expect("label collected above")).collect();
    let dim = rows[0].len();
    let features = Array2::from_shape_vec((rows.len(), dim), rows.into_iter().flatten().collect())
        .expect("rows checked to equal width");

    let cites = read(cites_path)?;
    let mut report = LoadReport::default();
    let mut edges = BTreeSet::new();
    for (lineno, line) in cites.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(GraphError::Malformed {
                path: cites_path.to_path_buf(),
                line: lineno + 1,
                reason: format!("expected 2 tab-separated ids, got {}", fields.len()),
            });
        }
        report.raw_edge_rows += 1;
        let (Some(&u), Some(&v)) = (index.get(fields[0].trim()), index.get(fields[1].trim())) else {
            report.dropped_unknown += 1;
            continue;
        };
        if u == v {
            report.self_loops += 1;
            continue;
        }
        if !edges.insert((u.min(v), u.max(v))) {
            report.duplicate_edges += 1;
        }
    }
    if report.raw_edge_rows == 0 {
        return Err(GraphError::Empty(cites_path.to_path_buf()));
    }
    if report.dropped_unknown > 0 {
        log::warn!(
            "{}: dropped {} citation rows referencing unknown nodes",
            cites_path.display(),
            report.dropped_unknown
        );
    }

    let name = content_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Dataset { name, node_ids, features, labels, class_names, edges: edges.into_iter().collect(), report })
}

/// Load `<dir>/<name>.content` and `<dir>/<name>.cites`. Without a name, the
/// directory must contain exactly one `.content` file.
pub fn load_planetoid_dir(dir: &Path, name: Option<&str>) -> Result<Dataset> {
    let stem = match name {
        Some(n) => n.to_string(),
        None => {
            let entries = fs::read_dir(dir).map_err(|source| GraphError::Io { path: dir.to_path_buf(), source })?;
            let mut stems: Vec<String> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "content"))
                .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .collect();
            stems.sort();
            match stems.as_slice() {
                [one] => one.clone(),
                _ => return Err(GraphError::MissingContent(dir.to_path_buf())),
            }
        }
    };
    load_planetoid(&dir.join(format!("{stem}.content")), &dir.join(format!("{stem}.cites")))
}

/// Plain sorted intersection of two id sets. Stands in for a private set
/// intersection: both parties are assumed to have aligned their nodes already.
pub fn align_nodes<S: AsRef<str>>(ids_a: &[S], ids_b: &[S]) -> Result<Vec<String>> {
    let a: BTreeSet<&str> = ids_a.iter().map(AsRef::as_ref).collect();
    let b: BTreeSet<&str> = ids_b.iter().map(AsRef::as_ref).collect();
    let common: Vec<String> = a.intersection(&b).map(|s| s.to_string()).collect();
    if common.is_empty() {
        return Err(GraphError::EmptyIntersection);
    }
    Ok(common)
}

/// One party's slice of the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct VerticalView {
    pub party: Party,
    pub node_ids: Vec<String>,
    /// Original column index of each local feature column.
    pub feature_columns: Vec<usize>,
    pub features: Array2<f64>,
    /// Local edges as `(min, max)` indices into `node_ids`.
    pub edges: Vec<(usize, usize)>,
    /// Present only for the active party.
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl VerticalView {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        adjacency(self.num_nodes(), &self.edges)
    }

    /// Local neighbor count per node (the `N_i` a party shares).
    pub fn degrees(&self) -> Vec<u32> {
        let mut deg = vec![0u32; self.num_nodes()];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Restrict and reorder the view to `ids`, dropping edges that leave it.
    pub fn restrict_to(&self, ids: &[String]) -> Result<VerticalView> {
        let pos: HashMap<&str, usize> = self.node_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let picks: Vec<usize> = ids
            .iter()
            .map(|id| pos.get(id.as_str()).copied().ok_or(GraphError::ViewMismatch("id missing from view")))
            .collect::<Result<_>>()?;
        let mut remap = vec![usize::MAX; self.num_nodes()];
        for (new, &old) in picks.iter().enumerate() {
            remap[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(u, v)| {
                let (a, b) = (remap[u], remap[v]);
                (a != usize::MAX && b != usize::MAX).then_some((a.min(b), a.max(b)))
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(VerticalView {
            party: self.party,
            node_ids: ids.to_vec(),
            feature_columns: self.feature_columns.clone(),
            features: self.features.select(Axis(0), &picks),
            edges,
            labels: self.labels.as_ref().map(|l| picks.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        })
    }

    /// Treat this view as a stand-alone dataset (isolated training). Labels
    /// must be supplied for the passive party, which holds none.
    pub fn to_dataset(&self, labels: &[usize], class_names: &[String]) -> Dataset {
        Dataset {
            name: format!("{:?}", self.party).to_lowercase(),
            node_ids: self.node_ids.clone(),
            features: self.features.clone(),
            labels: labels.to_vec(),
            class_names: class_names.to_vec(),
            edges: self.edges.clone(),
            report: LoadReport::default(),
        }
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(GraphError::InvalidRatio(r))
    }
}

/// Seeded random split: shuffled feature columns, the first
/// `⌊feature_ratio·k⌋` to A and the rest to B; edges likewise. Labels go to B.
pub fn split_vertical(
    d: &Dataset,
    feature_ratio: f64,
    edge_ratio: f64,
    seed: u64,
) -> Result<(VerticalView, VerticalView)> {
    check_ratio(feature_ratio)?;
    check_ratio(edge_ratio)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let k = d.feature_dim();
    let mut cols: Vec<usize> = (0..k).collect();
    cols.shuffle(&mut rng);
    let cut = (feature_ratio * k as f64).floor() as usize;
    let (cols_a, cols_b) = cols.split_at(cut);
    if cols_a.is_empty() {
        return Err(GraphError::EmptySide(Party::Passive, "feature columns"));
    }
    if cols_b.is_empty() {
        return Err(GraphError::EmptySide(Party::Active, "feature columns"));
    }

    let mut edges = d.edges.clone();
    edges.shuffle(&mut rng);
    let ecut = (edge_ratio * edges.len() as f64).floor() as usize;
    let mut edges_a = edges[..ecut].to_vec();
    let mut edges_b = edges[ecut..].to_vec();
    if edges_a.is_empty() {
        return Err(GraphError::EmptySide(Party::Passive, "edges"));
    }
    if edges_b.is_empty() {
        return Err(GraphError::EmptySide(Party::Active, "edges"));
    }
    edges_a.sort_unstable();
    edges_b.sort_unstable();

    let view = |party, cols: &[usize], edges, labels| VerticalView {
        party,
        node_ids: d.node_ids.clone(),
        feature_columns: cols.to_vec(),
        features: d.features.select(Axis(1), cols),
        edges,
        labels,
        num_classes: d.num_classes(),
    };
    Ok((view(Party::Passive, cols_a, edges_a, None), view(Party::Active, cols_b, edges_b, Some(d.labels.clone()))))
}

/// Rebuild the full dataset from the two views: feature columns return to
/// their original positions and the edge sets are united.
pub fn reconstruct(a: &VerticalView, b: &VerticalView, class_names: &[String], name: &str) -> Result<Dataset> {
    if a.node_ids != b.node_ids {
        return Err(GraphError::ViewMismatch("node ids differ"));
    }
    let labels = b.labels.clone().ok_or(GraphError::ViewMismatch("active view carries no labels"))?;
    let k = a.feature_columns.len() + b.feature_columns.len();
    let n = a.num_nodes();
    let mut features = Array2::zeros((n, k));
    for (view, cols) in [(a, &a.feature_columns), (b, &b.feature_columns)] {
        for (local, &orig) in cols.iter().enumerate() {
            if orig >= k {
                return Err(GraphError::ViewMismatch("feature column out of range"));
            }
            features.column_mut(orig).assign(&view.features.column(local));
        }
    }
    let edges: BTreeSet<(usize, usize)> = a.edges.iter().chain(&b.edges).copied().collect();
    Ok(Dataset {
        name: name.to_string(),
        node_ids: a.node_ids.clone(),
        features,
        labels,
        class_names: class_names.to_vec(),
        edges: edges.into_iter().collect(),
        report: LoadReport::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const NUM_FOLDS: usize = 5;

/// Seeded shuffle of node indices, then contiguous fifths as test sets.
pub fn five_fold(num_nodes: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if num_nodes < NUM_FOLDS {
        return Err(GraphError::TooFewNodes { needed: NUM_FOLDS, have: num_nodes });
    }
    let mut order: Vec<usize> = (0..num_nodes).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let base = num_nodes / NUM_FOLDS;
    let extra = num_nodes % NUM_FOLDS;
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    let mut start = 0;
    for fold_index in 0..NUM_FOLDS {
        let len = base + usize::from(fold_index < extra);
        let test = order[start..start + len].to_vec();
        let train = order[..start].iter().chain(&order[start + len..]).copied().collect();
        folds.push(FoldSplit { fold_index, train, test });
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fixture(dir: &Path, content: &str, cites: &str) -> (PathBuf, PathBuf) {
        let c = dir.join("toy.content");
        let e = dir.join("toy.cites");
        fs::File::create(&c).unwrap().write_all(content.as_bytes()).unwrap();
        fs::File::create(&e).unwrap().write_all(cites.as_bytes()).unwrap();
        (c, e)
    }

    #[test]
    fn toy_fixture_is_echoed() {
        let dir = tempfile::tempdir().unwrap();
        let (c, e) = write_fixture(
            dir.path(),
            "10\t1\t0\t1\tAlpha\n20\t0\t1\t0\tBeta\n30\t1\t1\t0\tAlpha\n",
            "10\t20\n30\t20\n",
        );
        let d = load_planetoid(&c, &e).unwrap();
        assert_eq!(d.node_ids, vec!["10", "20", "30"]);
        assert_eq!(d.features.row(0).to_vec(), vec![1.0, 0.0, 1.0]);
        assert_eq!(d.features.row(2).to_vec(), vec![1.0, 1.0, 0.0]);
        assert_eq!(d.labels, vec![0, 1, 0]);
        assert_eq!(d.class_names, vec!["Alpha", "Beta"]);
        assert_eq!(d.edges, vec![(0, 1), (1, 2)]);
        assert_eq!(d.stats(), DatasetStats { nodes: 3, edges: 2, features: 3, classes: 2 });
        let same = load_planetoid_dir(dir.path(), None).unwrap();
        assert_eq!(same, d);
    }

    #[test]
    fn dedup_unknown_and_self_loops() {
        let dir = tempfile::tempdir().unwrap();
        let (c, e) = write_fixture(dir.path(), "a\t1\tx\nb\t0\ty\n", "a\tb\nb\ta\na\ta\na\tzzz\n");
        let d = load_planetoid(&c, &e).unwrap();
        assert_eq!(d.edges, vec![(0, 1)]);
        assert_eq!(d.report, LoadReport { raw_edge_rows: 4, dropped_unknown: 1, duplicate_edges: 1, self_loops: 1 });
    }

    #[test]
    fn malformed_and_empty_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let (c, e) = write_fixture(dir.path(), "a\t1\tx\nb\t0\t1\ty\n", "a\tb\n");
        assert!(matches!(load_planetoid(&c, &e), Err(GraphError::Malformed { line: 2, .. })));
        let (c, e) = write_fixture(dir.path(), "a\tzz\tx\n", "a\ta\n");
        assert!(matches!(load_planetoid(&c, &e), Err(GraphError::Malformed { .. })));
        let (c, e) = write_fixture(dir.path(), "", "a\tb\n");
        assert!(matches!(load_planetoid(&c, &e), Err(GraphError::Empty(_))));
        let (c, e) = write_fixture(dir.path(), "a\t1\tx\n", "");
        assert!(matches!(load_planetoid(&c, &e), Err(GraphError::Empty(_))));
        let (c, e) = write_fixture(dir.path(), "a\t1\tx\n", "a b\n");
        assert!(matches!(load_planetoid(&c, &e), Err(GraphError::Malformed { .. })));
        assert!(matches!(load_planetoid(&dir.path().join("nope.content"), &e), Err(GraphError::Io { .. })));
    }

    #[test]
    fn alignment() {
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(align_nodes(&ids(&["3", "1", "2"]), &ids(&["2", "3", "1"])).unwrap(), ids(&["1", "2", "3"]));
        assert!(matches!(align_nodes(&ids(&["1"]), &ids(&["2"])), Err(GraphError::EmptyIntersection)));
        assert_eq!(align_nodes(&ids(&["1", "2", "3"]), &ids(&["2", "3", "4"])).unwrap(), ids(&["2", "3"]));
    }

    fn toy(n_nodes: usize, n_edges: usize) -> Dataset {
        synthetic::SyntheticConfig {
            num_nodes: n_nodes,
            num_classes: 2,
            feature_dim: 6,
            avg_degree: 2.0 * n_edges as f64 / n_nodes as f64,
            ..Default::default()
        }
        .generate(1)
    }

    #[test]
    fn split_counts_and_determinism() {
        let d = toy(10, 10);
        let mut d = d;
        d.edges = (0..10).map(|i| (i, (i + 1) % 10)).map(|(u, v)| (u.min(v), u.max(v))).collect();
        d.edges.sort_unstable();
        let (a, b) = split_vertical(&d, 0.5, 0.5, 3).unwrap();
        assert_eq!(a.edges.len(), 5);
        assert_eq!(b.edges.len(), 5);
        assert!(a.edges.iter().all(|e| !b.edges.contains(e)));
        assert_eq!(a.feature_columns.len(), 3);
        assert!(a.labels.is_none() && b.labels.is_some());
        assert_eq!(split_vertical(&d, 0.5, 0.5, 3).unwrap(), (a.clone(), b.clone()));
        let back = reconstruct(&a, &b, &d.class_names, &d.name).unwrap();
        assert_eq!(back.features, d.features);
        assert_eq!(back.edges, d.edges);
        assert!(matches!(split_vertical(&d, 0.0, 0.5, 1), Err(GraphError::InvalidRatio(_))));
        assert!(matches!(split_vertical(&d, 0.1, 0.5, 1), Err(GraphError::EmptySide(Party::Passive, _))));
    }

    #[test]
    fn split_column_arithmetic() {
        let cut = (0.5 * 1433f64).floor() as usize;
        assert_eq!((cut, 1433 - cut), (716, 717));
    }

    #[test]
    fn folds_partition_nodes() {
        let folds = five_fold(10, 4).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        assert!(folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 8));
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(five_fold(10, 4).unwrap(), folds);
        let mut sizes: Vec<usize> = five_fold(2708, 0).unwrap().iter().map(|f| f.test.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![541, 541, 542, 542, 542]);
        assert!(matches!(five_fold(4, 0), Err(GraphError::TooFewNodes { .. })));
    }

    #[test]
    fn restrict_reorders_and_drops_edges() {
        let d = toy(6, 6);
        let (a, _) = split_vertical(&d, 0.5, 0.5, 2).unwrap();
        let keep: Vec<String> = vec![d.node_ids[4].clone(), d.node_ids[1].clone()];
        let r = a.restrict_to(&keep).unwrap();
        assert_eq!(r.node_ids, keep);
        assert_eq!(r.features.row(0), a.features.row(4));
        assert!(r.edges.iter().all(|&(u, v)| u < 2 && v < 2));
    }

    #[test]
    fn reference_delta_reports_drift() {
        let d = toy(8, 8);
        let mut d = d;
        d.name = "Cora".into();
        let delta = d.check_reference().unwrap();
        assert!(!delta.is_exact());
        assert!(delta.to_string().contains("delta nodes -2700"));
    }
}
