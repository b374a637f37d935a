//! Planted-partition citation graphs with bag-of-words features.
//!
//! Used by the examples and tests when the real benchmark files are not at
//! hand. Each class owns a set of topic words; nodes draw words from their
//! class topic with probability `topic_prob` and uniformly otherwise, and link
//! to same-class nodes with probability `homophily`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{Dataset, GraphError, LoadReport, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub name: String,
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub avg_degree: f64,
    pub homophily: f64,
    pub words_per_node: usize,
    pub topic_words: usize,
    pub topic_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            num_nodes: 300,
            num_classes: 4,
            feature_dim: 120,
            avg_degree: 4.0,
            homophily: 0.8,
            words_per_node: 10,
            topic_words: 12,
            topic_prob: 0.35,
        }
    }
}

impl SyntheticConfig {
    pub fn generate(&self, seed: u64) -> Dataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = self.num_nodes;
        let k = self.feature_dim.max(1);
        let classes = self.num_classes.max(1);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();

        let topics: Vec<Vec<usize>> =
            (0..classes).map(|_| sample(&mut rng, k, self.topic_words.clamp(1, k)).into_vec()).collect();
        let mut features = Array2::zeros((n, k));
        for (v, &y) in labels.iter().enumerate() {
            for _ in 0..self.words_per_node {
                let w = if rng.gen_bool(self.topic_prob.clamp(0.0, 1.0)) {
                    topics[y][rng.gen_range(0..topics[y].len())]
                } else {
                    rng.gen_range(0..k)
                };
                features[[v, w]] = 1.0;
            }
        }

        let by_class: Vec<Vec<usize>> = (0..classes).map(|c| (0..n).filter(|&v| labels[v] == c).collect()).collect();
        let target = ((self.avg_degree * n as f64) / 2.0).round() as usize;
        let max_edges = n * n.saturating_sub(1) / 2;
        let target = target.min(max_edges);
        let mut edges = BTreeSet::new();
        let mut attempts = 0usize;
        while edges.len() < target && attempts < 50 * target + 100 {
            attempts += 1;
            let u = rng.gen_range(0..n);
            let v = if rng.gen_bool(self.homophily.clamp(0.0, 1.0)) {
                let pool = &by_class[labels[u]];
                pool[rng.gen_range(0..pool.len())]
            } else {
                rng.gen_range(0..n)
            };
            if u != v {
                edges.insert((u.min(v), u.max(v)));
            }
        }

        Dataset {
            name: self.name.clone(),
            node_ids: (0..n).map(|i| format!("{}", 1000 + i)).collect(),
            features,
            labels,
            class_names: (0..classes).map(|c| format!("Class_{c}")).collect(),
            edges: edges.into_iter().collect(),
            report: LoadReport::default(),
        }
    }
}

/// Write `<dir>/<name>.content` and `<dir>/<name>.cites`.
pub fn write_planetoid(d: &Dataset, dir: &Path) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| GraphError::Io { path: path.clone(), source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let content = dir.join(format!("{}.content", d.name));
    let mut w = BufWriter::new(fs::File::create(&content).map_err(io(&content))?);
    for (v, id) in d.node_ids.iter().enumerate() {
        let feats: Vec<String> = d.features.row(v).iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{}\t{}\t{}", id, feats.join("\t"), d.class_names[d.labels[v]]).map_err(io(&content))?;
    }
    w.flush().map_err(io(&content))?;
    let cites = dir.join(format!("{}.cites", d.name));
    let mut w = BufWriter::new(fs::File::create(&cites).map_err(io(&cites))?);
    for &(u, v) in &d.edges {
        writeln!(w, "{}\t{}", d.node_ids[u], d.node_ids[v]).map_err(io(&cites))?;
    }
    w.flush().map_err(io(&cites))
}
