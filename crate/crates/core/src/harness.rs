//! Experiment runner: the four training settings over a Planetoid-format
//! dataset, five-fold accuracy, JSON-lines records and a comparison table.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::{
    accuracy, fold_seed, train_plaintext, Activation, GnnError, GraphInput, ModelSpec, SageModel, TrainConfig,
    WalkConfig, DEFAULT_DROPOUT, DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE,
};
use crate::graph::{five_fold, load_planetoid_dir, reconstruct, split_vertical, Dataset, GraphError, NUM_FOLDS};
use crate::paillier::KeySize;
use crate::protocol::{CostCounters, FederatedSession, ProtocolError, SessionConfig, Task, UnsupervisedTerm};

/// Reference accuracy of each setting, in `[cora, pubmed, citeseer]` order.
pub const REFERENCE_ACCURACY: [(Setting, [f64; 3]); 4] = [
    (Setting::IsolatedA, [0.5222, 0.6936, 0.4630]),
    (Setting::IsolatedB, [0.4867, 0.6801, 0.5510]),
    (Setting::Federated, [0.6770, 0.7830, 0.6820]),
    (Setting::Combined, [0.7080, 0.7890, 0.6983]),
];

pub const REFERENCE_DATASETS: [&str; 3] = ["cora", "pubmed", "citeseer"];

/// Reference accuracy for `setting` on `dataset`, if listed.
pub fn reference_accuracy(setting: Setting, dataset: &str) -> Option<f64> {
    let col = REFERENCE_DATASETS.iter().position(|d| d.eq_ignore_ascii_case(dataset))?;
    REFERENCE_ACCURACY.iter().find(|(s, _)| *s == setting).map(|(_, row)| row[col])
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] GraphError),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Record { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] GnnError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for unreadable or
    /// malformed inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Read { .. } | Self::Record { .. } => 3,
            Self::Protocol(ProtocolError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    IsolatedA,
    IsolatedB,
    Federated,
    Combined,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Self::IsolatedA, Self::IsolatedB, Self::Federated, Self::Combined];

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::IsolatedA => "GraphSage_A",
            Self::IsolatedB => "GraphSage_B",
            Self::Federated => "FedVGraphSage",
            Self::Combined => "GraphSage_A+B",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::IsolatedA => "isolated_a",
            Self::IsolatedB => "isolated_b",
            Self::Federated => "federated",
            Self::Combined => "combined",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| HarnessError::Config(format!("unknown setting {s:?}")))
    }
}

/// Scale `a` of the quadratic activation: fitted to the first layer's
/// pre-activations, or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScaleParam {
    #[default]
    Auto,
    Fixed(f64),
}

impl FromStr for ScaleParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        match s.parse::<f64>() {
            Ok(a) if a.is_finite() && a > 0.0 => Ok(Self::Fixed(a)),
            _ => {
                Err(HarnessError::Config(format!("activation scale must be \"auto\" or a positive number, got {s:?}")))
            }
        }
    }
}

impl TryFrom<String> for ScaleParam {
    type Error = HarnessError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScaleParam> for String {
    fn from(p: ScaleParam) -> String {
        match p {
            ScaleParam::Auto => "auto".into(),
            ScaleParam::Fixed(a) => a.to_string(),
        }
    }
}

/// Hidden nonlinearity of the two isolated baselines. The federated and
/// combined settings always use the quadratic activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedActivation {
    #[default]
    Relu,
    Quad,
}

impl FromStr for IsolatedActivation {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "quad" => Ok(Self::Quad),
            _ => Err(HarnessError::Config(format!("isolated activation must be relu or quad, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding `<name>.content` and `<name>.cites`.
    pub dataset_dir: PathBuf,
    /// File stem; inferred when the directory holds a single dataset.
    pub name: Option<String>,
    pub setting: Setting,
    pub feature_ratio: f64,
    pub edge_ratio: f64,
    pub epochs: usize,
    /// Federated sessions train for `min(epochs, cap)` iterations.
    pub federated_epoch_cap: Option<usize>,
    pub seed: u64,
    /// Ignored under `full_crypto`, which uses 2048-bit keys.
    pub key_bits: u64,
    pub full_crypto: bool,
    pub frac_bits: u32,
    pub activation_scale: ScaleParam,
    pub isolated_activation: IsolatedActivation,
    pub learning_rate: f64,
    pub dropout: f64,
    pub unsup_weight: f64,
    pub hidden: Vec<usize>,
    /// Run only the first `folds` of the five.
    pub folds: usize,
    /// Random node subsample applied before the split.
    pub max_nodes: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::new(),
            name: None,
            setting: Setting::Combined,
            feature_ratio: 0.5,
            edge_ratio: 0.5,
            epochs: 100,
            federated_epoch_cap: Some(30),
            seed: 0,
            key_bits: 512,
            full_crypto: false,
            frac_bits: crate::paillier::DEFAULT_FRAC_BITS,
            activation_scale: ScaleParam::Auto,
            isolated_activation: IsolatedActivation::Relu,
            learning_rate: DEFAULT_LEARNING_RATE,
            dropout: DEFAULT_DROPOUT,
            unsup_weight: 0.0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            folds: NUM_FOLDS,
            max_nodes: None,
        }
    }
}

impl ExperimentConfig {
    pub fn new(dataset_dir: impl Into<PathBuf>, name: Option<&str>, setting: Setting) -> Self {
        Self { dataset_dir: dataset_dir.into(), name: name.map(str::to_string), setting, ..Self::default() }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| HarnessError::Read { path: path.to_path_buf(), source })?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn key_size(&self) -> Result<KeySize> {
        let (bits, test_mode) = if self.full_crypto { (2048, false) } else { (self.key_bits, true) };
        KeySize::from_bits(bits, test_mode).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Training iterations this setting will run.
    pub fn effective_epochs(&self) -> usize {
        match (self.setting, self.federated_epoch_cap) {
            (Setting::Federated, Some(cap)) => self.epochs.min(cap),
            _ => self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        for (field, r) in [("feature_ratio", self.feature_ratio), ("edge_ratio", self.edge_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                return bad(format!("{field} must lie in (0, 1), got {r}"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.unsup_weight.is_finite() && self.unsup_weight >= 0.0) {
            return bad(format!("unsup_weight must be non-negative, got {}", self.unsup_weight));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be non-empty and positive, got {:?}", self.hidden));
        }
        if !(1..=NUM_FOLDS).contains(&self.folds) {
            return bad(format!("folds must lie in 1..={NUM_FOLDS}, got {}", self.folds));
        }
        if self.max_nodes.is_some_and(|n| n < NUM_FOLDS) {
            return bad(format!("max_nodes must be at least {NUM_FOLDS}"));
        }
        let key = self.key_size()?;
        // double-scale products need 2·frac_bits plus sign and headroom bits
        let max_frac = (key.bits() / 8) as u32;
        if !(8..=max_frac).contains(&self.frac_bits) {
            return bad(format!(
                "frac_bits must lie in 8..={max_frac} for {}-bit keys, got {}",
                key.bits(),
                self.frac_bits
            ));
        }
        Ok(())
    }
}

/// Outcome of one [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub dataset: String,
    pub label: String,
    pub nodes: usize,
    pub edges: usize,
    pub epochs_run: usize,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Training loss of the last epoch, per fold.
    pub final_losses: Vec<f64>,
    /// Fitted or fixed activation scale per fold; empty for ReLU.
    pub activation_scales: Vec<f64>,
    pub wall_seconds: f64,
    /// Summed over folds; federated runs only.
    pub counters: Option<CostCounters>,
    /// Hex SHA-256 of each fold's message transcript; federated runs only.
    pub transcripts: Vec<String>,
}

impl RunRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.fold_accuracies.is_empty() {
            return Err("no fold accuracies".into());
        }
        if let Some(a) = self.fold_accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(format!("accuracy {a} outside [0, 1]"));
        }
        if self.label != self.config.setting.label() {
            return Err(format!("label {:?} does not match setting {}", self.label, self.config.setting));
        }
        Ok(())
    }

    /// Equal in everything but wall time; losses compare bitwise.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let bits = |r: &RunRecord| r.final_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        let strip = |r: &RunRecord| RunRecord { wall_seconds: 0.0, final_losses: Vec::new(), ..r.clone() };
        bits(self) == bits(other) && strip(self) == strip(other)
    }
}

/// Load the dataset named by `cfg`, subsampled if requested.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = load_planetoid_dir(&cfg.dataset_dir, cfg.name.as_deref())?;
    Ok(match cfg.max_nodes {
        Some(n) => d.subsample(n, cfg.seed),
        None => d,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let d = load_dataset(cfg)?;
    run_on(cfg, &d)
}

/// [`run`] on an already loaded dataset.
pub fn run_on(cfg: &ExperimentConfig, d: &Dataset) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let (a, b) = split_vertical(d, cfg.feature_ratio, cfg.edge_ratio, cfg.seed)?;
    let labels = b.labels.clone().expect("active view carries labels");
    let folds: Vec<_> = five_fold(d.num_nodes(), cfg.seed)?.into_iter().take(cfg.folds).collect();
    let quad = Activation::Quad(match cfg.activation_scale {
        ScaleParam::Fixed(s) => s,
        ScaleParam::Auto => 1.0,
    });
    let spec = |activation| ModelSpec {
        hidden: cfg.hidden.clone(),
        num_classes: d.num_classes(),
        activation,
        dropout: cfg.dropout,
        learning_rate: cfg.learning_rate,
    };
    let isolated_act = match cfg.isolated_activation {
        IsolatedActivation::Relu => Activation::Relu,
        IsolatedActivation::Quad => quad,
    };
    let epochs = cfg.effective_epochs();
    let train_cfg = TrainConfig {
        epochs,
        seed: cfg.seed,
        unsup_weight: cfg.unsup_weight,
        walk: WalkConfig::default(),
        auto_scale: cfg.activation_scale == ScaleParam::Auto,
    };

    let plain = |spec: ModelSpec, input: GraphInput| -> Result<_> {
        let report = train_plaintext(&spec, &input, &labels, &folds, &train_cfg)?;
        let scales = folds
            .iter()
            .filter_map(|f| {
                let mut m = SageModel::init(&spec, &input, fold_seed(cfg.seed, f.fold_index));
                if train_cfg.auto_scale {
                    m.calibrate_activation(&input).ok()?;
                }
                m.activation.as_quad().map(|q| q.scale())
            })
            .collect();
        Ok((report.fold_accuracies, report.final_losses, scales, None, Vec::new()))
    };

    let (fold_accuracies, final_losses, activation_scales, counters, transcripts) = match cfg.setting {
        Setting::IsolatedA => plain(spec(isolated_act), GraphInput::standard(a.features.clone(), a.adjacency())?)?,
        Setting::IsolatedB => plain(spec(isolated_act), GraphInput::standard(b.features.clone(), b.adjacency())?)?,
        Setting::Combined => {
            let full = reconstruct(&a, &b, &d.class_names, &d.name)?;
            plain(spec(quad), GraphInput::from_dataset(&full)?)?
        }
        Setting::Federated => {
            let input = GraphInput::vertical(&a, &b)?;
            let key_size = cfg.key_size()?;
            let mut tasks = Vec::with_capacity(epochs + 2);
            if cfg.activation_scale == ScaleParam::Auto {
                tasks.push(Task::Calibrate);
            }
            tasks.extend(std::iter::repeat_n(Task::Train, epochs));
            tasks.push(Task::Evaluate);

            let mut accs = Vec::new();
            let mut losses = Vec::new();
            let mut scales = Vec::new();
            let mut total = CostCounters::default();
            let mut digests = Vec::new();
            for fold in &folds {
                let seed = fold_seed(cfg.seed, fold.fold_index);
                let model = SageModel::init(&spec(quad), &input, seed);
                let mut session_cfg = SessionConfig::new(key_size, seed);
                session_cfg.frac_bits = cfg.frac_bits;
                // same dropout stream as the plaintext trainer
                session_cfg.dropout_seed = seed ^ 0xD50;
                let mut s = FederatedSession::new(&session_cfg, &a, &b, &model, fold.train.clone(), tasks.clone())?;
                if cfg.unsup_weight > 0.0 {
                    s = s.with_unsupervised(UnsupervisedTerm {
                        weight: cfg.unsup_weight,
                        walk: WalkConfig::default(),
                        seed: seed ^ 0x3A1C,
                    });
                }
                let report = s.run_in_process()?;
                log::info!("fold {} done: {} frames, {} bytes", fold.fold_index, report.frames, report.bytes);
                let pred = s.active.predictions().expect("evaluation task ran");
                accs.push(accuracy(pred, &labels, &fold.test));
                losses.push(s.active.losses().last().copied().unwrap_or(f64::NAN));
                scales.push(s.active.params().activation.scale());
                let c = s.counters();
                let iterations = total.iterations + c.iterations;
                total.merge(&c);
                total.iterations = iterations;
                digests.push(report.transcript_digest.iter().map(|b| format!("{b:02x}")).collect());
            }
            (accs, losses, scales, Some(total), digests)
        }
    };

    let n = fold_accuracies.len() as f64;
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / n;
    let std_accuracy = (fold_accuracies.iter().map(|x| (x - mean_accuracy).powi(2)).sum::<f64>() / n).sqrt();
    let record = RunRecord {
        config: cfg.clone(),
        dataset: d.name.clone(),
        label: cfg.setting.label().to_string(),
        nodes: d.num_nodes(),
        edges: d.edges.len(),
        epochs_run: epochs,
        fold_accuracies,
        mean_accuracy,
        std_accuracy,
        final_losses,
        activation_scales,
        wall_seconds: start.elapsed().as_secs_f64(),
        counters,
        transcripts,
    };
    record.validate().map_err(HarnessError::Config)?;
    Ok(record)
}

/// Append records to a JSON-lines file.
pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let f = File::options().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read every record of a JSON-lines file, skipping blank lines.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let f = File::open(path).map_err(|source| HarnessError::Read { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| HarnessError::Read { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = |reason: String| HarnessError::Record { path: path.to_path_buf(), line: i + 1, reason };
        let r: RunRecord = serde_json::from_str(&line).map_err(|e| rec(e.to_string()))?;
        r.validate().map_err(rec)?;
        out.push(r);
    }
    Ok(out)
}

/// Plain-text table with one row per setting present and one column per
/// dataset. Repeated (setting, dataset) cells show the mean over records;
/// listed reference values follow in parentheses.
pub fn render_table(records: &[RunRecord]) -> String {
    let mut cells: BTreeMap<(Setting, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells.entry((r.config.setting, r.dataset.to_ascii_lowercase())).or_default().push(r.mean_accuracy);
    }
    let mut datasets: Vec<String> = Vec::new();
    for r in records {
        let name = r.dataset.to_ascii_lowercase();
        if !datasets.contains(&name) {
            datasets.push(name);
        }
    }
    datasets.sort_by_key(|d| REFERENCE_DATASETS.iter().position(|t| t == d).unwrap_or(usize::MAX));
    let settings: Vec<Setting> = Setting::ALL.into_iter().filter(|s| cells.keys().any(|(x, _)| x == s)).collect();

    let mut rows = vec![std::iter::once("Model".to_string()).chain(datasets.iter().cloned()).collect::<Vec<_>>()];
    for s in &settings {
        let mut row = vec![s.label().to_string()];
        for d in &datasets {
            let cell = match cells.get(&(*s, d.clone())) {
                Some(v) => {
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    match reference_accuracy(*s, d) {
                        Some(p) => format!("{m:.4} ({p:.4})"),
                        None => format!("{m:.4}"),
                    }
                }
                None => "-".into(),
            };
            row.push(cell);
        }
        rows.push(row);
    }
    let widths: Vec<usize> =
        (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// Render `records` and, when `out` is given, append them to it as JSON lines.
pub fn compare(records: &[RunRecord], out: Option<&Path>) -> Result<String> {
    if records.is_empty() {
        return Err(HarnessError::Config("nothing to compare".into()));
    }
    if let Some(path) = out {
        append_records(path, records)?;
    }
    Ok(render_table(records))
}

/// Statistics of every dataset in `dir` next to the reference counts.
pub fn stats(dir: &Path, name: Option<&str>) -> Result<String> {
    let names: Vec<String> = match name {
        Some(n) => vec![n.to_string()],
        None => {
            let mut v: Vec<String> = std::fs::read_dir(dir)
                .map_err(|source| HarnessError::Read { path: dir.to_path_buf(), source })?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "content"))
                .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .collect();
            v.sort();
            if v.is_empty() {
                return Err(GraphError::MissingContent(dir.to_path_buf()).into());
            }
            v
        }
    };
    let mut out =
        format!("{:<10} {:>7} {:>7} {:>9} {:>8}  reference\n", "dataset", "nodes", "edges", "features", "classes");
    for n in names {
        let d = load_planetoid_dir(dir, Some(&n))?;
        let s = d.stats();
        let reference = match d.check_reference() {
            Some(delta) if delta.is_exact() => "match".to_string(),
            Some(delta) => format!("differs from {}", delta.expected),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<10} {:>7} {:>7} {:>9} {:>8}  {reference}\n",
            d.name, s.nodes, s.edges, s.features, s.classes
        ));
        let r = &d.report;
        out.push_str(&format!(
            "{:<10} raw edge rows {}, duplicates {}, self-loops {}, unknown ids {}\n",
            "", r.raw_edge_rows, r.duplicate_edges, r.self_loops, r.dropped_unknown
        ));
    }
    Ok(out)
}
