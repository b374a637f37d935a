//! Acceptance criteria, one verdict line each.
//!
//! Criteria 6 and 7 need the Cora, Pubmed and Citeseer files under
//! `$FEDVGCN_DATA_DIR` (either `<dir>/<name>/<name>.content` or
//! `<dir>/<name>.content`). Without them they print FAIL with the reason and
//! are listed as unevaluated; the process exit status covers only criteria
//! that could run.

mod common;

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{grad_case, max_weight_diff, tiny_model, tiny_views};
use fedvgcn::gnn::{train_step, Activation, GraphInput, ModelSpec, SageModel};
use fedvgcn::graph::synthetic::SyntheticConfig;
use fedvgcn::graph::{load_planetoid_dir, reference_stats, Party, VerticalView};
use fedvgcn::harness::{self, ExperimentConfig, RunRecord, Setting};
use fedvgcn::paillier::{keygen, FixedPointCodec, KeySize, DEFAULT_FRAC_BITS};
use fedvgcn::polyact::{least_squares_fit, relu, Interval, QuadActivation};
use fedvgcn::protocol::{FederatedSession, SessionConfig, Task};
use ndarray::array;
use num_bigint::BigInt;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const CRYPTO_CASES: u32 = 1000;
const CRYPTO_BUDGET_512: Duration = Duration::from_secs(60);
const LSQ_TOL: f64 = 1e-6;
/// Grid points of the normal-equations oracle.
const LSQ_GRID: usize = 200_001;
const GRAD_MODELS: u64 = 20;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
/// Denominator floor of the relative gradient error.
const GRAD_FLOOR: f64 = 1e-3;
const EQUIV_GRAPHS: u64 = 5;
const EQUIV_TOL: f64 = 1e-4;
const EQUIV_BUDGET: Duration = Duration::from_secs(300);
const COMBINED_CORA: (f64, f64) = (0.66, 0.76);
const FEDERATED_CORA: (f64, f64) = (0.62, 0.73);
const MAX_COMBINED_GAP: f64 = 0.05;
const PUBMED_FEDERATED_NODES: usize = 3000;

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    /// Could not be evaluated in this environment.
    blocked: bool,
    detail: String,
}

impl Verdict {
    fn check(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, blocked: false, detail: detail.into() }
    }

    fn blocked(detail: impl Into<String>) -> Self {
        Self { pass: false, blocked: true, detail: detail.into() }
    }
}

fn crypto_roundtrips() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    for (bits, test_mode) in [(512, true), (1024, false)] {
        let start = Instant::now();
        let mut rng = ChaCha20Rng::seed_from_u64(bits);
        let (pk, sk) = keygen(KeySize::from_bits(bits, test_mode).unwrap(), &mut rng);
        let codec = FixedPointCodec::for_key(&pk, DEFAULT_FRAC_BITS);
        let rng = RefCell::new(rng);
        let q = |x: f64| (x * 2f64.powi(DEFAULT_FRAC_BITS as i32)).round();
        let mut runner = TestRunner::new_with_rng(
            Config { cases: CRYPTO_CASES, failure_persistence: None, ..Config::default() },
            TestRng::deterministic_rng(RngAlgorithm::ChaCha),
        );
        let result = runner.run(&(-1e6f64..1e6, -1e6f64..1e6, -1e3f64..1e3), |(x, y, w)| {
            let mut r = rng.borrow_mut();
            let mx = codec.encode(x).unwrap();
            let cx = pk.encrypt(&mx, &mut *r).unwrap();
            let cy = pk.encrypt(&codec.encode(y).unwrap(), &mut *r).unwrap();
            let dx = sk.decrypt(&cx).unwrap();
            prop_assert_eq!(&dx, &mx);
            prop_assert_eq!(codec.decode(&dx), q(x) / 2f64.powi(DEFAULT_FRAC_BITS as i32));
            let sum = sk.decrypt(&pk.add_ct(&cx, &cy).unwrap()).unwrap();
            prop_assert_eq!(codec.to_signed(&sum), BigInt::from(q(x) as i64 + q(y) as i64));
            let shifted = sk.decrypt(&pk.add_plain(&cx, &codec.encode(y).unwrap()).unwrap()).unwrap();
            prop_assert_eq!(&shifted, &sum);
            let prod = sk.decrypt(&pk.mul_signed(&cx, &codec.encode_int(w).unwrap()).unwrap()).unwrap();
            prop_assert_eq!(codec.to_signed(&prod), BigInt::from(q(x) as i64) * BigInt::from(q(w) as i64));
            Ok(())
        });
        let took = start.elapsed();
        if let Err(e) = result {
            pass = false;
            notes.push(format!("{bits}-bit: {e}"));
        } else {
            notes.push(format!("{bits}-bit {:.1}s", took.as_secs_f64()));
        }
        if bits == 512 && took > CRYPTO_BUDGET_512 {
            pass = false;
            notes.push(format!("512-bit run exceeded {}s", CRYPTO_BUDGET_512.as_secs()));
        }
    }
    Verdict::check(pass, format!("{CRYPTO_CASES} cases per key size, exact integer comparisons; {}", notes.join(", ")))
}

/// Least-squares quadratic for ReLU from a trapezoid-weighted normal system
/// on a dense grid, solved by Gaussian elimination.
fn grid_oracle(lo: f64, hi: f64, points: usize) -> [f64; 3] {
    let h = (hi - lo) / (points - 1) as f64;
    let mut g = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for i in 0..points {
        let x = lo + h * i as f64;
        let w = if i == 0 || i == points - 1 { h / 2.0 } else { h };
        let basis = [1.0, x, x * x];
        for r in 0..3 {
            rhs[r] += w * basis[r] * x.max(0.0);
            for c in 0..3 {
                g[r][c] += w * basis[r] * basis[c];
            }
        }
    }
    for p in 0..3 {
        for r in p + 1..3 {
            let f = g[r][p] / g[p][p];
            let pivot = g[p];
            for (c, v) in g[r].iter_mut().enumerate().skip(p) {
                *v -= f * pivot[c];
            }
            rhs[r] -= f * rhs[p];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        x[r] = (rhs[r] - (r + 1..3).map(|c| g[r][c] * x[c]).sum::<f64>()) / g[r][r];
    }
    x
}

fn least_squares() -> Verdict {
    let fit = least_squares_fit(relu, 2, Interval::symmetric(1.0).unwrap()).unwrap();
    let fit = fit.as_slice();
    let closed = [3.0 / 32.0, 0.5, 15.0 / 32.0];
    let oracle = grid_oracle(-1.0, 1.0, LSQ_GRID);
    let err_closed = fit.iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let err_oracle = fit.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut literal = true;
    for a in [0.25, 1.0, 2.0, 7.5] {
        let c = QuadActivation::new(a).unwrap().coefficients();
        let expect = [a / (2.0 * std::f64::consts::PI), 0.5, 4.0 / (3.0 * std::f64::consts::PI * a)];
        literal &= c.iter().zip(&expect).all(|(x, y)| (x - y).abs() <= 1e-15 * y.abs());
    }
    let at_one = QuadActivation::new(1.0).unwrap().coefficients();
    Verdict::check(
        err_closed <= LSQ_TOL && err_oracle <= LSQ_TOL && literal,
        format!(
            "fit {fit:.8?}; |fit-(3/32,1/2,15/32)| {err_closed:.1e}, |fit-grid oracle| {err_oracle:.1e} (tol {LSQ_TOL:e}); \
             closed-form activation verbatim: {literal}; at a=1 it is ({:.4}, 0.5, {:.4}), not equated with the fit",
            at_one[0], at_one[2]
        ),
    )
}

fn gradient_fidelity() -> Verdict {
    let worst =
        (0..GRAD_MODELS).map(|s| grad_case(1000 + s).max_relative_error(GRAD_STEP, GRAD_FLOOR)).fold(0.0, f64::max);
    Verdict::check(
        worst <= GRAD_REL_TOL,
        format!("{GRAD_MODELS} models, worst relative error {worst:.2e} (tol {GRAD_REL_TOL:e}, step {GRAD_STEP:e}, floor {GRAD_FLOOR:e})"),
    )
}

fn protocol_equivalence() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut smallest_update = f64::INFINITY;
    for g in 0..EQUIV_GRAPHS {
        let seed = 40 + g;
        let nodes = 6 + g as usize;
        let (a, b) = tiny_views(seed, nodes, 6, 3);
        let input = GraphInput::vertical(&a, &b).unwrap();
        let model = tiny_model(&input, vec![4, 3], 3, if g % 2 == 0 { 0.0 } else { 0.5 }, seed);
        let train: Vec<usize> = (0..nodes).filter(|v| v % 4 != 1).collect();
        let mut cfg = SessionConfig::new(KeySize::Test512, seed);
        cfg.frac_bits = 32;
        cfg.dropout_seed = seed + 7;
        let mut s = FederatedSession::new(&cfg, &a, &b, &model, train.clone(), vec![Task::Train]).unwrap();
        s.run_in_process().unwrap();
        let fed = s.merged_model().unwrap();

        let mut plain = model.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(seed + 7);
        train_step(&mut plain, &input, b.labels.as_ref().unwrap(), &train, &mut rng, None).unwrap();
        smallest_update = smallest_update.min(max_weight_diff(&model, &plain));
        worst = worst.max(max_weight_diff(&fed, &plain));
    }
    let took = start.elapsed();
    Verdict::check(
        worst <= EQUIV_TOL && took <= EQUIV_BUDGET && smallest_update > 10.0 * EQUIV_TOL,
        format!(
            "{EQUIV_GRAPHS} graphs of 6-10 nodes, max |Δw| {worst:.2e} (tol {EQUIV_TOL:e}), smallest update {smallest_update:.2e}, {:.1}s",
            took.as_secs_f64()
        ),
    )
}

fn communication_counts() -> Verdict {
    let (m, layers) = (4u64, 3u64);
    let view = |party, cols: Vec<usize>, labels| VerticalView {
        party,
        node_ids: vec!["v".into()],
        feature_columns: cols,
        features: array![[0.7, -0.4]],
        edges: Vec::new(),
        labels,
        num_classes: 4,
    };
    let a = view(Party::Passive, vec![0, 1], None);
    let b = view(Party::Active, vec![2, 3], Some(vec![2]));
    let input = GraphInput::vertical(&a, &b).unwrap();
    let spec = ModelSpec {
        hidden: vec![4],
        num_classes: 4,
        activation: Activation::Quad(1.0),
        dropout: 0.0,
        learning_rate: 0.1,
    };
    let model = SageModel::init(&spec, &input, 3);
    let mut s =
        FederatedSession::new(&SessionConfig::new(KeySize::Test512, 3), &a, &b, &model, vec![0], vec![Task::Train])
            .unwrap();
    s.run_in_process().unwrap();
    let c = s.counters();
    let forward = c.forward_messages();
    let per_layer: Vec<u64> = c.layers.iter().map(|l| l.backward_messages).collect();
    let total = c.total_messages();
    let forward_expected = 2 * m * (layers - 1);
    let backward_bound = 7 * (m * m + m + 1);
    let total_bound = 10 * layers * m * m;
    Verdict::check(
        forward == forward_expected && per_layer.iter().all(|&b| b <= backward_bound) && total <= total_bound,
        format!(
            "widths 4-4-4, one node: forward {forward} (= {forward_expected}), backward per layer {per_layer:?} (≤ {backward_bound}), \
             total {total} incl. setup and returns (≤ {total_bound})"
        ),
    )
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os("FEDVGCN_DATA_DIR").map(PathBuf::from)
}

fn dataset_dir(root: &Path, name: &str) -> Option<PathBuf> {
    [root.join(name), root.to_path_buf()].into_iter().find(|d| d.join(format!("{name}.content")).exists())
}

fn table1_stats() -> Verdict {
    let Some(root) = data_root() else {
        return Verdict::blocked("FEDVGCN_DATA_DIR is not set; no dataset to check");
    };
    let mut notes = Vec::new();
    let mut pass = true;
    for name in ["cora", "pubmed", "citeseer"] {
        let expected = reference_stats(name).unwrap();
        let Some(dir) = dataset_dir(&root, name) else {
            pass = false;
            notes.push(format!("{name}: files missing under {}", root.display()));
            continue;
        };
        match load_planetoid_dir(&dir, Some(name)) {
            Ok(d) if d.stats() == expected => notes.push(format!("{name}: {}", d.stats())),
            Ok(d) => {
                pass = false;
                notes.push(format!(
                    "{name}: observed {} vs expected {expected} (raw edge rows {})",
                    d.stats(),
                    d.report.raw_edge_rows
                ));
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{name}: {e}"));
            }
        }
    }
    Verdict::check(pass, notes.join("; "))
}

fn table2_runs() -> Verdict {
    let Some(root) = data_root() else {
        return Verdict::blocked("FEDVGCN_DATA_DIR is not set; accuracy runs need the three datasets");
    };
    let mut notes = Vec::new();
    let mut pass = true;
    for name in ["cora", "pubmed", "citeseer"] {
        let Some(dir) = dataset_dir(&root, name) else {
            pass = false;
            notes.push(format!("{name}: files missing"));
            continue;
        };
        let mut acc = std::collections::BTreeMap::new();
        for setting in Setting::ALL {
            let mut cfg = ExperimentConfig::new(&dir, Some(name), setting);
            if name == "pubmed" {
                cfg.max_nodes = Some(PUBMED_FEDERATED_NODES);
            }
            match harness::run(&cfg) {
                Ok(r) => {
                    acc.insert(setting, r.mean_accuracy);
                }
                Err(e) => {
                    pass = false;
                    notes.push(format!("{name}/{setting}: {e}"));
                }
            }
        }
        if acc.len() < 4 {
            continue;
        }
        let (ia, ib, fed, comb) =
            (acc[&Setting::IsolatedA], acc[&Setting::IsolatedB], acc[&Setting::Federated], acc[&Setting::Combined]);
        let ordered = fed > ia && fed > ib && comb - fed <= MAX_COMBINED_GAP;
        let in_range = name != "cora"
            || ((COMBINED_CORA.0..=COMBINED_CORA.1).contains(&comb)
                && (FEDERATED_CORA.0..=FEDERATED_CORA.1).contains(&fed));
        pass &= ordered && in_range;
        notes.push(format!(
            "{name}: A {ia:.4} B {ib:.4} fed {fed:.4} comb {comb:.4} ordered {ordered} ranges {in_range}"
        ));
    }
    Verdict::check(pass, notes.join("; "))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d =
        SyntheticConfig { name: "det".into(), num_nodes: 14, num_classes: 3, feature_dim: 10, ..Default::default() }
            .generate(8);
    fedvgcn::graph::synthetic::write_planetoid(&d, dir.path()).unwrap();
    let mut same = true;
    let mut transcripts = 0;
    for setting in Setting::ALL {
        let cfg = ExperimentConfig {
            epochs: 2,
            folds: 2,
            hidden: vec![3],
            learning_rate: 0.05,
            ..ExperimentConfig::new(dir.path(), Some("det"), setting)
        };
        let runs: Vec<RunRecord> = (0..2).map(|_| harness::run(&cfg).unwrap()).collect();
        same &= runs[0].same_outcome(&runs[1]);
        transcripts += runs[0].transcripts.len();
    }
    Verdict::check(
        same && transcripts > 0,
        format!("four settings run twice: records identical except wall time: {same}; {transcripts} transcript digests compared"),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("crypto correctness", crypto_roundtrips),
        ("least-squares activation fit", least_squares),
        ("gradient fidelity", gradient_fidelity),
        ("protocol/plaintext equivalence", protocol_equivalence),
        ("communication counts", communication_counts),
        ("dataset statistics", table1_stats),
        ("accuracy comparison", table2_runs),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    let mut blocked = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = f();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let note = if v.blocked { " [not evaluated]" } else { "" };
        println!("{tag} {} {name}{note}: {} ({:.1}s)", i + 1, v.detail, start.elapsed().as_secs_f64());
        if v.blocked {
            blocked += 1;
        } else if !v.pass {
            failed += 1;
        }
    }
    let passed = criteria.len() - failed - blocked;
    println!("{passed}/{} passed, {failed} failed, {blocked} not evaluated", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
