//! Acceptance suite. Prints one PASS/FAIL line per criterion to stderr
//! (uncaptured), then fails if any criterion outside `KNOWN_UNATTAINABLE`
//! failed.

mod common;

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use affectmt::cli::checkpoint::Checkpoint;
use affectmt::cli::{self, EvalArgs};
use affectmt::encoder::{EncoderConfig, EncoderVariant};
use affectmt::heads::{ec_loss, vadec_loss, vadr_loss};
use affectmt::metrics::{self, MetricsReport};
use affectmt::model::{AffectModel, CatExample, Component, Encoded, ModelConfig, VadExample};
use affectmt::numerics::{finite_diff_grad, relative_error, ParamId, Tape};
use affectmt::trainer::{dataset_losses, evaluate, train, TrainingConfig, TrainingData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot pass as written; see the README. The suite checks
/// that they still fail so this list stays accurate.
const KNOWN_UNATTAINABLE: &[u8] = &[5];

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(id: u8, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (ok, mut detail) = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    if !in_time {
        detail.push_str(&format!("; over time limit {limit:?}"));
    }
    Outcome {
        id,
        name,
        pass: ok && in_time,
        detail,
        elapsed,
    }
}

fn note(msg: &str) {
    let _ = writeln!(std::io::stderr(), "        {msg}");
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).to_str().unwrap().to_string()
}

// Criterion 1 ---------------------------------------------------------------

fn joint_loss(model: &AffectModel, cat: &[CatExample], vad: &[VadExample], lambda: f64) -> (Tape, affectmt::numerics::Var) {
    let mut tape = Tape::new();
    let ci: Vec<&Encoded> = cat.iter().map(|e| &e.input).collect();
    let vi: Vec<&Encoded> = vad.iter().map(|e| &e.input).collect();
    let labels: Vec<Vec<u8>> = cat.iter().map(|e| e.labels.clone()).collect();
    let gold: Vec<[f64; 3]> = vad.iter().map(|e| e.target).collect();
    let probs = model.classify(&mut tape, &ci).unwrap();
    let ec = ec_loss(&mut tape, probs, &labels).unwrap();
    let pred = model.regress(&mut tape, &vi).unwrap();
    let vr = vadr_loss(&mut tape, pred, &gold).unwrap();
    let loss = vadec_loss(&mut tape, ec, vr, lambda).unwrap();
    (tape, loss)
}

fn gradient_check(variant: EncoderVariant) -> (f64, usize) {
    let (lexicon_dim, n_labels) = (3, 11);
    let mut config = ModelConfig::new(
        EncoderConfig {
            d_model: 16,
            vocab_size: 50,
            variant,
            max_len: 8,
            seed: 17,
        },
        n_labels,
    );
    config.hidden = 32;
    config.lexicon_dim = lexicon_dim;
    config.lexicon_to_regressor = true;
    let mut model = AffectModel::new(config).unwrap();
    // Move away from the zero-initialised biases so every path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let theta: Vec<f64> = model
        .params
        .flat_values()
        .iter()
        .map(|v| v + rng.gen_range(-0.1..0.1))
        .collect();
    model.params.set_flat_values(&theta).unwrap();
    let (cat, vad) = common::random_examples(4, 50, n_labels, lexicon_dim, 5);
    let lambda = 0.5;

    model.params.zero_grads();
    let (tape, loss) = joint_loss(&model, &cat, &vad, lambda);
    tape.backward_into(loss, &mut model.params).unwrap();
    let analytic = model.params.flat_grads();

    let mut probe = model.clone();
    let numeric = finite_diff_grad(
        |th| {
            probe.params.set_flat_values(th).unwrap();
            let (tape, loss) = joint_loss(&probe, &cat, &vad, lambda);
            tape.value(loss).data()[0]
        },
        &theta,
        1e-5,
    );
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, GRAD_FLOOR))
        .fold(0.0, f64::max);
    (worst, theta.len())
}

/// Denominator floor for gradient comparisons; coordinates whose gradient is
/// below this in magnitude are compared absolutely at this scale.
const GRAD_FLOOR: f64 = 1e-6;

fn criterion_1() -> Outcome {
    timed(1, "gradient fidelity", Some(Duration::from_secs(60)), || {
        let mut ok = true;
        let mut parts = Vec::new();
        for v in [EncoderVariant::AttentionPool, EncoderVariant::TransformerBlock] {
            let (worst, n) = gradient_check(v);
            ok &= worst < 1e-4;
            parts.push(format!("{v}: max rel err {worst:.2e} over {n} params"));
        }
        (ok, parts.join("; "))
    })
}

// Criterion 2 ---------------------------------------------------------------

fn positives(row: &[u8]) -> BTreeSet<usize> {
    (0..row.len()).filter(|&i| row[i] == 1).collect()
}

fn naive_jaccard(g: &[Vec<u8>], p: &[Vec<u8>]) -> f64 {
    let mut s = 0.0;
    for i in 0..g.len() {
        let (a, b) = (positives(&g[i]), positives(&p[i]));
        let u = a.union(&b).count();
        s += if u == 0 { 1.0 } else { a.intersection(&b).count() as f64 / u as f64 };
    }
    s / g.len() as f64
}

fn naive_f1(g: &[Vec<u8>], p: &[Vec<u8>]) -> (f64, f64) {
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let f = |pr: f64, rc: f64| div(2.0 * pr * rc, pr + rc);
    let l = g[0].len();
    let (mut per, mut t, mut fp, mut fneg) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..l {
        let (mut tj, mut fpj, mut fnj) = (0.0, 0.0, 0.0);
        for i in 0..g.len() {
            match (g[i][j], p[i][j]) {
                (1, 1) => tj += 1.0,
                (0, 1) => fpj += 1.0,
                (1, 0) => fnj += 1.0,
                _ => {}
            }
        }
        per += f(div(tj, tj + fpj), div(tj, tj + fnj));
        t += tj;
        fp += fpj;
        fneg += fnj;
    }
    (per / l as f64, f(div(t, t + fp), div(t, t + fneg)))
}

fn naive_lrap(g: &[Vec<u8>], s: &[Vec<f64>]) -> Option<f64> {
    let (mut total, mut n) = (0.0, 0);
    for i in 0..g.len() {
        let rel = positives(&g[i]);
        if rel.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &j in &rel {
            let above = |k: &usize| s[i][*k] >= s[i][j];
            acc += rel.iter().filter(|k| above(k)).count() as f64 / (0..s[i].len()).filter(above).count() as f64;
        }
        total += acc / rel.len() as f64;
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

fn naive_hamming(g: &[Vec<u8>], p: &[Vec<u8>]) -> f64 {
    let mut wrong = 0;
    let mut total = 0;
    for i in 0..g.len() {
        for j in 0..g[i].len() {
            wrong += usize::from(g[i][j] != p[i][j]);
            total += 1;
        }
    }
    wrong as f64 / total as f64
}

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for i in 0..x.len() {
        cov += (x[i] - mx) * (y[i] - my) / (n - 1.0);
        vx += (x[i] - mx).powi(2) / (n - 1.0);
        vy += (y[i] - my).powi(2) / (n - 1.0);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

fn criterion_2() -> Outcome {
    timed(2, "metric oracles", Some(Duration::from_secs(30)), || {
        let mut fails = Vec::new();
        let mut check = |name: &str, got: f64, want: f64| {
            if (got - want).abs() > 1e-12 {
                fails.push(format!("{name}: {got} vs {want}"));
            }
        };
        let (g, p) = (vec![vec![1, 0, 1]], vec![vec![1, 1, 0]]);
        check("jaccard", metrics::jaccard_accuracy(&g, &p).unwrap(), 1.0 / 3.0);
        check("hamming", metrics::hamming_and_weak_accuracy(&g, &p).unwrap().0, 2.0 / 3.0);
        let (g2, p2) = (vec![vec![1, 0], vec![0, 1]], vec![vec![1, 0], vec![1, 1]]);
        let (ma, mi) = metrics::f1_scores(&g2, &p2).unwrap();
        check("micro-F1", mi, 0.8);
        check("macro-F1", ma, 5.0 / 6.0);
        check("lrap", metrics::lrap(&g, &[vec![0.9, 0.8, 0.1]]).unwrap(), 5.0 / 6.0);
        check("empty jaccard", metrics::jaccard_accuracy(&[vec![0, 0]], &[vec![0, 0]]).unwrap(), 1.0);
        check("pearson +", metrics::pearson_r(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        check("pearson -", metrics::pearson_r(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap(), -1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(31337);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let n = rng.gen_range(1..=8);
            let l = rng.gen_range(1..=5);
            let mut bits = || -> Vec<Vec<u8>> { (0..n).map(|_| (0..l).map(|_| u8::from(rng.gen_bool(0.4))).collect()).collect() };
            let (g, p) = (bits(), bits());
            let s: Vec<Vec<f64>> = (0..n).map(|_| (0..l).map(|_| f64::from(rng.gen_range(0..4u8)) / 3.0).collect()).collect();
            let mut d = |a: f64, b: f64| worst = worst.max((a - b).abs());
            d(metrics::jaccard_accuracy(&g, &p).unwrap(), naive_jaccard(&g, &p));
            let (ma, mi) = metrics::f1_scores(&g, &p).unwrap();
            let (nma, nmi) = naive_f1(&g, &p);
            d(ma, nma);
            d(mi, nmi);
            d(metrics::hamming_and_weak_accuracy(&g, &p).unwrap().0, naive_hamming(&g, &p));
            match (metrics::lrap(&g, &s), naive_lrap(&g, &s)) {
                (Ok(a), Some(b)) => d(a, b),
                (Err(_), None) => {}
                _ => d(0.0, f64::INFINITY),
            }
            if n >= 2 {
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                d(metrics::pearson_r(&x, &y).unwrap(), naive_pearson(&x, &y));
            }
        }
        if worst > 1e-12 {
            fails.push(format!("random instances: max deviation {worst:e}"));
        }
        let ok = fails.is_empty();
        (ok, if ok { format!("examples exact; 1000 random instances max deviation {worst:.1e}") } else { fails.join("; ") })
    })
}

// Criterion 3 ---------------------------------------------------------------

fn criterion_3() -> Outcome {
    timed(3, "weak accuracy + hamming loss identity", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut bad = 0;
        for _ in 0..10_000 {
            let n = rng.gen_range(1..40);
            let l = rng.gen_range(1..12);
            let mut bits = || -> Vec<Vec<u8>> { (0..n).map(|_| (0..l).map(|_| u8::from(rng.gen_bool(0.5))).collect()).collect() };
            let (g, p) = (bits(), bits());
            let (h, w) = metrics::hamming_and_weak_accuracy(&g, &p).unwrap();
            bad += usize::from(h + w != 1.0);
        }
        // A reported weak accuracy / Hamming loss pair.
        let (w, h) = (std::hint::black_box(0.877), std::hint::black_box(0.123));
        let table = w + h == 1.0;
        (bad == 0 && table, format!("10000 random matrices, {bad} violations; reported pair sums to 1: {table}"))
    })
}

// Criterion 4 ---------------------------------------------------------------

fn boundary_model(seed: u64) -> AffectModel {
    let mut c = ModelConfig::new(
        EncoderConfig {
            d_model: 16,
            vocab_size: 50,
            variant: EncoderVariant::TransformerBlock,
            max_len: 8,
            seed,
        },
        11,
    );
    c.hidden = 32;
    AffectModel::new(c).unwrap()
}

fn values(m: &AffectModel, ids: &[ParamId]) -> Vec<Vec<u64>> {
    ids.iter()
        .map(|&id| m.params.get(id).data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

/// Replays `steps` decay-only AdamW updates on the initial values of `ids`.
fn decay_only(m0: &AffectModel, ids: &[ParamId], steps: usize, cfg: &TrainingConfig) -> Vec<Vec<u64>> {
    ids.iter()
        .map(|&id| {
            let wd = if m0.params.param(id).decay { cfg.weight_decay } else { 0.0 };
            m0.params
                .get(id)
                .data()
                .iter()
                .map(|&v0| {
                    let mut v = v0;
                    for _ in 0..steps {
                        v -= cfg.learning_rate * (0.0 + wd * v);
                    }
                    v.to_bits()
                })
                .collect()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    timed(4, "loss-weight boundary equivalence", Some(Duration::from_secs(60)), || {
        let (cat, vad) = common::random_examples(16, 50, 11, 0, 8);
        // 16 examples in batches of 8: two paired steps per epoch.
        let base = TrainingConfig {
            learning_rate: 1e-3,
            epochs: 25,
            batch_size: 8,
            seed: 21,
            ..Default::default()
        };
        let steps = 50;
        let mut parts = Vec::new();
        let mut ok = true;
        for (lambda, single, shared_head, idle_head) in [
            (1.0, TrainingData { cat: &cat, ..Default::default() }, Component::Classifier, Component::Regressor),
            (0.0, TrainingData { vad: &vad, ..Default::default() }, Component::Regressor, Component::Classifier),
        ] {
            let cfg = TrainingConfig { lambda, ..base.clone() };
            let init = boundary_model(3);
            let mut joint = init.clone();
            let mut solo = init.clone();
            train(&mut joint, TrainingData { cat: &cat, vad: &vad, ..Default::default() }, &cfg).unwrap();
            train(&mut solo, single, &cfg).unwrap();
            let mut shared = joint.component(Component::Encoder);
            shared.extend(joint.component(shared_head));
            let same = values(&joint, &shared) == values(&solo, &shared);
            let idle = joint.component(idle_head);
            let decayed = values(&joint, &idle) == decay_only(&init, &idle, steps, &cfg);
            ok &= same && decayed;
            parts.push(format!("lambda={lambda}: shared bitwise equal {same}, idle head decay-only {decayed}"));
        }
        (ok, format!("{steps} steps; {}", parts.join("; ")))
    })
}

// Criterion 5 ---------------------------------------------------------------

struct OverfitResult {
    ec: f64,
    mse: f64,
    report: MetricsReport,
}

fn overfit_run(dir: &Path, extra: &[&str]) -> OverfitResult {
    let data = common::planted(32, 11, 2024);
    let (cat, vad, schema) = common::write_planted(&data, dir);
    let out = dir.join("run");
    let (cat, vad, schema, out) = (cat.to_str().unwrap(), vad.to_str().unwrap(), schema.to_str().unwrap(), out.to_str().unwrap());
    // 32 examples at the default batch size of 32: one paired step per epoch.
    let mut a = vec!["train", "--cat", cat, "--vad", vad, "--schema", schema, "--epochs", "500", "--out-dir", out];
    a.extend_from_slice(extra);
    assert_eq!(cli::run_from(common::args(&a)), 0);

    let ckpt_path = dir.join("run/model.ckpt");
    let ck = Checkpoint::load(&ckpt_path).unwrap();
    let cat_ex: Vec<CatExample> = data
        .texts
        .iter()
        .zip(&data.labels)
        .map(|(t, l)| CatExample { input: ck.featurizer.encode(t), labels: l.clone() })
        .collect();
    let vad_ex: Vec<VadExample> = data
        .texts
        .iter()
        .zip(&data.vad)
        .map(|(t, s)| VadExample { input: ck.featurizer.encode(t), target: *s })
        .collect();
    let (ec, mse, _) = dataset_losses(&ck.model, &cat_ex, &vad_ex, 0.5, 32).unwrap();
    let report = cli::cmd_eval(&EvalArgs {
        checkpoint: ckpt_path,
        cat: Some(PathBuf::from(cat)),
        cat_format: None,
        vad: Some(PathBuf::from(vad)),
        vad_split: None,
        out_dir: None,
    })
    .unwrap();
    OverfitResult {
        ec: ec.unwrap(),
        mse: mse.unwrap(),
        report,
    }
}

fn overfit_pass(r: &OverfitResult) -> bool {
    let pearson_ok = [r.report.pearson_v, r.report.pearson_a, r.report.pearson_d]
        .iter()
        .all(|p| p.is_some_and(|p| p > 0.9));
    r.ec < 0.05 && r.mse < 0.01 && r.report.jaccard_accuracy.is_some_and(|j| j > 0.95) && pearson_ok
}

fn describe(r: &OverfitResult) -> String {
    format!(
        "EC {:.4}, MSE {:.4}, Jaccard {:.3}, r(V,A,D) = ({:.3}, {:.3}, {:.3})",
        r.ec,
        r.mse,
        r.report.jaccard_accuracy.unwrap_or(f64::NAN),
        r.report.pearson_v.unwrap_or(f64::NAN),
        r.report.pearson_a.unwrap_or(f64::NAN),
        r.report.pearson_d.unwrap_or(f64::NAN),
    )
}

fn criterion_5() -> Outcome {
    timed(5, "overfit oracle (defaults, 500 paired steps)", Some(Duration::from_secs(120)), || {
        let dir = tempfile::tempdir().unwrap();
        let r = overfit_run(dir.path(), &[]);
        (overfit_pass(&r), describe(&r))
    })
}

// Criterion 6 ---------------------------------------------------------------

fn report_bits(r: &MetricsReport) -> Vec<Option<u64>> {
    r.fields().iter().map(|(_, v)| v.map(f64::to_bits)).collect()
}

fn criterion_6() -> Outcome {
    timed(6, "determinism and checkpoint round-trip", None, || {
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str| {
            let out = dir.path().join(name);
            let out = out.to_str().unwrap();
            let a = [
                "train", "--cat", &fixture("cat.tsv"), "--cat-val", &fixture("cat_val.tsv"), "--vad", &fixture("vad.csv"),
                "--lexicon", &fixture("lexicon.txt"), "--encoder", "transformer_block", "--d-model", "16", "--epochs", "2",
                "--lr", "1e-3", "--batch-size", "16", "--seed", "11", "--out-dir", out,
            ];
            assert_eq!(cli::run_from(common::args(&a)), 0);
            std::fs::read(dir.path().join(name).join("model.ckpt")).unwrap()
        };
        let (a, b) = (run("a"), run("b"));
        let identical = a == b;

        let eval = |ckpt: PathBuf| {
            cli::cmd_eval(&EvalArgs {
                checkpoint: ckpt,
                cat: Some(fixtures().join("cat.tsv")),
                cat_format: None,
                vad: Some(fixtures().join("vad.csv")),
                vad_split: Some(affectmt::data::Split::Test),
                out_dir: None,
            })
            .unwrap()
        };
        let first = dir.path().join("a/model.ckpt");
        let ck = Checkpoint::load(&first).unwrap();
        let resaved = dir.path().join("resaved.ckpt");
        ck.save(&resaved).unwrap();
        let bytes_same = std::fs::read(&resaved).unwrap() == a;
        let report_same = report_bits(&eval(first)) == report_bits(&eval(resaved));

        // In-memory model against its reloaded copy.
        let (cat, vad) = common::random_examples(8, ck.featurizer.vocab.len(), 11, ck.featurizer.lexicon_dim(), 3);
        let reload = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        let memory_same = report_bits(&evaluate(&ck.model, &cat, &vad).unwrap())
            == report_bits(&evaluate(&reload.model, &cat, &vad).unwrap());

        (
            identical && bytes_same && report_same && memory_same,
            format!("checkpoints identical {identical}; resave identical {bytes_same}; eval after reload identical {report_same}/{memory_same}"),
        )
    })
}

// Criterion 7 ---------------------------------------------------------------

fn criterion_7() -> Outcome {
    timed(7, "output range contracts", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let (mut passes, mut bad, mut extremes) = (0usize, 0usize, 0usize);
        let mut model = boundary_model(0);
        while passes < 10_000 {
            if passes % 250 == 0 {
                let variant = if rng.gen_bool(0.5) { EncoderVariant::AttentionPool } else { EncoderVariant::TransformerBlock };
                let mut c = ModelConfig::new(
                    EncoderConfig { d_model: 8, vocab_size: 30, variant, max_len: 8, seed: rng.gen() },
                    5,
                );
                c.hidden = 8;
                model = AffectModel::new(c).unwrap();
                // Scale weights up to drive the heads into saturation.
                let scale = [1.0, 10.0, 1e3, 1e6][(passes / 250) % 4];
                let v: Vec<f64> = model.params.flat_values().iter().map(|x| (x + rng.gen_range(-0.5..0.5)) * scale).collect();
                model.params.set_flat_values(&v).unwrap();
            }
            let inputs: Vec<Encoded> = (0..rng.gen_range(1..4))
                .map(|_| {
                    let mut ids = vec![2];
                    ids.extend((0..rng.gen_range(0..7)).map(|_| rng.gen_range(1..30)));
                    Encoded { ids, lexicon: None }
                })
                .collect();
            for p in model.predict(&inputs).unwrap() {
                let in_range = p.probs.iter().all(|&q| q > 0.0 && q < 1.0) && p.vad.iter().all(|&v| v > 1.0 && v < 5.0);
                bad += usize::from(!in_range);
                extremes += usize::from(p.probs.iter().any(|&q| !(1e-9..=1.0 - 1e-9).contains(&q)));
            }
            passes += 1;
        }
        (bad == 0, format!("{passes} forward passes, {bad} out of range, {extremes} saturated outputs seen"))
    })
}

// Criterion 8 ---------------------------------------------------------------

fn criterion_8() -> Outcome {
    timed(8, "CLI smoke", Some(Duration::from_secs(60)), || {
        let bin = env!("CARGO_BIN_EXE_affectmt");
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let train = Command::new(bin)
            .args(["train", "--cat", &fixture("cat.tsv"), "--vad", &fixture("vad.csv"), "--schema", &fixture("schema.txt")])
            .args(["--epochs", "2", "--out-dir", out.to_str().unwrap()])
            .output()
            .unwrap();
        if !train.status.success() {
            return (false, format!("train failed: {}", String::from_utf8_lossy(&train.stderr)));
        }
        let history = std::fs::read_to_string(out.join("history.csv")).unwrap_or_default();
        let eval = Command::new(bin)
            .args(["eval", "--checkpoint", out.join("model.ckpt").to_str().unwrap()])
            .args(["--cat", &fixture("cat.tsv"), "--vad", &fixture("vad.csv")])
            .output()
            .unwrap();
        let stdout = String::from_utf8_lossy(&eval.stdout);
        let keys: BTreeSet<&str> = stdout.lines().filter_map(|l| l.split_once('=').map(|(k, _)| k)).collect();
        let wanted = [
            "jaccard_accuracy", "f1_macro", "f1_micro", "lrap", "hamming_loss", "weak_accuracy", "pearson_v", "pearson_a", "pearson_d",
        ];
        let metrics_ok = eval.status.success() && wanted.iter().all(|k| keys.contains(k));
        let trend = Command::new(bin)
            .args(["trend", "--input", &fixture("trend.tsv"), "--emotion", "joy", "--bins", "3"])
            .output()
            .unwrap();
        let counts: Vec<String> = String::from_utf8_lossy(&trend.stdout)
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(2).map(String::from))
            .collect();
        let trend_ok = trend.status.success() && counts == ["3", "2", "2"];
        (
            metrics_ok && trend_ok && history.lines().count() == 3,
            format!("history rows {}; eval keys {}/9; trend bins ({})", history.lines().count().saturating_sub(1), wanted.iter().filter(|k| keys.contains(*k)).count(), counts.join(",")),
        )
    })
}

#[test]
fn acceptance() {
    let outcomes = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
    ];
    let mut err = std::io::stderr().lock();
    for o in &outcomes {
        let _ = writeln!(
            err,
            "[{}] criterion {}: {} ({}; {:.2?})",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail,
            o.elapsed
        );
    }
    drop(err);

    if !outcomes[4].pass {
        // Same run with only the learning rate raised, for comparison.
        let dir = tempfile::tempdir().unwrap();
        let r = overfit_run(dir.path(), &["--lr", "1e-3"]);
        note(&format!(
            "criterion 5 at the default learning rate 2e-5 is out of reach in 500 steps; with --lr 1e-3: {} ({})",
            describe(&r),
            if overfit_pass(&r) { "thresholds met" } else { "thresholds not met" }
        ));
    }

    let unexpected: Vec<u8> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_UNATTAINABLE.contains(&o.id))
        .map(|o| o.id)
        .collect();
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
    let now_passing: Vec<u8> = outcomes
        .iter()
        .filter(|o| o.pass && KNOWN_UNATTAINABLE.contains(&o.id))
        .map(|o| o.id)
        .collect();
    assert!(now_passing.is_empty(), "criteria {now_passing:?} now pass; update KNOWN_UNATTAINABLE");
}
