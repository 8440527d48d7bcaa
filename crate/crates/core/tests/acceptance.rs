//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails.
//!
//! Set `DAGERC_EMORYNLP` to a featurized EmoryNLP JSONL file (or several,
//! separated by `:`) to enable the predecessor-count check.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dagerc_core::corpus::Corpus;
use dagerc_core::daggraph::{
    build_dag_from_speakers, build_variant_from_speakers, dag_stats, validate_dag, DagVariant, Edge, Relation,
};
use dagerc_core::metrics::{micro_f1_excluding, weighted_f1};
use dagerc_core::model::{forward_layer, loss_and_grad_with, param_count, Ablation, DagErcLayer, Model, ModelConfig};
use dagerc_core::numerics::{grad_check, relative_error, GradCheckOptions, ParamSet, Tape};
use dagerc_core::pipeline::{evaluate, sweep_layers, train_with, variant_table, LinearBaseline, TrainConfig};
use dagerc_core::synth::{split3, xor_corpus, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Criterion = fn() -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(limit: Duration, started: Instant, outcome: Outcome) -> Outcome {
    let took = started.elapsed();
    match outcome {
        Outcome::Pass(d) if took > limit => Outcome::Fail(format!("{d}; took {took:.1?}, limit {limit:?}")),
        Outcome::Pass(d) => Outcome::Pass(format!("{d}; {took:.2?}")),
        other => other,
    }
}

fn edge(source: usize, target: usize, relation: Relation) -> Edge {
    Edge {
        source,
        target,
        relation,
    }
}

fn c1_dag_fixtures() -> Outcome {
    use Relation::{Other, Same};
    let t = Instant::now();
    let abab = build_dag_from_speakers(&["A", "B", "A", "B"], 1).unwrap();
    let want_abab = vec![
        edge(0, 1, Other),
        edge(0, 2, Same),
        edge(1, 2, Other),
        edge(1, 3, Same),
        edge(2, 3, Other),
    ];
    let abc = build_dag_from_speakers(&["A", "B", "C"], 1).unwrap();
    let want_abc = vec![edge(0, 1, Other), edge(0, 2, Other), edge(1, 2, Other)];
    let ok = abab.edges() == want_abab.as_slice() && abc.edges() == want_abc.as_slice() && abc.preds(2).len() == 2;
    within(
        Duration::from_secs(1),
        t,
        check(ok, format!("ABAB: {} edges, ABC: {} edges", abab.edges().len(), abc.edges().len())),
    )
}

fn random_speakers(rng: &mut ChaCha8Rng, n_speakers: usize, len: usize) -> Vec<String> {
    (0..len).map(|_| format!("s{}", rng.gen_range(0..n_speakers))).collect()
}

fn c2_constraint_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..1000 {
        let n_speakers = rng.gen_range(2..=6);
        let len = rng.gen_range(1..=40);
        let omega = rng.gen_range(1..=3);
        let speakers = random_speakers(&mut rng, n_speakers, len);
        let dag = build_dag_from_speakers(&speakers, omega).unwrap();
        if !validate_dag(&dag, &speakers, omega).unwrap().passed() {
            failures += 1;
        }
    }
    within(
        Duration::from_secs(10),
        t,
        check(failures == 0, format!("{failures}/1000 instances violated a constraint")),
    )
}

fn c3_two_speaker_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..200 {
        let len = rng.gen_range(1..=40);
        let start = rng.gen_range(0..2);
        let speakers: Vec<usize> = (0..len).map(|i| (i + start) % 2).collect();
        for omega in 1..=3 {
            let ours = build_variant_from_speakers(&speakers, DagVariant::Ours { omega }).unwrap();
            let common = build_variant_from_speakers(&speakers, DagVariant::Common { kappa: 2 * omega }).unwrap();
            if ours.edge_set() != common.edge_set() {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("{mismatches}/600 (conversation, omega) pairs differ"))
}

fn c4_gradient_exactness() -> Outcome {
    let t = Instant::now();
    let speakers = ["A", "B", "B", "A"];
    let dag = build_dag_from_speakers(&speakers, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let features: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let labels = [0, 2, 1, 2];
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    // Worst failing entries: largest |analytic gradient| and their error at a
    // coarser step, where round-off in the loss no longer dominates.
    let mut failing_grad = 0.0f64;
    let mut coarse_err = 0.0f64;
    for (name, ablation) in Ablation::table_rows() {
        let model = Model::new(ModelConfig {
            d_feat: 6,
            d_h: 8,
            n_layers: 2,
            n_classes: 3,
            dropout: 0.0,
            ablation,
            seed: 4,
        })
        .unwrap();
        let f = |p: &ParamSet| loss_and_grad_with(&model, p, &features, &dag, &labels, None);
        let mut params = model.params().clone();
        let report = grad_check(&mut params, f, &opts).unwrap();
        worst = worst.max(report.max_rel_error);
        let too_few = report
            .params
            .iter()
            .any(|c| c.checked < 32.min(params.value(params.id(&c.name).unwrap()).len()));
        if !report.passed || too_few {
            failed.push(name);
        }
        let (_, analytic) = f(&params).unwrap();
        for c in report.params.iter().filter(|c| !c.passed) {
            let id = params.id(&c.name).unwrap();
            let a = analytic.get(id)[c.worst_index];
            failing_grad = failing_grad.max(a.abs());
            let orig = params.value(id).data()[c.worst_index];
            let h = 1e-3;
            params.value_mut(id).data_mut()[c.worst_index] = orig + h;
            let plus = f(&params).unwrap().0;
            params.value_mut(id).data_mut()[c.worst_index] = orig - h;
            let minus = f(&params).unwrap().0;
            params.value_mut(id).data_mut()[c.worst_index] = orig;
            coarse_err = coarse_err.max(relative_error((plus - minus) / (2.0 * h), a));
        }
    }
    let mut detail = format!("max relative error {worst:.2e} over 4 configurations; failing: {failed:?}");
    if !failed.is_empty() {
        detail += &format!(
            "; worst entries have |grad| <= {failing_grad:.1e} and agree to {coarse_err:.1e} at eps=1e-3"
        );
    }
    within(Duration::from_secs(60), t, check(failed.is_empty(), detail))
}

fn c5_layer_oracle() -> Outcome {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = DagErcLayer::register(&mut params, "layer.0", 2, Ablation::FULL, &mut rng).unwrap();
    let set = |p: &mut ParamSet, name: &str, v: &[f64]| p.set(name, v).unwrap();
    set(&mut params, "layer.0.attn.W", &[0.3, -0.2, 0.5, 0.1]);
    set(&mut params, "layer.0.rel.W0", &[0.5, -0.3, 0.2, 0.4]);
    set(&mut params, "layer.0.rel.W1", &[-0.1, 0.6, 0.7, 0.2]);
    let gru_h: [(&str, &[f64]); 9] = [
        ("W_z", &[0.1, 0.2, -0.3, 0.4]),
        ("U_z", &[0.5, -0.1, 0.2, 0.3]),
        ("b_z", &[0.1, -0.2]),
        ("W_r", &[-0.2, 0.3, 0.4, 0.1]),
        ("U_r", &[0.3, 0.3, -0.5, 0.2]),
        ("b_r", &[0.0, 0.1]),
        ("W_c", &[0.6, -0.4, 0.1, 0.2]),
        ("U_c", &[-0.3, 0.5, 0.4, -0.2]),
        ("b_c", &[0.05, -0.05]),
    ];
    let gru_m: [(&str, &[f64]); 9] = [
        ("W_z", &[-0.2, 0.1, 0.3, 0.2]),
        ("U_z", &[0.1, 0.4, -0.2, 0.1]),
        ("b_z", &[0.0, 0.2]),
        ("W_r", &[0.2, -0.1, 0.1, 0.3]),
        ("U_r", &[-0.4, 0.2, 0.3, 0.1]),
        ("b_r", &[0.1, 0.0]),
        ("W_c", &[0.3, 0.2, -0.5, 0.4]),
        ("U_c", &[0.2, -0.3, 0.1, 0.5]),
        ("b_c", &[-0.1, 0.1]),
    ];
    for (n, v) in gru_h {
        set(&mut params, &format!("layer.0.gru_h.{n}"), v);
    }
    for (n, v) in gru_m {
        set(&mut params, &format!("layer.0.gru_m.{n}"), v);
    }
    let dag = build_dag_from_speakers(&["A", "B", "A"], 1).unwrap();
    let mut tape = Tape::new();
    let prev = [[0.5, -1.0], [0.3, 0.8], [-0.6, 0.2]]
        .iter()
        .map(|h| tape.constant(h.to_vec()).unwrap())
        .collect::<Vec<_>>();
    let out = forward_layer(&mut tape, &params, &layer, &dag, &prev).unwrap();

    // Values from a standalone step-by-step evaluation.
    let alpha: [&[f64]; 3] = [&[], &[1.0], &[0.5889897475502849, 0.411010252449715]];
    let m = [
        [0.0, 0.0],
        [0.5104370938878913, -0.12363357147906523],
        [-0.2827988457279872, 0.2732811716918395],
    ];
    let ht = [
        [0.30963676790912886, -0.06332220698522707],
        [0.05483268226470628, 0.0789793822958194],
        [-0.2749322379721739, 0.04813662453807843],
    ];
    let c = [
        [0.33299694790409007, -0.5670785796190455],
        [0.09403969763803877, 0.3489309154633762],
        [-0.40201650575670633, 0.2856162756335012],
    ];
    let h = [
        [0.6426337158132189, -0.6304007866042726],
        [0.14887237990274504, 0.4279102977591956],
        [-0.6769487437288803, 0.33375290017157966],
    ];
    let mut err = 0.0f64;
    let mut diff = |got: &[f64], want: &[f64]| {
        if got.len() != want.len() {
            err = f64::INFINITY;
        }
        for (a, b) in got.iter().zip(want) {
            err = err.max((a - b).abs());
        }
    };
    for i in 0..3 {
        diff(out.alpha[i].map_or(&[][..], |a| tape.value(a)), alpha[i]);
        diff(tape.value(out.message[i]), &m[i]);
        diff(tape.value(out.nodal[i].unwrap()), &ht[i]);
        diff(tape.value(out.contextual[i].unwrap()), &c[i]);
        diff(tape.value(out.hidden[i]), &h[i]);
    }
    check(err <= 1e-10, format!("max abs error {err:.2e}"))
}

fn c6_causality_and_reach() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = Model::new(ModelConfig {
        d_feat: 8,
        d_h: 16,
        n_layers: 2,
        n_classes: 4,
        dropout: 0.2,
        ablation: Ablation::FULL,
        seed: 6,
    })
    .unwrap();
    let mut leaks = 0;
    for _ in 0..100 {
        let len = rng.gen_range(2..=20);
        let n_speakers = rng.gen_range(2..=4);
        let speakers = random_speakers(&mut rng, n_speakers, len);
        let dag = build_dag_from_speakers(&speakers, rng.gen_range(1..=3)).unwrap();
        let mut feats: Vec<Vec<f64>> = (0..len).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let before = model.forward(&feats, &dag).unwrap().probs;
        let i = rng.gen_range(0..len - 1);
        for f in feats.iter_mut().skip(i + 1) {
            for x in f.iter_mut() {
                *x = rng.gen_range(-5.0..5.0);
            }
        }
        let after = model.forward(&feats, &dag).unwrap().probs;
        if before[..=i] != after[..=i] {
            leaks += 1;
        }
    }

    let n = 64;
    let chain = build_variant_from_speakers(&vec!["A"; n], DagVariant::Sequence).unwrap();
    let one_layer = Model::new(ModelConfig {
        n_layers: 1,
        ..model.config().clone()
    })
    .unwrap();
    let mut feats: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let before = one_layer.forward(&feats, &chain).unwrap();
    for x in feats[0].iter_mut() {
        *x += 1.0;
    }
    let after = one_layer.forward(&feats, &chain).unwrap();
    let delta = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let shift = delta(&before.probs[n - 1], &after.probs[n - 1]);
    // On a chain, P_i of the 64-node run equals P_N of an i-node run.
    let reach = (0..n)
        .rev()
        .find(|&i| before.probs[i] != after.probs[i])
        .map_or(0, |i| i + 1);
    let dh = delta(&before.layers[0].hidden[n - 1], &after.layers[0].hidden[n - 1]);
    check(
        leaks == 0 && shift > 0.0,
        format!(
            "{leaks}/100 trials leaked future features; P_{n} moved by {shift:.2e} after editing utterance 1 \
             (P_N changes up to N={reach}; |dH_{n}| = {dh:.1e})"
        ),
    )
}

fn c7_learning_sanity() -> Outcome {
    let t = Instant::now();
    let synth = SynthConfig::default();
    let corpus = xor_corpus(&synth).unwrap();
    let (train, val, test) = split3(&corpus, 1200, 200).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            d_feat: synth.d_feat,
            n_classes: 2,
            ..ModelConfig::default()
        },
        epochs: 200,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let (model, log) = train_with(&cfg, 0, &train, &val, |_| {}).unwrap();
    let variant = cfg.dag_variant();
    let train_acc = evaluate(&model, &train, variant).unwrap().accuracy;
    let test_acc = evaluate(&model, &test, variant).unwrap().accuracy;
    let floor = LinearBaseline::fit(&train, 50, 0.01, 0).unwrap().accuracy(&test).unwrap();
    within(
        Duration::from_secs(600),
        t,
        check(
            train_acc >= 0.99 && test_acc >= 0.90,
            format!(
                "train acc {train_acc:.4}, test acc {test_acc:.4}, best epoch {}, context-free floor {floor:.4}",
                log.best_epoch
            ),
        ),
    )
}

/// Straightforward recount, independent of the library's confusion matrix.
fn brute_force_f1(preds: &[usize], golds: &[usize], n_classes: usize, excluded: Option<usize>) -> f64 {
    let n = golds.len() as f64;
    let f1 = |tp: f64, fp: f64, fn_: f64| {
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    };
    match excluded {
        None => (0..n_classes)
            .map(|c| {
                let mut tp = 0.0;
                let mut fp = 0.0;
                let mut fn_ = 0.0;
                for k in 0..golds.len() {
                    match (preds[k] == c, golds[k] == c) {
                        (true, true) => tp += 1.0,
                        (true, false) => fp += 1.0,
                        (false, true) => fn_ += 1.0,
                        _ => {}
                    }
                }
                (tp + fn_) / n * f1(tp, fp, fn_)
            })
            .sum(),
        Some(e) => {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fn_ = 0.0;
            for k in 0..golds.len() {
                if preds[k] != e && preds[k] == golds[k] {
                    tp += 1.0;
                } else {
                    if preds[k] != e {
                        fp += 1.0;
                    }
                    if golds[k] != e {
                        fn_ += 1.0;
                    }
                }
            }
            f1(tp, fp, fn_)
        }
    }
}

fn c8_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=7);
        let len = rng.gen_range(1..=60);
        let golds: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
        let preds: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k)).collect();
        let e = rng.gen_range(0..k);
        worst = worst.max((weighted_f1(&preds, &golds, k).unwrap() - brute_force_f1(&preds, &golds, k, None)).abs());
        worst = worst.max((micro_f1_excluding(&preds, &golds, e).unwrap() - brute_force_f1(&preds, &golds, k, Some(e))).abs());
    }
    let worked = weighted_f1(&[0, 0, 1], &[0, 1, 1], 2).unwrap() == 2.0 / 3.0
        && micro_f1_excluding(&[0, 1, 0], &[0, 1, 1], 0).unwrap() == 2.0 / 3.0;
    check(
        worst <= 1e-12 && worked,
        format!("max deviation from brute force {worst:.2e}; worked examples exact: {worked}"),
    )
}

fn c9_param_audit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0;
    for _ in 0..50 {
        let full = ModelConfig {
            d_feat: rng.gen_range(1..=64),
            d_h: rng.gen_range(1..=64),
            n_layers: rng.gen_range(1..=6),
            n_classes: rng.gen_range(2..=8),
            dropout: 0.0,
            ablation: Ablation::FULL,
            seed: 0,
        };
        let off = ModelConfig {
            ablation: Ablation::NO_RELATION_TRANSFORM,
            ..full.clone()
        };
        let (a, b) = (param_count(&full).unwrap().total, param_count(&off).unwrap().total);
        let allocated = Model::new(off.clone()).unwrap().params().n_scalars();
        if a - b != full.n_layers * full.d_h * full.d_h || allocated != b {
            bad += 1;
        }
    }
    check(bad == 0, format!("{bad}/50 configurations off the closed form"))
}

fn c10_layer_sweep() -> Outcome {
    let synth = SynthConfig::default();
    let corpus = xor_corpus(&synth).unwrap();
    let (train, val, test) = split3(&corpus, 1200, 200).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            d_feat: synth.d_feat,
            n_classes: 2,
            ..ModelConfig::default()
        },
        epochs: 3,
        ..TrainConfig::default()
    };
    match sweep_layers(&cfg, &train, &val, &test, &(1..=8).collect::<Vec<_>>()) {
        Ok(rows) => {
            let accs: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}", r.n_layers, r.test_accuracy)).collect();
            check(
                rows.len() == 8 && rows.iter().all(|r| r.is_finite()),
                format!("depth:test-acc {}", accs.join(" ")),
            )
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn c11_emorynlp_preds() -> Outcome {
    let Ok(paths) = std::env::var("DAGERC_EMORYNLP") else {
        return Outcome::Skip("DAGERC_EMORYNLP not set; no EmoryNLP transcripts supplied".into());
    };
    let corpora: Vec<Corpus> = paths.split(':').map(|p| Corpus::load(p, None).unwrap()).collect();
    let expected = [0.92, 1.78, 3.28, 4.50, 2.69, 4.46, 5.65];
    let variants = variant_table(1)
        .into_iter()
        .filter(|v| !matches!(v, DagVariant::SingleLocal { .. }))
        .collect::<Vec<_>>();
    let mut lines = Vec::new();
    let mut ok = true;
    for (v, want) in variants.iter().zip(expected) {
        let dags = corpora
            .iter()
            .flat_map(|c| c.conversations())
            .map(|conv| dagerc_core::daggraph::build_variant(conv, *v).unwrap())
            .collect::<Vec<_>>();
        let got = dag_stats(&dags).unwrap().avg_preds;
        ok &= (got - want).abs() <= 0.05;
        lines.push(format!("{v}={got:.2}/{want:.2}"));
    }
    check(ok, lines.join(" "))
}

fn c12_non_claim() -> Outcome {
    Outcome::Skip(
        "benchmark F1 and accuracy tables need large pretrained features and GPU-scale search; not reproduced".into(),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 12] = [
        ("DAG construction fixtures", c1_dag_fixtures),
        ("constraint property suite", c2_constraint_suite),
        ("two-speaker equivalence", c3_two_speaker_equivalence),
        ("gradient exactness", c4_gradient_exactness),
        ("layer equation oracle", c5_layer_oracle),
        ("causality and reach", c6_causality_and_reach),
        ("learning sanity", c7_learning_sanity),
        ("metric oracle equivalence", c8_metric_oracle),
        ("ablation parameter audit", c9_param_audit),
        ("layer sweep stability", c10_layer_sweep),
        ("EmoryNLP predecessor counts", c11_emorynlp_preds),
        ("benchmark scores", c12_non_claim),
    ];
    let only: Option<Vec<usize>> = std::env::var("DAGERC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| Outcome::Fail(format!("panicked: {:?}", e.downcast_ref::<String>())));
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {id:>2}. {name}: {detail}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
