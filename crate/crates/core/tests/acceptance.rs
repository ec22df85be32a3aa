//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false`. The process fails when a property or
//! determinism criterion fails. The two seeded experiments (blobs and
//! digits) always print their measured margins but only fail the process
//! under `ACCEPTANCE_STRICT=1`.

mod common;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use unvp::cli::commands::{cmd_grid, GridSpec};
use unvp::cli::RunConfig;
use unvp::data::{generate_digit_corpus, split_digit_domains};
use unvp::generalizer::{
    bures_cost, bures_cost_sq, evaluate, preprocess_rows, synthesize_hard_samples, GaussianSummary,
    GeneralizationConfig, Mode, TrainState,
};
use unvp::rng::{stream, Stream};

use common::oracles::{
    block_roundtrip_error, blobs, fd_logdet, joint_loss_gradient_error, pure_matches_standalone, resume_pair,
    run, single_block,
};
use common::{blob_config, digit_config, random_flow, uniform_batch};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn invertibility() -> Outcome {
    let mut worst = 0.0f64;
    for dim in [2, 16, 196] {
        let x = uniform_batch(100, dim, 0.5, dim as u64);
        for kind in ["actnorm", "mix", "coupling"] {
            let (block, store) = single_block(kind, dim, 3);
            worst = worst.max(block_roundtrip_error(&block, &store, &x));
        }
        let flow = random_flow(dim, 8, 64, 3, 11);
        let (z, _) = flow.forward(&x).unwrap();
        worst = worst.max(flow.inverse(&z).unwrap().max_abs_diff(&x));
    }
    outcome(worst < 1e-8, format!("max |F^-1(F(x)) - x| = {worst:.2e}"))
}

fn logdet_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let dim = 2 + (seed as usize % 5);
        let flow = random_flow(dim, 3, 16, 1, seed);
        let x = uniform_batch(1, dim, 0.5, seed + 100);
        let (_, ld) = flow.forward(&x).unwrap();
        worst = worst.max((ld[0] - fd_logdet(&flow, x.data(), 1e-5)).abs());
    }
    outcome(worst < 1e-4, format!("20 models, max |error| = {worst:.2e}"))
}

fn gradient_oracle() -> Outcome {
    let worst = (0..50u64).map(joint_loss_gradient_error).fold(0.0, f64::max);
    outcome(worst < 1e-4, format!("50 points, max relative error = {worst:.2e}"))
}

fn bures_correctness() -> Outcome {
    let g = |m: Vec<f64>, v: Vec<f64>| GaussianSummary::new(m, v, 10).unwrap();
    let a = g(vec![0.3, -1.0], vec![2.0, 0.5]);
    let i = g(vec![0.0, 0.0], vec![1.0, 1.0]);
    let mut ok = bures_cost(&a, &a).unwrap() == 0.0
        && bures_cost(&i, &g(vec![3.0, 4.0], vec![1.0, 1.0])).unwrap() == 5.0
        && bures_cost_sq(&g(vec![0.0, 0.0], vec![4.0, 9.0]), &i).unwrap() == 5.0;
    let mut rng = stream(0, Stream::Misc, 9);
    let mut draw = |d: usize| {
        use rand::Rng;
        let m = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let v = (0..d).map(|_| rng.gen_range(1e-3..10.0)).collect();
        g(m, v)
    };
    let mut slack = f64::INFINITY;
    for t in 0..1000 {
        let d = 1 + t % 5;
        let (a, b, c) = (draw(d), draw(d), draw(d));
        let ab = bures_cost(&a, &b).unwrap();
        ok &= ab == bures_cost(&b, &a).unwrap();
        let gap = ab + bures_cost(&b, &c).unwrap() - bures_cost(&a, &c).unwrap();
        slack = slack.min(gap);
    }
    ok &= slack >= -1e-9;
    outcome(ok, format!("closed forms exact, 1000 triples, min triangle slack = {slack:.2e}"))
}

fn degeneracy() -> Outcome {
    let ok = [0, 1].iter().all(|&s| pure_matches_standalone(s));
    outcome(ok, "pure mode vs standalone classifier, seeds 0 and 1, bitwise")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn blobs_experiment() -> Outcome {
    let mut acc = [[0.0; 5]; 3];
    let mut src = [[0.0; 5]; 3];
    for seed in 0..5u64 {
        let (s, u) = blobs(seed);
        for (k, mode) in [Mode::Pure, Mode::Unvp, Mode::Eunvp].into_iter().enumerate() {
            let st = run(blob_config(mode, seed), &s, &u);
            acc[k][seed as usize] = evaluate(&st.classifier, &u).unwrap();
            src[k][seed as usize] = evaluate(&st.classifier, &s).unwrap();
        }
    }
    let (pure, unvp, eunvp) = (mean(&acc[0]) * 100.0, mean(&acc[1]) * 100.0, mean(&acc[2]) * 100.0);
    let src_gap = (1..3).map(|k| (mean(&src[k]) - mean(&src[0])).abs() * 100.0).fold(0.0, f64::max);
    let pass = eunvp >= pure + 5.0 && unvp >= pure + 2.0 && src_gap <= 1.0;
    outcome(
        pass,
        format!(
            "unseen pure {pure:.2} unvp {unvp:.2} ({:+.2}) eunvp {eunvp:.2} ({:+.2}), source gap {src_gap:.2}",
            unvp - pure,
            eunvp - pure
        ),
    )
}

fn digits_experiment() -> Outcome {
    let corpus = generate_digit_corpus(5000, 0).unwrap();
    let mut pure = Vec::new();
    let mut eunvp = Vec::new();
    for seed in 0..3u64 {
        let (s, u) = split_digit_domains(&corpus, 2000, seed).unwrap();
        for (mode, out) in [(Mode::Pure, &mut pure), (Mode::Eunvp, &mut eunvp)] {
            let mut st = TrainState::new(digit_config(mode, seed), &s).unwrap();
            unvp::generalizer::train(&mut st, &s, None, &mut |_, _| Ok(unvp::generalizer::Control::Continue)).unwrap();
            out.push(evaluate(&st.classifier, &u).unwrap());
        }
    }
    let (p, e) = (mean(&pure) * 100.0, mean(&eunvp) * 100.0);
    outcome(e >= p + 3.0, format!("unseen pure {p:.2} eunvp {e:.2} ({:+.2})", e - p))
}

fn ascent_sanity() -> Outcome {
    let (s, u) = blobs(0);
    let st = run(blob_config(Mode::Eunvp, 0), &s, &u);
    let flow = &st.branch.as_ref().unwrap().flow;
    let base = st.config.generalization.clone();
    let strong = GeneralizationConfig { alpha: 1e6, ..base.clone() };
    let (mut monotone, mut weak_disp, mut strong_disp) = (0, Vec::new(), Vec::new());
    for seed in 0..50u64 {
        let class = (seed % 3) as usize;
        let mut rows: Vec<usize> = (0..s.len()).filter(|&i| s.labels[i] == class).collect();
        rows.shuffle(&mut stream(seed, Stream::Select, 0));
        rows.truncate(16);
        let x = preprocess_rows(&s, &rows, None).unwrap();
        let weak = synthesize_hard_samples(&x, class, flow, &st.classifier, &base).unwrap();
        monotone += weak.trace.windows(2).all(|w| w[1] >= w[0]) as usize;
        weak_disp.push(mean(&weak.displacement(&x)));
        let hard = synthesize_hard_samples(&x, class, flow, &st.classifier, &strong).unwrap();
        strong_disp.push(mean(&hard.displacement(&x)));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
    };
    let (w, h) = (median(&mut weak_disp), median(&mut strong_disp));
    let pass = monotone >= 45 && h < 0.1 * w;
    outcome(
        pass,
        format!("{monotone}/50 non-decreasing traces, median displacement {h:.2e} at alpha 1e6 vs {w:.2e} at alpha {}", base.alpha),
    )
}

fn persistence() -> Outcome {
    let resumed = [Mode::Pure, Mode::Unvp, Mode::Eunvp].iter().all(|&m| {
        let (a, b) = resume_pair(m, 3, 6);
        a == b
    });
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "blob_n = 20\nepochs = 2\npretrain_epochs = 1\nflow_depth = 1\nflow_hidden = 4\n\
         flow_residual_blocks = 1\nclassifier_hidden = 8\nascent_steps = 2\nbatch = 30\nK = 1\nmode = eunvp\n",
    )
    .unwrap();
    cfg.out = dir.path().to_path_buf();
    let spec = GridSpec::default();
    let cells = spec.lambdas.len() * spec.alphas.len() * spec.betas.len();
    let rows = cmd_grid(&cfg, &spec).unwrap();
    let table = std::fs::read_to_string(dir.path().join("grid.tsv")).unwrap();
    let table_rows = table.lines().filter(|l| !l.starts_with('#')).count() - 1;
    let pass = resumed && rows.len() == cells && table_rows == cells;
    outcome(
        pass,
        format!("resume bitwise equal: {resumed}; grid {} of {cells} cells", rows.len().min(table_rows)),
    )
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    type Check = fn() -> Outcome;
    let criteria: [(u8, &str, Check, u64, bool); 9] = [
        (1, "invertibility", invertibility, 10, true),
        (2, "log-det exactness", logdet_exactness, 30, true),
        (3, "gradient oracle", gradient_oracle, 60, true),
        (4, "bures correctness", bures_correctness, 60, true),
        (5, "pure-mode degeneracy", degeneracy, 60, true),
        (6, "blobs experiment", blobs_experiment, 300, strict),
        (7, "digits experiment", digits_experiment, 1200, strict),
        (8, "ascent sanity", ascent_sanity, 120, true),
        (9, "persistence and grid", persistence, 300, true),
    ];
    let mut failed = Vec::new();
    for (id, name, check, budget, gating) in criteria {
        let t = Instant::now();
        let o = check();
        let took = t.elapsed();
        let in_budget = took <= Duration::from_secs(budget);
        let pass = o.pass && in_budget;
        println!(
            "criterion {id} {name}: {} | {} | {:.1}s of {budget}s{}",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            if in_budget { "" } else { " (over budget)" }
        );
        if !pass && gating {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("gating criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
