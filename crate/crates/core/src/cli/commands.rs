use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::{json, Value};

use crate::cli::config::RunConfig;
use crate::data::{load_checkpoint, save_checkpoint, Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::generalizer::{
    confusion, maximization_epochs, preprocess_rows, synthesize_hard_samples, train, Confusion, Control,
    EpochMetrics, Mode, TrainState,
};
use crate::rng::{stream, Stream};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Exit status for a failed command: `2` for anything the operator can fix
/// in the config, data or arguments, `3` for runtime and numeric failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } | Error::Degenerate(_) | Error::Io(_) | Error::Uninitialized(_) => 3,
        _ => 2,
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json");
    text.push('\n');
    crate::data::atomic_write(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub epochs: usize,
    pub rounds: usize,
    /// Epochs before which a maximization round ran.
    pub round_epochs: Vec<usize>,
    pub final_metrics: Option<EpochMetrics>,
}

/// Trains from scratch and writes the checkpoint (after every epoch),
/// the metrics stream and a summary into `cfg.out`.
///
/// On a numeric failure the checkpoint of the last completed epoch is left
/// in place and the error is returned.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (source, unseen) = cfg.load_domains()?;
    ensure_dir(&cfg.out)?;
    let provenance = cfg.to_json();
    let metrics_path = cfg.out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{}", json!({ "config": provenance }))?;
    metrics.flush()?;

    let mut state = TrainState::new(cfg.train.clone(), &source)?;
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    save_checkpoint(&state, &provenance, &ckpt)?;
    let mut on_epoch = |s: &TrainState, m: &EpochMetrics| -> Result<Control> {
        writeln!(metrics, "{}", serde_json::to_string(m).expect("json"))?;
        metrics.flush()?;
        save_checkpoint(s, &provenance, &ckpt)?;
        log::info!(
            "epoch {}: ce {:.4} acc_src {:.4} acc_unseen {:?} pool {}",
            m.epoch,
            m.ce,
            m.acc_src,
            m.acc_unseen,
            m.pool_size
        );
        Ok(Control::Continue)
    };
    train(&mut state, &source, unseen.as_ref(), &mut on_epoch)?;

    let summary = TrainSummary {
        mode: state.config.mode,
        epochs: state.epoch,
        rounds: state.rounds_done,
        round_epochs: maximization_epochs(state.config.epochs, state.config.rounds()),
        final_metrics: state.history.last().cloned(),
    };
    write_json(
        &cfg.out.join(SUMMARY_FILE),
        &json!({ "config": cfg.to_json(), "summary": summary }),
    )?;
    Ok(summary)
}

/// Loads a checkpoint together with the run config it was written with.
pub fn open_checkpoint(path: &Path) -> Result<(TrainState, RunConfig)> {
    let Checkpoint { state, provenance } = load_checkpoint(path)?;
    let cfg = match provenance {
        Value::Null => RunConfig {
            train: state.config.clone(),
            ..RunConfig::default()
        },
        v => serde_json::from_value(v).map_err(|e| Error::Format {
            what: "checkpoint provenance",
            detail: e.to_string(),
        })?,
    };
    Ok((state, cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainReport {
    pub domain: String,
    pub samples: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
}

/// Accuracy and confusion counts of the checkpoint's classifier on each
/// dataset; writes `eval.json` into `out`.
pub fn cmd_eval(checkpoint: &Path, datasets: &[Dataset], out: &Path) -> Result<Vec<DomainReport>> {
    let (state, cfg) = open_checkpoint(checkpoint)?;
    let mut reports = Vec::new();
    for d in datasets {
        let c = confusion(&state.classifier, d)?;
        reports.push(DomainReport {
            domain: d.domain_tag.clone(),
            samples: d.len(),
            accuracy: c.accuracy(),
            confusion: c,
        });
    }
    ensure_dir(out)?;
    write_json(
        &out.join("eval.json"),
        &json!({ "config": cfg.to_json(), "checkpoint": checkpoint, "reports": reports }),
    )?;
    Ok(reports)
}

/// Datasets named by a run config: the source and, if present, the unseen set.
pub fn config_domains(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    let (s, u) = cfg.load_domains()?;
    Ok(std::iter::once(s).chain(u).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbReport {
    pub class: usize,
    pub samples: usize,
    pub mean_displacement: f64,
    pub still_correct: usize,
    pub trace: Vec<f64>,
}

/// Synthesizes hard samples for up to `count` source samples of `class`
/// with the checkpoint's models and writes them with their displacement
/// to `perturb.tsv` in `out`.
pub fn cmd_perturb(checkpoint: &Path, source: &Dataset, class: usize, count: usize, out: &Path) -> Result<PerturbReport> {
    let (state, cfg) = open_checkpoint(checkpoint)?;
    let Some(branch) = &state.branch else {
        return Err(Error::invalid("perturbation needs a checkpoint with a flow (mode unvp or eunvp)"));
    };
    let rows: Vec<usize> = (0..source.len()).filter(|&i| source.labels[i] == class).take(count).collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!("no source samples of class {class}")));
    }
    let x = preprocess_rows(source, &rows, None)?;
    let outcome = synthesize_hard_samples(&x, class, &branch.flow, &state.classifier, &state.config.generalization)?;
    let disp = outcome.displacement(&x);
    let pred = state.classifier.predict(&outcome.x)?;

    ensure_dir(out)?;
    let mut w = BufWriter::new(File::create(out.join("perturb.tsv"))?);
    writeln!(w, "# config: {}", cfg.to_json())?;
    writeln!(w, "index\tlabel\tdisplacement\tpredicted\tx")?;
    for (k, &i) in rows.iter().enumerate() {
        let coords: Vec<String> = outcome.x.row(k).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{i}\t{class}\t{}\t{}\t{}", disp[k], pred[k], coords.join(","))?;
    }
    w.flush()?;
    Ok(PerturbReport {
        class,
        samples: rows.len(),
        mean_displacement: disp.iter().sum::<f64>() / disp.len() as f64,
        still_correct: pred.iter().filter(|&&p| p == class).count(),
        trace: outcome.trace,
    })
}

/// Parameter values swept by [`cmd_grid`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambdas: vec![0.01, 0.1, 1.0],
            alphas: vec![0.01, 0.1, 1.0],
            betas: vec![0.0, 0.01, 0.1, 0.2, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub acc_src: Option<f64>,
    pub acc_unseen: Option<f64>,
    pub error: Option<String>,
}

pub const GRID_FILE: &str = "grid.tsv";

/// One seeded training run per `(λ, α, β)` cell of `spec`, on the base
/// config. A failing cell is recorded and the sweep goes on. Rows are
/// appended to `grid.tsv` in `cfg.out` as they finish.
pub fn cmd_grid(cfg: &RunConfig, spec: &GridSpec) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let (source, unseen) = cfg.load_domains()?;
    ensure_dir(&cfg.out)?;
    let path = cfg.out.join(GRID_FILE);
    let mut f = File::create(&path)?;
    writeln!(f, "# config: {}", cfg.to_json())?;
    writeln!(f, "lambda\talpha\tbeta\tacc_src\tacc_unseen\tstatus")?;
    drop(f);

    let mut rows = Vec::new();
    for &lambda in &spec.lambdas {
        for &alpha in &spec.alphas {
            for &beta in &spec.betas {
                let mut tc = cfg.train.clone();
                tc.lambda = lambda;
                tc.generalization.alpha = alpha;
                tc.generalization.beta = beta;
                let result = TrainState::new(tc, &source).and_then(|mut st| {
                    train(&mut st, &source, unseen.as_ref(), &mut |_, _| Ok(Control::Continue))?;
                    Ok(st.history.last().cloned())
                });
                let row = match result {
                    Ok(m) => GridRow {
                        lambda,
                        alpha,
                        beta,
                        acc_src: m.as_ref().map(|m| m.acc_src),
                        acc_unseen: m.and_then(|m| m.acc_unseen),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("grid cell lambda={lambda} alpha={alpha} beta={beta} failed: {e}");
                        GridRow {
                            lambda,
                            alpha,
                            beta,
                            acc_src: None,
                            acc_unseen: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                let mut f = OpenOptions::new().append(true).open(&path)?;
                writeln!(
                    f,
                    "{lambda}\t{alpha}\t{beta}\t{}\t{}\t{}",
                    fmt(row.acc_src),
                    fmt(row.acc_unseen),
                    row.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {e}"))
                )?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// `2 × d` Gaussian projection drawn from the seed's projection stream,
/// rows scaled to unit norm.
pub fn projection_matrix(dim: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = stream(seed, Stream::Projection, 0);
    let mut p: Vec<[f64; 2]> = (0..dim)
        .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
        .collect();
    for k in 0..2 {
        let norm = p.iter().map(|r| r[k] * r[k]).sum::<f64>().sqrt();
        p.iter_mut().for_each(|r| r[k] /= norm);
    }
    p
}

pub const LATENTS_FILE: &str = "latents.tsv";
pub const PROJECTION_FILE: &str = "projection.tsv";

/// Writes one row per sample of every dataset: two latent coordinates,
/// label and domain tag. For `d > 2` the coordinates are a fixed seeded
/// projection, stored beside the scatter file. Returns the scatter path.
pub fn cmd_export_latents(checkpoint: &Path, datasets: &[Dataset], out: &Path) -> Result<PathBuf> {
    let (state, cfg) = open_checkpoint(checkpoint)?;
    let Some(branch) = &state.branch else {
        return Err(Error::invalid("latent export needs a checkpoint with a flow (mode unvp or eunvp)"));
    };
    let d = state.dim();
    let projection = (d > 2).then(|| projection_matrix(d, state.config.seed));
    ensure_dir(out)?;
    let header = format!("# config: {}", cfg.to_json());
    if let Some(p) = &projection {
        let mut w = BufWriter::new(File::create(out.join(PROJECTION_FILE))?);
        writeln!(w, "{header}")?;
        writeln!(w, "p1\tp2")?;
        for r in p {
            writeln!(w, "{}\t{}", r[0], r[1])?;
        }
        w.flush()?;
    }
    let path = out.join(LATENTS_FILE);
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "{header}")?;
    writeln!(w, "z1\tz2\tlabel\tdomain")?;
    for data in datasets {
        if data.dim() != d {
            return Err(Error::shape("export_latents", &[d], &[data.dim()]));
        }
        let rows: Vec<usize> = (0..data.len()).collect();
        for chunk in rows.chunks(500) {
            let (z, _) = branch.flow.forward(&preprocess_rows(data, chunk, None)?)?;
            for (k, &i) in chunk.iter().enumerate() {
                let zr = z.row(k);
                let (a, b) = match &projection {
                    Some(p) => zr
                        .iter()
                        .zip(p)
                        .fold((0.0, 0.0), |(a, b), (v, r)| (a + v * r[0], b + v * r[1])),
                    None => (zr[0], zr.get(1).copied().unwrap_or(0.0)),
                };
                writeln!(w, "{a}\t{b}\t{}\t{}", data.labels[i], data.domain_tag)?;
            }
        }
    }
    w.flush()?;
    Ok(path)
}
