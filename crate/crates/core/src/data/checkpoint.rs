//! Training-state checkpoints.
//!
//! Container layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "UNVPCKPT"
//! version   u32
//! segments  repeated: tag (4 ASCII bytes), length u64, payload
//! checksum  u32      CRC-32 of every preceding byte
//! ```
//!
//! Segments, in order: `CONF` (JSON of the training config, sample shape,
//! class count, input range and a free-form provenance value), `STAT` (schedule counters and metrics history),
//! `CLSF` (classifier parameters), `FLOW` and `PRIO` (flow branch, absent in
//! pure mode), `OPTM` (optimizer moments) and `POOL` (hard samples).
//! Parameter segments store each tensor as name, length and raw `f64` bits,
//! so a reload is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::{atomic_write, Reader, Writer};
use crate::data::InputMeta;
use crate::error::{Error, Result};
use crate::generalizer::{EpochMetrics, HardSample, TrainConfig, TrainState};
use crate::numeric::{Optimizer, OptimizerKind, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNVPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    sample_shape: Vec<usize>,
    classes: usize,
    meta: InputMeta,
    #[serde(default)]
    provenance: serde_json::Value,
}

/// A training state together with the provenance record stored beside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub provenance: serde_json::Value,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn segment(w: &mut Writer, tag: &[u8; 4], body: Writer) {
    let body = body.into_inner();
    w.bytes(tag);
    w.u64(body.len() as u64);
    w.bytes(&body);
}

fn write_store(store: &ParamStore) -> Writer {
    let mut w = Writer::default();
    w.u32(store.len() as u32);
    for (name, p) in store.iter() {
        w.str(name);
        w.u64(p.len() as u64);
        p.data().iter().for_each(|&v| w.f64(v));
    }
    w
}

fn read_store(r: &mut Reader<'_>, store: &mut ParamStore) -> Result<()> {
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(format_err(format!("{count} tensors, model has {}", store.len())));
    }
    let mut flat = Vec::with_capacity(store.numel());
    for expected in store.names().to_vec().iter().zip(store.arrays().iter().map(|a| a.len())) {
        let name = r.str()?;
        let len = r.u64()? as usize;
        if &name != expected.0 || len != expected.1 {
            return Err(format_err(format!(
                "tensor {name} ({len}) does not match {} ({})",
                expected.0, expected.1
            )));
        }
        for _ in 0..len {
            flat.push(r.f64()?);
        }
    }
    store.unflatten(&flat)
}

fn write_optimizer(w: &mut Writer, opt: &Optimizer) {
    w.u8(match opt.kind {
        OptimizerKind::Sgd => 0,
        OptimizerKind::Adam => 1,
    });
    for v in [opt.learning_rate, opt.beta1, opt.beta2, opt.eps] {
        w.f64(v);
    }
    w.u64(opt.steps());
    let (first, second) = opt.moments();
    for moments in [first, second] {
        w.u32(moments.len() as u32);
        for m in moments {
            w.u64(m.len() as u64);
            m.iter().for_each(|&v| w.f64(v));
        }
    }
}

fn read_optimizer(r: &mut Reader<'_>) -> Result<Optimizer> {
    let kind = match r.u8()? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::Adam,
        k => return Err(format_err(format!("unknown optimizer kind {k}"))),
    };
    let mut opt = Optimizer::new(kind, r.f64()?)?;
    opt.beta1 = r.f64()?;
    opt.beta2 = r.f64()?;
    opt.eps = r.f64()?;
    let step = r.u64()?;
    let read_moments = |r: &mut Reader<'_>| -> Result<Vec<Vec<f64>>> {
        let n = r.u32()? as usize;
        (0..n)
            .map(|_| {
                let len = r.u64()? as usize;
                (0..len).map(|_| r.f64()).collect()
            })
            .collect()
    };
    let first = read_moments(r)?;
    let second = read_moments(r)?;
    opt.restore(first, second, step);
    Ok(opt)
}

fn write_opt_flag(w: &mut Writer, opt: Option<&Optimizer>) {
    match opt {
        Some(o) => {
            w.u8(1);
            write_optimizer(w, o);
        }
        None => w.u8(0),
    }
}

fn opt_f64(w: &mut Writer, v: Option<f64>) {
    w.u8(v.is_some() as u8);
    w.f64(v.unwrap_or(0.0));
}

fn read_opt_f64(r: &mut Reader<'_>) -> Result<Option<f64>> {
    let present = r.u8()? == 1;
    let v = r.f64()?;
    Ok(present.then_some(v))
}

/// Serializes the full training state. `provenance` is stored verbatim
/// (pass `Value::Null` when there is nothing to record).
pub fn checkpoint_bytes(state: &TrainState, provenance: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        config: state.config.clone(),
        sample_shape: state.sample_shape.clone(),
        classes: state.classes,
        meta: state.meta,
        provenance: provenance.clone(),
    };
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);

    let mut conf = Writer::default();
    conf.str(&serde_json::to_string(&header).map_err(|e| format_err(e.to_string()))?);
    segment(&mut w, b"CONF", conf);

    let mut stat = Writer::default();
    for v in [state.pretrain_done, state.epoch, state.rounds_done, state.history.len()] {
        stat.u64(v as u64);
    }
    for m in &state.history {
        stat.u64(m.epoch as u64);
        stat.f64(m.ce);
        opt_f64(&mut stat, m.nll);
        stat.f64(m.acc_src);
        opt_f64(&mut stat, m.acc_unseen);
        stat.u64(m.pool_size as u64);
    }
    segment(&mut w, b"STAT", stat);

    segment(&mut w, b"CLSF", write_store(&state.classifier.store));
    if let Some(b) = &state.branch {
        let mut flow = write_store(&b.flow.store);
        flow.u8(b.flow.is_initialized() as u8);
        segment(&mut w, b"FLOW", flow);
        segment(&mut w, b"PRIO", write_store(&b.priors.store));
    }

    let mut optm = Writer::default();
    write_optimizer(&mut optm, &state.clf_opt);
    write_opt_flag(&mut optm, state.branch.as_ref().map(|b| &b.flow_opt));
    write_opt_flag(&mut optm, state.branch.as_ref().map(|b| &b.prior_opt));
    segment(&mut w, b"OPTM", optm);

    let mut pool = Writer::default();
    pool.u64(state.pool.len() as u64);
    for s in state.pool.entries() {
        pool.u32(s.label as u32);
        pool.u32(s.round as u32);
        s.x.iter().for_each(|&v| pool.f64(v));
    }
    segment(&mut w, b"POOL", pool);
    Ok(w.finish_with_checksum())
}

struct Segments<'a> {
    reader: Reader<'a>,
}

impl<'a> Segments<'a> {
    fn next(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let found = self.reader.take(4)?;
        if found != tag {
            return Err(format_err(format!(
                "expected segment {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = self.reader.u64()? as usize;
        Ok(Reader::new(self.reader.take(len)?, "checkpoint"))
    }
}

/// Rebuilds a training state from [`checkpoint_bytes`] output.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::verified(bytes, "checkpoint")?;
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut seg = Segments { reader: r };

    let mut conf = seg.next(b"CONF")?;
    let header: Header = serde_json::from_str(&conf.str()?).map_err(|e| format_err(e.to_string()))?;
    conf.expect_end()?;
    let mut state = TrainState::build(header.config, header.sample_shape, header.classes, header.meta)?;

    let mut stat = seg.next(b"STAT")?;
    state.pretrain_done = stat.u64()? as usize;
    state.epoch = stat.u64()? as usize;
    state.rounds_done = stat.u64()? as usize;
    let n = stat.u64()? as usize;
    for _ in 0..n {
        state.history.push(EpochMetrics {
            epoch: stat.u64()? as usize,
            ce: stat.f64()?,
            nll: read_opt_f64(&mut stat)?,
            acc_src: stat.f64()?,
            acc_unseen: read_opt_f64(&mut stat)?,
            pool_size: stat.u64()? as usize,
        });
    }
    stat.expect_end()?;

    let mut clsf = seg.next(b"CLSF")?;
    read_store(&mut clsf, &mut state.classifier.store)?;
    clsf.expect_end()?;
    if let Some(b) = state.branch.as_mut() {
        let mut flow = seg.next(b"FLOW")?;
        read_store(&mut flow, &mut b.flow.store)?;
        if flow.u8()? == 1 {
            b.flow.mark_initialized();
        }
        flow.expect_end()?;
        let mut prio = seg.next(b"PRIO")?;
        read_store(&mut prio, &mut b.priors.store)?;
        prio.expect_end()?;
    }

    let mut optm = seg.next(b"OPTM")?;
    state.clf_opt = read_optimizer(&mut optm)?;
    for which in 0..2 {
        let present = optm.u8()? == 1;
        match (present, state.branch.as_mut()) {
            (true, Some(b)) => {
                let opt = read_optimizer(&mut optm)?;
                if which == 0 {
                    b.flow_opt = opt;
                } else {
                    b.prior_opt = opt;
                }
            }
            (false, None) => {}
            _ => return Err(format_err("optimizer segment does not match the mode")),
        }
    }
    optm.expect_end()?;

    let mut pool = seg.next(b"POOL")?;
    let count = pool.u64()? as usize;
    let dim = state.dim();
    for _ in 0..count {
        let label = pool.u32()? as usize;
        let round = pool.u32()? as usize;
        let x = (0..dim).map(|_| pool.f64()).collect::<Result<Vec<_>>>()?;
        state.pool.push(HardSample { x, label, round }, dim, state.classes)?;
    }
    pool.expect_end()?;
    seg.reader.expect_end()?;
    Ok(Checkpoint {
        state,
        provenance: header.provenance,
    })
}

/// Writes the checkpoint atomically.
pub fn save_checkpoint(state: &TrainState, provenance: &serde_json::Value, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(state, provenance)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    checkpoint_from_bytes(&std::fs::read(path)?)
}
