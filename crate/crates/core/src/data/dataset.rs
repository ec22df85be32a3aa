//! In-memory datasets and their binary container.
//!
//! Container layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "UNVPDSET"
//! version      u32      currently 1
//! count        u64      number of samples
//! ndim         u32      rank of one sample
//! shape        ndim × u64
//! label_width  u8       bytes per label (4)
//! classes      u32
//! low, high    f64, f64 declared input range
//! quant_step   f64      0 for continuous data
//! tag_len      u32, then tag_len bytes of UTF-8 domain tag
//! inputs       count × prod(shape) × f64, row-major
//! labels       count × u32
//! checksum     u32      CRC-32 of every preceding byte
//! ```

use std::path::Path;

use crate::data::io::{atomic_write, Reader, Writer};
use crate::data::InputMeta;
use crate::error::{Error, Result};
use crate::numeric::Array;

pub const DATASET_MAGIC: &[u8; 8] = b"UNVPDSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    /// Row-major samples, `len() × dim()` values.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain_tag: String,
    pub meta: InputMeta,
}

impl Dataset {
    /// Validates label range, sample count and the declared input range.
    pub fn new(
        sample_shape: Vec<usize>,
        inputs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
        domain_tag: impl Into<String>,
        meta: InputMeta,
    ) -> Result<Self> {
        meta.validate()?;
        let dim: usize = sample_shape.iter().product();
        if dim == 0 {
            return Err(Error::invalid("samples must have at least one coordinate"));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::shape("Dataset::new", &[labels.len(), dim], &[inputs.len()]));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::UnknownClass { class: c, classes });
        }
        if let Some(v) = inputs.iter().find(|v| !meta.contains(**v)) {
            return Err(Error::invalid(format!(
                "input value {v} outside declared range [{}, {}]",
                meta.low, meta.high
            )));
        }
        Ok(Dataset {
            sample_shape,
            inputs,
            labels,
            classes,
            domain_tag: domain_tag.into(),
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Raw inputs of the given samples as a `[n, dim]` array.
    pub fn batch(&self, indices: &[usize]) -> Array {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.input(i));
        }
        Array::matrix(indices.len(), d, data).expect("batch shape")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sample_shape: self.sample_shape.clone(),
            inputs: self.batch(indices).into_data(),
            labels: self.labels_of(indices),
            classes: self.classes,
            domain_tag: self.domain_tag.clone(),
            meta: self.meta,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &c in &self.labels {
            counts[c] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u64(self.len() as u64);
        w.u32(self.sample_shape.len() as u32);
        for &s in &self.sample_shape {
            w.u64(s as u64);
        }
        w.u8(4);
        w.u32(self.classes as u32);
        w.f64(self.meta.low);
        w.f64(self.meta.high);
        w.f64(self.meta.quant_step.unwrap_or(0.0));
        w.str(&self.domain_tag);
        for &v in &self.inputs {
            w.f64(v);
        }
        for &l in &self.labels {
            w.u32(l as u32);
        }
        w.finish_with_checksum()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::verified(bytes, "dataset")?;
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::Format {
                what: "dataset",
                detail: "bad magic bytes".into(),
            });
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let count = r.u64()? as usize;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let label_width = r.u8()?;
        if label_width != 4 {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("unsupported label width {label_width}"),
            });
        }
        let classes = r.u32()? as usize;
        let low = r.f64()?;
        let high = r.f64()?;
        let q = r.f64()?;
        let tag = r.str()?;
        let dim: usize = shape.iter().product();
        let inputs = (0..count * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let labels = (0..count).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        let meta = InputMeta {
            low,
            high,
            quant_step: if q > 0.0 { Some(q) } else { None },
        };
        Dataset::new(shape, inputs, labels, classes, tag, meta)
    }

    /// Writes the container atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}
