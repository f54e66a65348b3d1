//! Checkpoint files.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "MMCK" | u32 version=1 | u32 config_len | config text (UTF-8 key=value lines)
//! u32 n_params | n_params x ( u16 name_len | name | u8 ndim | ndim x u32 dim | f32 payload )
//! ```
//!
//! Config keys are `model.*`, `train.*`, `epoch`, `valid_ppl` and free-form
//! `meta.*` entries (vocabulary and BPE digests).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, Seq2Seq};

use super::TrainConfig;

pub const MAGIC: [u8; 4] = *b"MMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Seq2Seq<f32>,
    pub train: TrainConfig,
    pub epoch: usize,
    pub valid_ppl: f64,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn config_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.config().to_pairs() {
            out.push_str(&format!("model.{k}={v}\n"));
        }
        for (k, v) in self.train.to_pairs() {
            out.push_str(&format!("train.{k}={v}\n"));
        }
        out.push_str(&format!("epoch={}\n", self.epoch));
        out.push_str(&format!("valid_ppl={}\n", self.valid_ppl));
        for (k, v) in &self.metadata {
            out.push_str(&format!("meta.{k}={v}\n"));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = self.config_text();
        let params = self.model.params();
        let mut out = Vec::with_capacity(16 + text.len() + 4 * params.total_elements());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(text.len(), "config block")?.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&u32_len(params.len(), "parameter count")?.to_le_bytes());
        for (name, tensor) in params.iter() {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(tensor.ndim())
                .map_err(|_| Error::Config(format!("{name}: too many dimensions")))?;
            out.push(ndim);
            for &d in tensor.shape() {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let text_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(text_len, "config block")?)
            .map_err(|_| CheckpointError::MalformedConfig("config block is not UTF-8".into()))?;
        let (model_cfg, train, epoch, valid_ppl, metadata) = parse_config(text)?;
        let mut model = Seq2Seq::<f32>::zeroed(model_cfg)
            .map_err(|e| CheckpointError::MalformedConfig(e.to_string()))?;

        let n_params = r.u32("parameter count")? as usize;
        if n_params != model.params().len() {
            return Err(CheckpointError::ShapeMismatch(format!(
                "config implies {} parameters, file has {n_params}",
                model.params().len()
            ))
            .into());
        }
        let mut loaded = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u16("parameter name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|_| {
                    CheckpointError::MalformedConfig("parameter name is not UTF-8".into())
                })?
                .to_string();
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let expected = model.params().get(&name).ok_or_else(|| {
                CheckpointError::ShapeMismatch(format!("unexpected parameter {name}"))
            })?;
            if expected.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "{name}: config implies {:?}, file has {shape:?}",
                    expected.shape()
                ))
                .into());
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            loaded.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos).into());
        }
        model
            .params_mut()
            .load_from(loaded)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        Ok(Checkpoint {
            model,
            train,
            epoch,
            valid_ppl,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("{what} exceeds u32: {n}")))
}

type ParsedConfig = (
    ModelConfig,
    TrainConfig,
    usize,
    f64,
    BTreeMap<String, String>,
);

fn parse_config(text: &str) -> std::result::Result<ParsedConfig, CheckpointError> {
    let malformed = |msg: String| CheckpointError::MalformedConfig(msg);
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let mut epoch = None;
    let mut valid_ppl = None;
    let mut metadata = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("expected key=value, got {line:?}")))?;
        let known = if let Some(k) = key.strip_prefix("model.") {
            model.set(k, value).map_err(|e| malformed(e.to_string()))?
        } else if let Some(k) = key.strip_prefix("train.") {
            train.set(k, value).map_err(|e| malformed(e.to_string()))?
        } else if let Some(k) = key.strip_prefix("meta.") {
            metadata.insert(k.to_string(), value.to_string());
            true
        } else if key == "epoch" {
            epoch = Some(
                value
                    .parse()
                    .map_err(|_| malformed(format!("bad epoch {value:?}")))?,
            );
            true
        } else if key == "valid_ppl" {
            valid_ppl = Some(
                value
                    .parse()
                    .map_err(|_| malformed(format!("bad valid_ppl {value:?}")))?,
            );
            true
        } else {
            false
        };
        if !known {
            return Err(malformed(format!("unknown key {key:?}")));
        }
    }
    let epoch = epoch.ok_or_else(|| malformed("missing epoch".into()))?;
    let valid_ppl = valid_ppl.ok_or_else(|| malformed("missing valid_ppl".into()))?;
    Ok((model, train, epoch, valid_ppl, metadata))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(CheckpointError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }
}
