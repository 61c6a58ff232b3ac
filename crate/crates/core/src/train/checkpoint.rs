//! SPCK binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPCK" | u32 version | u32 config_len | config UTF-8 | u64 step
//! | weight table | u8 has_ema [ema table] | u8 has_opt [u64 opt_step, table]
//! ```
//!
//! A table is `u32 count` followed by `count` tensors, each
//! `u16 name_len | name | u8 rank | u32 dims[rank] | f32 values[prod(dims)]`.
//! Loading validates every length before allocating and rejects trailing
//! bytes, so a round trip is bitwise and corruption is detected early.

use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::error::{Error, Result};
use crate::formats::atomic_write;
use crate::model::{build_model, UDiT};
use crate::nn::Real;
use crate::train::config_text::{parse_config, TrainConfig};

pub const SPCK_MAGIC: &[u8; 4] = b"SPCK";
pub const SPCK_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_TABLE_COUNT: u32 = 1 << 20;
const MAX_CONFIG_LEN: u32 = 1 << 20;

/// A named f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_view<T: Real>(name: &str, view: ArrayViewD<'_, T>) -> Self {
        NamedTensor {
            name: name.to_string(),
            dims: view.shape().to_vec(),
            data: view.iter().map(|v| v.as_f32()).collect(),
        }
    }

    pub fn to_array<T: Real>(&self) -> ArrayD<T> {
        ArrayD::from_shape_vec(
            IxDyn(&self.dims),
            self.data.iter().map(|&v| T::from_f32(v)).collect(),
        )
        .expect("dims validated at parse time")
    }
}

/// Optimizer state: moment tensors plus the optimizer step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

/// In-memory image of an SPCK file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub step: u64,
    pub weights: Vec<NamedTensor>,
    pub ema: Option<Vec<NamedTensor>>,
    pub optimizer: Option<OptimizerState>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated in {} section (need {n} bytes at offset {}, have {})",
                self.section,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_table(out: &mut Vec<u8>, tensors: &[NamedTensor]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_table(r: &mut Reader<'_>) -> Result<Vec<NamedTensor>> {
    let count = r.u32()?;
    if count > MAX_TABLE_COUNT {
        return Err(Error::Format(format!(
            "{} table declares {count} tensors",
            r.section
        )));
    }
    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!(
                "tensor name length {name_len} out of range in {}",
                r.section
            )));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format(format!("tensor name is not UTF-8 in {}", r.section)))?
            .to_string();
        let rank = r.u8()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!(
                "tensor `{name}` declares rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = r.u32()? as u64;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` dims overflow")))?;
            dims.push(d as usize);
        }
        let byte_len = elems
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` dims overflow")))?;
        if byte_len > (r.bytes.len() - r.pos) as u64 {
            return Err(Error::Format(format!(
                "truncated tensor `{name}` in {} section",
                r.section
            )));
        }
        let raw = r.take(byte_len as usize)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok(tensors)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SPCK_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        write_table(&mut out, &self.weights);
        match &self.ema {
            Some(t) => {
                out.push(1);
                write_table(&mut out, t);
            }
            None => out.push(0),
        }
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                write_table(&mut out, &opt.tensors);
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader {
            bytes,
            pos: 0,
            section: "header",
        };
        let magic = r.take(4)?;
        if magic != SPCK_MAGIC {
            return Err(Error::Format("bad SPCK magic".into()));
        }
        let version = r.u32()?;
        if version != SPCK_VERSION {
            return Err(Error::Format(format!(
                "unsupported SPCK version {version} (expected {SPCK_VERSION})"
            )));
        }
        let config_len = r.u32()?;
        if config_len > MAX_CONFIG_LEN {
            return Err(Error::Format(format!(
                "config text declares {config_len} bytes"
            )));
        }
        let config_text = std::str::from_utf8(r.take(config_len as usize)?)
            .map_err(|_| Error::Format("config text is not UTF-8".into()))?
            .to_string();
        let step = r.u64()?;

        r.section = "weights";
        let weights = read_table(&mut r)?;
        r.section = "ema";
        let ema = match r.u8()? {
            0 => None,
            1 => Some(read_table(&mut r)?),
            v => return Err(Error::Format(format!("bad ema flag {v}"))),
        };
        r.section = "optimizer";
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let tensors = read_table(&mut r)?;
                Some(OptimizerState { step, tensors })
            }
            v => return Err(Error::Format(format!("bad optimizer flag {v}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            version,
            config_text,
            step,
            weights,
            ema,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Snapshot a model (plus optional EMA/optimizer tables) at a step.
    pub fn capture<T: Real>(
        model: &UDiT<T>,
        config: &TrainConfig,
        step: u64,
        ema: Option<Vec<NamedTensor>>,
        optimizer: Option<OptimizerState>,
    ) -> Checkpoint {
        let mut weights = Vec::new();
        model.for_each_param(&mut |name, view| {
            weights.push(NamedTensor::from_view(name, view));
        });
        Checkpoint {
            version: SPCK_VERSION,
            config_text: config.to_text(),
            step,
            weights,
            ema,
            optimizer,
        }
    }

    /// Parse the embedded config and rebuild the model with these weights.
    /// `use_ema` swaps in the EMA table instead of the raw weights.
    pub fn build_model_f32(&self, use_ema: bool) -> Result<(UDiT<f32>, TrainConfig)> {
        let config = parse_config(&self.config_text)
            .map_err(|e| Error::Format(format!("embedded config: {e}")))?;
        let model_cfg = config.model.resolve()?;
        let mut model = build_model::<f32>(&model_cfg, config.seed)?;
        let table = if use_ema {
            self.ema
                .as_ref()
                .ok_or_else(|| Error::Format("checkpoint has no EMA table".into()))?
        } else {
            &self.weights
        };
        let by_name: std::collections::BTreeMap<&str, &NamedTensor> =
            table.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != table.len() {
            return Err(Error::Format("duplicate tensor names in table".into()));
        }
        let mut problem: Option<String> = None;
        let mut used = 0usize;
        model.for_each_param_mut(&mut |name, mut w| {
            if problem.is_some() {
                return;
            }
            match by_name.get(name) {
                Some(t) if t.dims == w.shape() => {
                    for (dst, src) in w.iter_mut().zip(t.data.iter()) {
                        *dst = *src;
                    }
                    used += 1;
                }
                Some(t) => {
                    problem = Some(format!(
                        "tensor `{name}` has dims {:?}, model expects {:?}",
                        t.dims,
                        w.shape()
                    ))
                }
                None => problem = Some(format!("missing tensor `{name}`")),
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Format(msg));
        }
        if used != table.len() {
            return Err(Error::Format(format!(
                "table has {} tensors, model consumed {used}",
                table.len()
            )));
        }
        Ok((model, config))
    }
}

/// Save just the model weights (no EMA/optimizer) with its embedded config.
pub fn save_checkpoint<T: Real>(model: &UDiT<T>, config: &TrainConfig, path: &Path) -> Result<()> {
    Checkpoint::capture(model, config, 0, None, None).save(path)
}

/// Load a checkpoint and rebuild the model from its raw weights.
pub fn load_checkpoint(path: &Path) -> Result<(UDiT<f32>, TrainConfig)> {
    Checkpoint::load(path)?.build_model_f32(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UDiTConfig;
    use crate::train::config_text::ModelSpec;

    fn micro_config() -> TrainConfig {
        TrainConfig {
            model: ModelSpec::Custom(UDiTConfig {
                in_channels: 3,
                down_factor: 2,
                stem_channels: vec![4],
                trunk_depth: 1,
                trunk_width: 8,
                heads: 2,
                time_embed_dim: 4,
                feature_tap_layer: 0,
                head_zero_init: true,
            }),
            image_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = micro_config();
        let mut model = build_model::<f32>(&cfg.model.resolve().unwrap(), 3).unwrap();
        model.perturb_weights(9, 0.1);
        let ck = Checkpoint::capture(&model, &cfg, 17, None, None);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck, back);
        let (rebuilt, _) = back.build_model_f32(false).unwrap();
        assert_eq!(model.weight_checksum(), rebuilt.weight_checksum());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.spck");
        let cfg = micro_config();
        let model = build_model::<f32>(&cfg.model.resolve().unwrap(), 5).unwrap();
        save_checkpoint(&model, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(model.weight_checksum(), loaded.weight_checksum());
        assert_eq!(loaded_cfg, cfg);
    }

    #[test]
    fn corruption_is_rejected() {
        let cfg = micro_config();
        let model = build_model::<f32>(&cfg.model.resolve().unwrap(), 1).unwrap();
        let bytes = Checkpoint::capture(&model, &cfg, 0, None, None).to_bytes();

        // magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        // version bump
        let mut bad = bytes.clone();
        bad[4] = 2;
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        // truncation at several depths
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut at {cut} must fail"
            );
        }
        // trailing garbage
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn missing_tensor_is_detected() {
        let cfg = micro_config();
        let model = build_model::<f32>(&cfg.model.resolve().unwrap(), 1).unwrap();
        let mut ck = Checkpoint::capture(&model, &cfg, 0, None, None);
        ck.weights.pop();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(matches!(back.build_model_f32(false), Err(Error::Format(_))));
    }
}
