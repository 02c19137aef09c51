//! `TTSX` checkpoint container: magic, u32 version, u64 header-JSON length +
//! JSON bytes (config, step, optimizer metadata), then one record per tensor
//! — u32 name length, name bytes, u32 rank, dims, f32 values.
//!
//! Parameters and AdamW moments are kept on the f32 grid throughout training,
//! so the f32 encoding here is lossless and a resumed run replays the
//! original bit for bit. Moment tensors are stored as extra records named
//! `m:<param>` / `v:<param>`.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use crate::model::{ModelConfig, TtsModel};
use crate::numerics::optim::AdamWState;
use crate::numerics::params::ParamSet;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TTSX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    opt: Option<OptMeta>,
    /// Hash of the full run configuration, used to refuse resuming under a
    /// silently changed config. Absent in checkpoints saved without one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptMeta {
    step: u64,
    weight_decay: f64,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.into() }
}

fn write_record<W: Write>(w: &mut W, name: &str, value: &Array2<f64>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(2)?;
    w.write_u32::<LittleEndian>(value.nrows() as u32)?;
    w.write_u32::<LittleEndian>(value.ncols() as u32)?;
    for &v in value.iter() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    step: u64,
    params: &ParamSet,
    opt: Option<&AdamWState>,
    run_config_hash: Option<&str>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::Io { path: path.to_path_buf(), source: e };
    let header = Header {
        config: config.clone(),
        step,
        opt: opt.map(|o| OptMeta { step: o.step, weight_decay: o.weight_decay }),
        run_config_hash: run_config_hash.map(String::from),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(json.len() as u64).map_err(io_err)?;
    w.write_all(&json).map_err(io_err)?;
    for id in params.ids() {
        write_record(&mut w, params.name(id), params.value(id)).map_err(io_err)?;
    }
    if let Some(o) = opt {
        for id in params.ids() {
            write_record(&mut w, &format!("m:{}", params.name(id)), &o.m[id.index()])
                .map_err(io_err)?;
            write_record(&mut w, &format!("v:{}", params.name(id)), &o.v[id.index()])
                .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// A parsed checkpoint, not yet bound to a model.
#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub config: ModelConfig,
    pub step: u64,
    pub run_config_hash: Option<String>,
    opt: Option<OptMeta>,
    tensors: BTreeMap<String, Array2<f64>>,
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let mut r = Cursor::new(&bytes[..]);
    let io_err = |_| format_err(path, "truncated checkpoint");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}, expected TTSX")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported TTSX version {version}")));
    }
    let json_len = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| format_err(path, format!("bad header JSON: {e}")))?;

    let mut tensors = BTreeMap::new();
    while (r.position() as usize) < bytes.len() {
        let name_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| format_err(path, "tensor name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if rank != 2 {
            return Err(format_err(path, format!("tensor {name} has rank {rank}, expected 2")));
        }
        let rows = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = r.read_f32::<LittleEndian>().map_err(io_err)?;
            if !v.is_finite() {
                return Err(format_err(path, format!("non-finite value in tensor {name}")));
            }
            data.push(v as f64);
        }
        let value = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| format_err(path, format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), value).is_some() {
            return Err(format_err(path, format!("duplicate tensor {name}")));
        }
    }
    Ok(CheckpointFile {
        config: header.config,
        step: header.step,
        run_config_hash: header.run_config_hash,
        opt: header.opt,
        tensors,
    })
}

impl CheckpointFile {
    pub fn has_optimizer(&self) -> bool {
        self.opt.is_some()
    }

    /// Rebuilds the model (and optimizer state when present) from this file.
    /// The tensor set must match the config-derived parameter list exactly.
    pub fn restore(mut self, path: &Path) -> Result<(TtsModel, Option<AdamWState>, u64)> {
        let mut model = TtsModel::new(self.config.clone())?;
        let opt_meta = self.opt.take();
        let mut opt = opt_meta
            .as_ref()
            .map(|meta| AdamWState::new(&model.params, meta.weight_decay));
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let tensor = self
                .tensors
                .remove(&name)
                .ok_or_else(|| format_err(path, format!("missing tensor {name}")))?;
            if tensor.dim() != model.params.value(id).dim() {
                return Err(format_err(
                    path,
                    format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        tensor.dim(),
                        model.params.value(id).dim()
                    ),
                ));
            }
            *model.params.value_mut(id) = tensor;
            if let Some(o) = opt.as_mut() {
                for (prefix, store) in [("m:", &mut o.m), ("v:", &mut o.v)] {
                    let moment = self
                        .tensors
                        .remove(&format!("{prefix}{name}"))
                        .ok_or_else(|| {
                            format_err(path, format!("missing tensor {prefix}{name}"))
                        })?;
                    if moment.dim() != store[id.index()].dim() {
                        return Err(format_err(
                            path,
                            format!("tensor {prefix}{name} has wrong shape"),
                        ));
                    }
                    store[id.index()] = moment;
                }
            }
        }
        if let Some(name) = self.tensors.keys().next() {
            return Err(format_err(path, format!("unexpected tensor {name}")));
        }
        if let (Some(o), Some(meta)) = (opt.as_mut(), opt_meta.as_ref()) {
            o.step = meta.step;
        }
        Ok((model, opt, self.step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GstConfig, StackConfig};
    use crate::numerics::optim::adamw_step;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: StackConfig { layers: 1, dim: 8, heads: 2, ff_dim: 16 },
            predictor: StackConfig { layers: 1, dim: 6, heads: 2, ff_dim: 12 },
            joint_dim: 8,
            rch: StackConfig { layers: 1, dim: 8, heads: 2, ff_dim: 16 },
            gst: GstConfig { num_tokens: 3, token_dim: 8, conv_channels: vec![4], heads: 2 },
            text_vocab: 9,
            code_vocab: 5,
            num_codebooks: 2,
            feature_dim: 4,
            max_symbols_per_step: 8,
            seed: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ttsx");
        let mut model = TtsModel::new(tiny_config()).unwrap();
        let mut opt = AdamWState::new(&model.params, 0.01);
        // one optimizer step so moments are non-trivial
        let ids: Vec<_> = model.params.ids().collect();
        for (i, id) in ids.iter().enumerate() {
            model.params.grad_mut(*id).fill(0.01 * (i as f64 + 1.0));
        }
        adamw_step(&mut model.params, &mut opt, 1e-3).unwrap();

        save_checkpoint(&path, &tiny_config(), 7, &model.params, Some(&opt), Some("abc123"))
            .unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.has_optimizer());
        assert_eq!(loaded.run_config_hash.as_deref(), Some("abc123"));
        let (restored, ropt, step) = loaded.restore(&path).unwrap();
        assert_eq!(step, 7);
        let ropt = ropt.unwrap();
        assert_eq!(ropt.step, opt.step);
        assert_eq!(ropt.weight_decay, opt.weight_decay);
        for id in model.params.ids() {
            assert_eq!(model.params.value(id), restored.params.value(id), "param drifted");
            assert_eq!(opt.m[id.index()], ropt.m[id.index()], "m drifted");
            assert_eq!(opt.v[id.index()], ropt.v[id.index()], "v drifted");
        }
    }

    #[test]
    fn round_trip_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ttsx");
        let model = TtsModel::new(tiny_config()).unwrap();
        save_checkpoint(&path, &tiny_config(), 0, &model.params, None, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.run_config_hash, None);
        let (restored, opt, step) = loaded.restore(&path).unwrap();
        assert!(opt.is_none());
        assert_eq!(step, 0);
        for id in model.params.ids() {
            assert_eq!(model.params.value(id), restored.params.value(id));
        }
    }

    #[test]
    fn rejects_bad_magic_truncation_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ttsx");
        let model = TtsModel::new(tiny_config()).unwrap();
        save_checkpoint(&path, &tiny_config(), 3, &model.params, None, None).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert_eq!(err.exit_code(), 3);

        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn restore_rejects_renamed_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ttsx");
        let model = TtsModel::new(tiny_config()).unwrap();
        save_checkpoint(&path, &tiny_config(), 1, &model.params, None, None).unwrap();
        let mut file = load_checkpoint(&path).unwrap();
        let v = file.tensors.remove("enc.embed").unwrap();
        file.tensors.insert("enc.embedding".into(), v);
        let err = file.restore(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
