//! Binary checkpoint: magic, version, a JSON header and raw little-endian arrays.
//!
//! ```text
//! "SDCK" | u32 version | u32 header_len | header (JSON) | payload
//! ```
//!
//! The header lists every array with its dtype, shape and byte offset into the
//! payload. Optimizer moments are stored as `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, SubspaceLayout};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Tag identifying the encoder/decoder topology.
pub const ARCHITECTURE: &str = "resconv32-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: String,
    dtype: String,
    model: ModelConfig,
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

/// A restored model and, when saved, its optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real = f32> {
    pub model: Model<T>,
    pub optimizer: Option<Adam<T>>,
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>, optimizer: Option<&Adam<T>>) -> Result<Vec<u8>> {
    let params = model.params();
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[T]| {
        arrays.push(ArrayEntry {
            name,
            dtype: T::DTYPE.to_string(),
            shape: shape.to_vec(),
            offset: payload.len(),
        });
        for &v in data {
            v.write_le(&mut payload);
        }
    };
    for id in params.ids() {
        let t = params.get(id);
        push(params.name(id).to_string(), t.shape(), t.data());
    }
    if let Some(opt) = optimizer {
        let (m, v) = opt.moments();
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Format("optimizer state does not match model parameters".into()));
        }
        for id in params.ids() {
            let shape = params.get(id).shape();
            push(format!("adam.m/{}", params.name(id)), shape, &m[id.0]);
            push(format!("adam.v/{}", params.name(id)), shape, &v[id.0]);
        }
    }
    let header = Header {
        architecture: ARCHITECTURE.to_string(),
        dtype: T::DTYPE.to_string(),
        model: model.config().clone(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config,
            step: o.step_count(),
        }),
        arrays,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("checkpoint truncated in preamble".into()))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32_at(bytes, 4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32_at(bytes, 8)? as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Format("checkpoint truncated in header".into()))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let payload = &bytes[12 + header_len..];
    if header.architecture != ARCHITECTURE {
        return Err(Error::Format(format!(
            "checkpoint architecture {:?} does not match {ARCHITECTURE:?}",
            header.architecture
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!("checkpoint dtype {} but {} requested", header.dtype, T::DTYPE)));
    }

    let read = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
        let entry = header
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing array {name:?}")))?;
        if entry.shape != shape || entry.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "array {name:?} has shape {:?} ({}), expected {shape:?} ({})",
                entry.shape,
                entry.dtype,
                T::DTYPE
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = payload
            .get(entry.offset..entry.offset + n * T::BYTES)
            .ok_or_else(|| Error::Format(format!("checkpoint truncated in array {name:?}")))?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    };

    let mut model = Model::<T>::zeros(header.model.clone())?;
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        let name = model.params().name(id).to_string();
        let shape = model.params().get(id).shape().to_vec();
        let data = read(&name, &shape)?;
        model.params_mut().data_mut(id).copy_from_slice(&data);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(o) => {
            let mut m = Vec::with_capacity(ids.len());
            let mut v = Vec::with_capacity(ids.len());
            for &id in &ids {
                let name = model.params().name(id);
                let shape = model.params().get(id).shape();
                m.push(read(&format!("adam.m/{name}"), shape)?);
                v.push(read(&format!("adam.v/{name}"), shape)?);
            }
            Some(Adam::from_state(o.config, o.step, m, v))
        }
    };
    if model.isa_enabled() {
        model.refresh_inverse()?;
    }
    Ok(Checkpoint { model, optimizer })
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, optimizer: Option<&Adam<T>>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and rejects it unless its subspace layout equals `layout`.
pub fn load_checkpoint_for<T: Real>(path: &Path, layout: &SubspaceLayout) -> Result<Checkpoint<T>> {
    let ck = load_checkpoint::<T>(path)?;
    if ck.model.layout() != layout {
        return Err(Error::Config(format!(
            "checkpoint layout {:?} does not match requested {:?}",
            ck.model.layout().dims(),
            layout.dims()
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Graph;

    fn trained_a_bit() -> (Model<f32>, Adam<f32>) {
        let mut model = Model::<f32>::new(ModelConfig::default(), 11).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), model.params());
        let mut rng = Rng::new(3);
        for _ in 0..2 {
            let mut g = Graph::new();
            let x: Vec<f32> = (0..2 * 3 * 32 * 32).map(|_| rng.next_f64() as f32).collect();
            let xv = g.constant(&[2, 3, 32, 32], x).unwrap();
            let z = model.encode_graph(&mut g, xv).unwrap();
            let s = model.sources_graph(&mut g, z).unwrap();
            let z2 = model.latent_graph(&mut g, s).unwrap();
            let y = model.decode_graph(&mut g, z2).unwrap();
            let loss = g.mean(y);
            model.params_mut().zero_grads();
            g.backward(loss, model.params_mut()).unwrap();
            opt.step(model.params_mut()).unwrap();
            model.refresh_inverse().unwrap();
        }
        (model, opt)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, opt) = trained_a_bit();
        let bytes = encode_checkpoint(&model, Some(&opt)).unwrap();
        let ck = decode_checkpoint::<f32>(&bytes).unwrap();
        for id in model.params().ids() {
            assert_eq!(model.params().get(id).data(), ck.model.params().get(id).data());
        }
        let restored = ck.optimizer.unwrap();
        assert_eq!(restored.step_count(), 2);
        assert_eq!(restored.moments(), opt.moments());
        assert_eq!(ck.model.config(), model.config());
        assert!(ck.model.mixing().is_current(ck.model.params()));
    }

    #[test]
    fn file_round_trip_and_layout_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ck");
        let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
        save_checkpoint(&model, None, &path).unwrap();
        let ck = load_checkpoint_for::<f32>(&path, &SubspaceLayout::default()).unwrap();
        assert!(ck.optimizer.is_none());
        let other = SubspaceLayout::new(&[8, 8, 8, 4, 4]).unwrap();
        assert!(matches!(load_checkpoint_for::<f32>(&path, &other), Err(Error::Config(_))));
        assert!(matches!(
            load_checkpoint::<f32>(&dir.path().join("absent.ck")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
        let bytes = encode_checkpoint(&model, None).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Format(_))));

        // Drop one parameter from the header.
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        header["arrays"].as_array_mut().unwrap().remove(0);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + header_len..]);
        let err = decode_checkpoint::<f32>(&out).unwrap_err();
        assert!(err.to_string().contains("enc.conv1.w"), "{err}");
    }
}
