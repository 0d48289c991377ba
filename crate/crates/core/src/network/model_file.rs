//! Binary model file.
//!
//! All integers and reals are little-endian:
//!
//! ```text
//! "FNET"            4 bytes magic
//! version           u32
//! input_side        u32
//! layer_count       u32
//! layer_count × {   kind u8, hyperparameter u32 | f32 }
//! payload           f32 × param_count, layer order, weights then bias
//! crc32(payload)    u32
//! ```
//!
//! Layer kinds: 0 conv (out channels), 1 max-pool (0), 2 dropout (rate as
//! f32), 3 flatten (0), 4 dense (units), 5 dense+softmax (units).

use std::fs;
use std::path::Path;

use super::{LayerParams, LayerSpec, Network, NetworkConfig, NetworkError, CLASS_LABELS};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FNET";
pub const FORMAT_VERSION: u32 = 1;

fn encode_layer(layer: &LayerSpec) -> (u8, u32) {
    match *layer {
        LayerSpec::Conv { out_channels } => (0, out_channels as u32),
        LayerSpec::MaxPool => (1, 0),
        LayerSpec::Dropout { rate } => (2, rate.to_bits()),
        LayerSpec::Flatten => (3, 0),
        LayerSpec::Dense { units } => (4, units as u32),
        LayerSpec::Softmax { units } => (5, units as u32),
    }
}

fn decode_layer(kind: u8, value: u32) -> Result<LayerSpec, NetworkError> {
    Ok(match kind {
        0 => LayerSpec::Conv {
            out_channels: value as usize,
        },
        1 => LayerSpec::MaxPool,
        2 => LayerSpec::Dropout {
            rate: f32::from_bits(value),
        },
        3 => LayerSpec::Flatten,
        4 => LayerSpec::Dense { units: value as usize },
        5 => LayerSpec::Softmax { units: value as usize },
        k => return Err(NetworkError::InvalidConfig(format!("unknown layer kind {k}"))),
    })
}

/// Serializes `net` into the model file format.
pub fn write_model(net: &Network<f32>) -> Result<Vec<u8>, NetworkError> {
    let config = net.config();
    if config.input_channels != 3 {
        return Err(NetworkError::InvalidConfig(format!(
            "model files hold 3-channel networks, this one has {}",
            config.input_channels
        )));
    }
    let mut out = Vec::with_capacity(16 + 5 * config.layers.len() + 4 * net.param_count() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.input_side as u32).to_le_bytes());
    out.extend_from_slice(&(config.layers.len() as u32).to_le_bytes());
    for layer in &config.layers {
        let (kind, value) = encode_layer(layer);
        out.push(kind);
        out.extend_from_slice(&value.to_le_bytes());
    }
    let payload_start = out.len();
    for t in net.param_tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(NetworkError::Truncated {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a model file produced by [`write_model`].
pub fn read_model(bytes: &[u8]) -> Result<Network<f32>, NetworkError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(NetworkError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NetworkError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let input_side = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count.min(1024));
    for _ in 0..layer_count {
        let kind = r.take(1)?[0];
        layers.push(decode_layer(kind, r.u32()?)?);
    }
    let config = NetworkConfig {
        input_side,
        input_channels: 3,
        layers,
        class_labels: CLASS_LABELS.iter().map(|s| s.to_string()).collect(),
    };
    // Zero-initialized template fixes the payload layout.
    let template = Network::<f32>::new(config.clone(), 0)?;
    let payload_len = 4 * template.param_count();
    let payload = r.take(payload_len)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(NetworkError::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(NetworkError::InvalidConfig(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }

    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let params = template
        .layer_params()
        .iter()
        .map(|p| {
            let fill = |t: &Tensor<f32>, values: &mut dyn Iterator<Item = f32>| {
                Tensor::new(t.shape().to_vec(), values.take(t.len()).collect())
            };
            Ok(match p {
                LayerParams::Conv(c) => LayerParams::Conv(crate::tensor::ConvParams::new(
                    fill(&c.kernels, &mut values)?,
                    fill(&c.bias, &mut values)?,
                )?),
                LayerParams::Dense(d) => LayerParams::Dense(crate::tensor::DenseParams::new(
                    fill(&d.weights, &mut values)?,
                    fill(&d.bias, &mut values)?,
                )?),
                LayerParams::None => LayerParams::None,
            })
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    Network::from_parts(config, params, 0)
}

pub fn save_model(net: &Network<f32>, path: impl AsRef<Path>) -> Result<(), NetworkError> {
    fs::write(path, write_model(net)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network<f32>, NetworkError> {
    read_model(&fs::read(path)?)
}
