//! Binary checkpoint format.
//!
//! ```text
//! b"CAMPNET1"
//! u32 little-endian manifest length
//! manifest: UTF-8 JSON {"input_shape": [...], "layers": [LayerSpec...]}
//! parameters: f32 little-endian, flatten_params order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Layer, LayerSpec};
use crate::network::Network;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CAMPNET1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(net: &Network<T>, mut out: W) -> Result<()> {
    let manifest = Manifest { input_shape: net.input_shape().to_vec(), layers: net.specs() };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("manifest too large".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    for p in net.flatten_params() {
        out.write_all(&(p.to_acc() as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<Network<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| Error::Format("checkpoint shorter than its header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {:?}, expected \"CAMPNET1\"", String::from_utf8_lossy(&magic))));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json).map_err(|_| Error::Format("truncated checkpoint manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("invalid checkpoint manifest: {e}")))?;
    let layers = manifest
        .layers
        .into_iter()
        .map(|spec| {
            let w = spec.weight_shape().map(crate::tensor::Tensor::zeros);
            let b = spec.bias_shape().map(crate::tensor::Tensor::zeros);
            Layer::new(spec, w, b)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut net = Network::new(manifest.input_shape, layers)?;
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() != 4 * net.param_count() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameter bytes, manifest needs {}",
            raw.len(),
            4 * net.param_count()
        )));
    }
    let params: Vec<T> = raw
        .chunks_exact(4)
        .map(|c| T::from_acc(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    net.unflatten_params(&params)?;
    Ok(net)
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    write_checkpoint(net, BufWriter::new(File::create(path)?))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Network<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
