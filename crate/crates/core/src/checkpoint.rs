//! Trained network plus the centering it was trained with.
//!
//! Layout: magic line, `u32` header length, JSON header (input shape, layer
//! list, centering mode), `u32` tensor count, the weight and bias tensor of
//! every parameterized layer in order, then the centering mean tensor.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Centering, CenteringMode};
use crate::error::{Error, Result};
use crate::nn::{Architecture, LayerParams, LayerSpec, Network};
use crate::tensor::{read_u32, Tensor};

pub const NET_MAGIC: &[u8] = b"ATTRIVIS-NET-v1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    centering: CenteringMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub centering: Centering,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            input_shape: self.network.input_shape(),
            layers: self.network.layers().to_vec(),
            centering: self.centering.mode,
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        w.write_all(NET_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let params: Vec<&LayerParams> = self.network.params().iter().flatten().collect();
        w.write_all(&(2 * params.len() as u32).to_le_bytes())?;
        for p in params {
            p.weight.write_to(w)?;
            p.bias.write_to(w)?;
        }
        self.centering.mean.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Checkpoint> {
        let mut magic = vec![0u8; NET_MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != NET_MAGIC {
            return Err(bad("not an ATTRIVIS-NET-v1 file"));
        }
        let len = read_u32(r)? as usize;
        if len > 1 << 20 {
            return Err(bad(format!("header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        let arch = Architecture(header.layers);
        let count = read_u32(r)? as usize;
        let expected = 2 * arch.0.iter().filter(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })).count();
        if count != expected {
            return Err(bad(format!("{count} tensors for {expected} parameter slots")));
        }
        let mut params = Vec::with_capacity(arch.0.len());
        for layer in &arch.0 {
            params.push(match layer {
                LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. } => {
                    Some(LayerParams { weight: Tensor::read_from(r)?, bias: Tensor::read_from(r)? })
                }
                _ => None,
            });
        }
        let network = Network::from_params(header.input_shape, &arch, params)?;
        let mean = Tensor::read_from(r)?;
        Ok(Checkpoint { network, centering: Centering { mode: header.centering, mean } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::MissingArtifact { path: path.to_path_buf(), producer: "train" });
        }
        Checkpoint::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
