use std::path::Path;

use super::network::{build_network, Network, NetworkConfig};
use crate::codec::{BinReader, BinWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SFCNNv\0\0";
const VERSION: u32 = 1;

/// Layout: magic, version, network config (JSON), scaler hash, then each
/// parameter tensor and each running-statistics buffer as length-prefixed
/// f32 blobs in layer order.
pub fn save_checkpoint(path: &Path, net: &Network<f32>, scaler_hash: &str) -> Result<()> {
    let mut w = BinWriter::with_magic(MAGIC, VERSION);
    w.str(&serde_json::to_string(&net.config).map_err(|e| Error::Format(e.to_string()))?);
    w.str(scaler_hash);
    let params = net.params();
    let buffers = net.buffers();
    w.u32(params.len() as u32);
    w.u32(buffers.len() as u32);
    for blob in params.iter().chain(buffers.iter()) {
        w.u64(blob.len() as u64);
        w.f32s(blob);
    }
    w.write_to(path)
}

/// Returns the network (in inference mode) and the scaler hash recorded
/// at save time.
pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, String)> {
    let mut r = BinReader::open(path, MAGIC, VERSION)?;
    let config: NetworkConfig =
        serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let scaler_hash = r.str()?;
    let mut net = build_network::<f32>(&config, 0)?;
    let (np, nb) = (r.u32()? as usize, r.u32()? as usize);
    if np != net.params().len() || nb != net.buffers().len() {
        return Err(Error::Format("checkpoint tensor count does not match its config".into()));
    }
    let mut read_into = |dst: &mut Vec<f32>| -> Result<()> {
        let n = r.u64()? as usize;
        if n != dst.len() {
            return Err(Error::Format(format!("tensor of {n} values, expected {}", dst.len())));
        }
        *dst = r.f32s(n)?;
        Ok(())
    };
    for p in net.params_mut() {
        read_into(p)?;
    }
    for b in net.buffers_mut() {
        read_into(b)?;
    }
    r.finish()?;
    Ok((net, scaler_hash))
}
