//! `.fdpc` checkpoint container: magic "FDPC", version, block count and
//! dims, config JSON, little-endian f64 parameters in layout order, CRC32.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_container, write_container, ByteReader, ByteWriter};

use super::{ComposeMode, ComposedPolicy, NetConfig, PolicyNet, ResidualNet};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FDPC";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_POLICY: u32 = 0;
const KIND_RESIDUAL: u32 = 1;
const KIND_COMPOSED: u32 = 2;

fn put_header(w: &mut ByteWriter, kind: u32, cfg: &NetConfig) {
    w.put_u32(kind);
    w.put_u32(cfg.blocks as u32);
    w.put_u32(cfg.action_dim as u32);
    w.put_u32(cfg.hidden as u32);
    w.put_str(&serde_json::to_string(cfg).expect("config serializes"));
}

fn get_header(r: &mut ByteReader, expect_kind: u32) -> Result<NetConfig> {
    let kind = r.get_u32()?;
    if kind != expect_kind {
        return Err(Error::Format(format!(
            "checkpoint kind {kind}, expected {expect_kind}"
        )));
    }
    let blocks = r.get_u32()? as usize;
    let action_dim = r.get_u32()? as usize;
    let hidden = r.get_u32()? as usize;
    let cfg: NetConfig = serde_json::from_str(&r.get_str()?)
        .map_err(|e| Error::Format(format!("bad config JSON in checkpoint: {e}")))?;
    if cfg.blocks != blocks || cfg.action_dim != action_dim || cfg.hidden != hidden {
        return Err(Error::Corrupt("checkpoint header disagrees with config".into()));
    }
    Ok(cfg)
}

fn put_policy(w: &mut ByteWriter, net: &PolicyNet) {
    put_header(w, KIND_POLICY, net.config());
    w.put_f64_slice(net.params());
}

fn get_policy(r: &mut ByteReader) -> Result<PolicyNet> {
    let cfg = get_header(r, KIND_POLICY)?;
    let params = r.get_f64_vec()?;
    PolicyNet::from_params(cfg, params)
}

fn put_residual(w: &mut ByteWriter, net: &ResidualNet) {
    put_header(w, KIND_RESIDUAL, net.config());
    w.put_str(&serde_json::to_string(&net.mode()).expect("mode serializes"));
    w.put_f64_slice(net.params());
}

fn get_residual(r: &mut ByteReader) -> Result<ResidualNet> {
    let cfg = get_header(r, KIND_RESIDUAL)?;
    let mode: ComposeMode = serde_json::from_str(&r.get_str()?)
        .map_err(|e| Error::Format(format!("bad mode in checkpoint: {e}")))?;
    let params = r.get_f64_vec()?;
    ResidualNet::from_params(cfg, mode, params)
}

pub fn save_policy(path: &Path, net: &PolicyNet) -> Result<()> {
    let mut w = ByteWriter::new();
    put_policy(&mut w, net);
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &w.into_bytes())
}

pub fn load_policy(path: &Path) -> Result<PolicyNet> {
    let payload = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut r = ByteReader::new(&payload);
    let net = get_policy(&mut r)?;
    r.finish()?;
    Ok(net)
}

pub fn save_residual(path: &Path, net: &ResidualNet) -> Result<()> {
    let mut w = ByteWriter::new();
    put_residual(&mut w, net);
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &w.into_bytes())
}

pub fn load_residual(path: &Path) -> Result<ResidualNet> {
    let payload = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut r = ByteReader::new(&payload);
    let net = get_residual(&mut r)?;
    r.finish()?;
    Ok(net)
}

pub fn save_composed(path: &Path, policy: &ComposedPolicy) -> Result<()> {
    let mut w = ByteWriter::new();
    w.put_u32(KIND_COMPOSED);
    put_policy(&mut w, policy.base());
    put_residual(&mut w, policy.residual());
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &w.into_bytes())
}

pub fn load_composed(path: &Path) -> Result<ComposedPolicy> {
    let payload = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut r = ByteReader::new(&payload);
    let kind = r.get_u32()?;
    if kind != KIND_COMPOSED {
        return Err(Error::Format(format!(
            "checkpoint kind {kind}, expected composed"
        )));
    }
    let base = get_policy(&mut r)?;
    let residual = get_residual(&mut r)?;
    r.finish()?;
    ComposedPolicy::new(base, residual)
}
