//! Versioned binary checkpoint: JSON config header plus flat f64 parameter
//! records. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::concrete::Rng;
use crate::error::{CoreError, Result};

use super::{PolicyNet, PoolingMode, PredictorNet, SetEncoderConfig};

const MAGIC: &[u8; 8] = b"VDFSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub policy_encoder: SetEncoderConfig,
    pub predictor_encoder: SetEncoderConfig,
    pub pooling: PoolingMode,
    pub n_classes: usize,
    pub value_dim: usize,
    pub descriptor_dim: usize,
}

impl CheckpointMeta {
    pub fn token_dim(&self) -> usize {
        super::token_dim(self.value_dim, self.descriptor_dim)
    }
}

pub fn save_checkpoint(
    path: &Path,
    policy: &PolicyNet,
    predictor: &PredictorNet,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(meta)
        .map_err(|e| CoreError::Format(format!("meta encode: {e}")))?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;

    let names: Vec<String> =
        policy.param_names().into_iter().chain(predictor.param_names()).collect();
    let params: Vec<_> = policy.params().into_iter().chain(predictor.params()).collect();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, p) in names.iter().zip(&params) {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(p.shape().len() as u8).to_le_bytes())?;
        for &d in p.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyNet, PredictorNet, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| CoreError::Format(format!("meta decode: {e}")))?;

    // shapes come from the configs; values are then overwritten record by record
    let mut rng = Rng::new(0);
    let token_dim = meta.token_dim();
    let mut policy = PolicyNet::new(meta.policy_encoder, token_dim, &mut rng)?;
    let mut predictor = PredictorNet::new(
        meta.predictor_encoder,
        token_dim,
        meta.n_classes,
        meta.pooling,
        &mut rng,
    )?;

    let n_params = read_u32(&mut r)? as usize;
    let expect_names: Vec<String> =
        policy.param_names().into_iter().chain(predictor.param_names()).collect();
    if n_params != expect_names.len() {
        return Err(CoreError::Format(format!(
            "checkpoint holds {n_params} params, model wants {}",
            expect_names.len()
        )));
    }
    let mut stored: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u16(&mut r)? as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|_| CoreError::Format("param name not utf-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        stored.push((name, shape, data));
    }

    let mut targets = policy.params_mut();
    targets.extend(predictor.params_mut());
    for ((target, want_name), (name, shape, data)) in
        targets.into_iter().zip(&expect_names).zip(stored)
    {
        if &name != want_name {
            return Err(CoreError::Format(format!(
                "checkpoint param order mismatch: {name} vs {want_name}"
            )));
        }
        if target.shape() != shape.as_slice() {
            return Err(CoreError::Format(format!(
                "param {name}: stored shape {shape:?} vs model {:?}",
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(&data);
    }
    Ok((policy, predictor, meta))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}
