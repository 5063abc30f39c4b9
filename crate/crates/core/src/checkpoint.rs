//! Binary checkpoints: named parameter table, optimizer moments, step
//! counter, and the config hash, all little-endian. A save→load→save cycle
//! is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::optim::AdamState;
use crate::params::Parameterized;

const MAGIC: &[u8; 4] = b"SSMC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    /// name → (shape, payload), in registry order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub moments_m: Vec<Vec<f64>>,
    pub moments_v: Vec<Vec<f64>>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    let mut b = [0u8; 8];
    for v in out.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(out)
}

pub fn save_checkpoint<M: Parameterized>(
    path: &Path,
    model: &M,
    adam: &AdamState,
    config_hash: u64,
) -> Result<()> {
    let params = model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u64(&mut buf, config_hash);
    put_u64(&mut buf, adam.t);
    put_u32(&mut buf, params.len() as u32);
    for (name, tensor) in &params {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, tensor.shape().len() as u32);
        for &d in tensor.shape() {
            put_u32(&mut buf, d as u32);
        }
        put_f64s(&mut buf, tensor.data());
    }
    for (pi, _) in params.iter().enumerate() {
        put_f64s(&mut buf, &adam.m[pi]);
        put_f64s(&mut buf, &adam.v[pi]);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Format(format!(
            "not a checkpoint (magic {:?})",
            magic
        )));
    }
    let version = get_u32(&mut f)?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let config_hash = get_u64(&mut f)?;
    let step = get_u64(&mut f)?;
    let n = get_u32(&mut f)? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = get_u32(&mut f)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CoreError::Format(format!("bad parameter name: {e}")))?;
        let ndim = get_u32(&mut f)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get_u32(&mut f)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = get_f64s(&mut f, numel)?;
        params.push((name, shape, data));
    }
    let mut moments_m = Vec::with_capacity(n);
    let mut moments_v = Vec::with_capacity(n);
    for (_, shape, _) in &params {
        let numel: usize = shape.iter().product();
        moments_m.push(get_f64s(&mut f, numel)?);
        moments_v.push(get_f64s(&mut f, numel)?);
    }
    Ok(Checkpoint {
        config_hash,
        step,
        params,
        moments_m,
        moments_v,
    })
}

/// Restore parameters and moments onto a freshly constructed model. The
/// config hash must match unless `force` is set.
pub fn apply_checkpoint<M: Parameterized>(
    model: &mut M,
    adam: &mut AdamState,
    ckpt: &Checkpoint,
    expect_hash: u64,
    force: bool,
) -> Result<()> {
    if ckpt.config_hash != expect_hash && !force {
        return Err(CoreError::Format(format!(
            "checkpoint config hash {:#018x} does not match {:#018x} (use force to override)",
            ckpt.config_hash, expect_hash
        )));
    }
    let mut params = model.params_mut();
    if params.len() != ckpt.params.len() {
        return Err(CoreError::Format(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            params.len()
        )));
    }
    for (pi, ((name, tensor), (ck_name, ck_shape, ck_data))) in
        params.iter_mut().zip(&ckpt.params).enumerate()
    {
        if name != ck_name || tensor.shape() != &ck_shape[..] {
            return Err(CoreError::Format(format!(
                "parameter {pi} mismatch: model {name} {:?} vs checkpoint {ck_name} {:?}",
                tensor.shape(),
                ck_shape
            )));
        }
        tensor.data_mut().copy_from_slice(ck_data);
        adam.m[pi].copy_from_slice(&ckpt.moments_m[pi]);
        adam.v[pi].copy_from_slice(&ckpt.moments_v[pi]);
    }
    adam.t = ckpt.step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::model::ActionModel;

    fn tiny_model() -> (ActionModel, TrainConfig) {
        let mut cfg = TrainConfig::default();
        cfg.d_raw = 4;
        cfg.d_model = 4;
        cfg.n_state = 2;
        cfg.frames = 3;
        cfg.text_len = 3;
        cfg.k_v = 2;
        (ActionModel::new(&cfg, 9, 0).unwrap(), cfg)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, cfg) = tiny_model();
        let adam = AdamState::new(&model);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ssmc");
        let p2 = dir.path().join("b.ssmc");
        save_checkpoint(&p1, &model, &adam, cfg.hash()).unwrap();

        let ckpt = load_checkpoint(&p1).unwrap();
        let (mut model2, _) = tiny_model();
        let mut adam2 = AdamState::new(&model2);
        apply_checkpoint(&mut model2, &mut adam2, &ckpt, cfg.hash(), false).unwrap();
        save_checkpoint(&p2, &model2, &adam2, ckpt.config_hash).unwrap();

        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn hash_mismatch_requires_force() {
        let (model, cfg) = tiny_model();
        let adam = AdamState::new(&model);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ssmc");
        save_checkpoint(&p, &model, &adam, cfg.hash()).unwrap();
        let ckpt = load_checkpoint(&p).unwrap();
        let (mut model2, _) = tiny_model();
        let mut adam2 = AdamState::new(&model2);
        assert!(matches!(
            apply_checkpoint(&mut model2, &mut adam2, &ckpt, cfg.hash() ^ 5, false),
            Err(CoreError::Format(_))
        ));
        apply_checkpoint(&mut model2, &mut adam2, &ckpt, cfg.hash() ^ 5, true).unwrap();
    }
}
