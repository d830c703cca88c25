//! Checkpointing: a flat archive of named tensors.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic  b"GWCT"
//! u32    format version (1)
//! u32    tensor count
//! per tensor:
//!   u32    name length, then that many UTF-8 bytes
//!   u32    rank
//!   u64[]  extents
//!   u32    dtype tag (0 = f32)
//!   f32[]  raw data, little-endian
//! ```
//! Round trips are bit-exact. The network configuration rides along as a
//! `meta.network_config` tensor so a checkpoint is self-describing.

use std::fs;
use std::path::Path;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::model::StereoModel;
use crate::params::ParamStore;
use crate::tensor::{cast, Scalar};

pub const MAGIC: &[u8; 4] = b"GWCT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
const META_NAME: &str = "meta.network_config";
const META_VERSION: f32 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_archive(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.clone(),
                offset: self.pos,
                msg: format!("truncated: need {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: c.path,
            offset: 0,
            msg: format!("bad magic {magic:?}"),
        });
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            path: c.path,
            offset: 4,
            msg: format!("unsupported format version {version}"),
        });
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format {
                path: path.display().to_string(),
                offset: at,
                msg: "non-UTF8 tensor name".into(),
            })?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let dtype_at = c.pos;
        let dtype = c.u32()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: dtype_at,
                msg: format!("unsupported dtype tag {dtype}"),
            });
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok(tensors)
}

fn meta_tensor(cfg: &NetworkConfig) -> NamedTensor {
    let data = vec![
        META_VERSION,
        cfg.unary_channels as f32,
        cfg.gwc_groups as f32,
        cfg.concat_channels as f32,
        cfg.d_max as f32,
        cfg.base_3d_channels as f32,
        cfg.num_hourglasses as f32,
        cfg.use_gwc_volume as u8 as f32,
        cfg.use_concat_volume as u8 as f32,
        cfg.blocks[0] as f32,
        cfg.blocks[1] as f32,
        cfg.blocks[2] as f32,
        cfg.blocks[3] as f32,
        cfg.norm_mean as f32,
        cfg.norm_std as f32,
    ];
    NamedTensor {
        name: META_NAME.into(),
        shape: vec![data.len()],
        data,
    }
}

fn parse_meta(t: &NamedTensor) -> Result<NetworkConfig> {
    if t.data.len() != 15 || t.data[0] != META_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint meta layout (len {}, version {})",
            t.data.len(),
            t.data.first().copied().unwrap_or(-1.0)
        )));
    }
    let d = &t.data;
    Ok(NetworkConfig {
        unary_channels: d[1] as usize,
        gwc_groups: d[2] as usize,
        concat_channels: d[3] as usize,
        d_max: d[4] as usize,
        base_3d_channels: d[5] as usize,
        num_hourglasses: d[6] as usize,
        use_gwc_volume: d[7] != 0.0,
        use_concat_volume: d[8] != 0.0,
        blocks: [d[9] as usize, d[10] as usize, d[11] as usize, d[12] as usize],
        norm_mean: d[13] as f64,
        norm_std: d[14] as f64,
    })
}

/// Saves every parameter and buffer plus the network configuration.
/// Values are stored as f32 regardless of the run precision.
pub fn save_model<S: Scalar>(
    path: impl AsRef<Path>,
    ps: &ParamStore<S>,
    cfg: &NetworkConfig,
) -> Result<()> {
    let mut tensors = vec![meta_tensor(cfg)];
    for (_, slot) in ps.iter() {
        tensors.push(NamedTensor {
            name: slot.name.clone(),
            shape: slot.shape.clone(),
            data: slot
                .data
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN) as f32)
                .collect(),
        });
    }
    write_archive(path, &tensors)
}

/// Rebuilds the model a checkpoint describes and restores every slot.
/// Names and shapes must match the rebuilt store exactly.
pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<(StereoModel, ParamStore<S>)> {
    let path = path.as_ref();
    let tensors = read_archive(path)?;
    let meta = tensors
        .iter()
        .find(|t| t.name == META_NAME)
        .ok_or_else(|| Error::Config(format!("{}: missing {META_NAME}", path.display())))?;
    let cfg = parse_meta(meta)?;
    let mut ps = ParamStore::<S>::new();
    let model = StereoModel::new(cfg, &mut ps, 0)?;

    let mut seen = 0usize;
    for t in &tensors {
        if t.name == META_NAME {
            continue;
        }
        let id = ps.lookup(&t.name).ok_or_else(|| {
            Error::Config(format!("checkpoint tensor {} not part of this model", t.name))
        })?;
        let slot = ps.slot_mut(id);
        if slot.shape != t.shape {
            return Err(Error::shape(
                "load_checkpoint",
                format!("{}: stored {:?}, model needs {:?}", t.name, t.shape, slot.shape),
            ));
        }
        slot.data = t.data.iter().map(|&v| cast::<S>(v as f64)).collect();
        seen += 1;
    }
    if seen != ps.len() {
        return Err(Error::Config(format!(
            "checkpoint restores {seen} of {} model slots",
            ps.len()
        )));
    }
    Ok((model, ps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("gwcstereo-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let tensors = vec![
            NamedTensor {
                name: "a.weight".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, 3.25e7, -0.0],
            },
            NamedTensor {
                name: "b".into(),
                shape: vec![1],
                data: vec![42.0],
            },
        ];
        let p = tmp("rt.ckpt");
        write_archive(&p, &tensors).unwrap();
        let back = read_archive(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        // writing again produces identical bytes
        let p2 = tmp("rt2.ckpt");
        write_archive(&p2, &tensors).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let p = tmp("magic.ckpt");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_archive(&p).is_err());
    }

    #[test]
    fn model_save_load_restores_everything() {
        let mut cfg = NetworkConfig::desk();
        cfg.unary_channels = 8;
        cfg.gwc_groups = 2;
        cfg.concat_channels = 2;
        cfg.base_3d_channels = 4;
        cfg.d_max = 8;
        cfg.blocks = [1, 1, 1, 1];
        let mut ps = ParamStore::<f32>::new();
        let _model = StereoModel::new(cfg.clone(), &mut ps, 77).unwrap();
        let p = tmp("model.ckpt");
        save_model(&p, &ps, &cfg).unwrap();
        let (model2, ps2) = load_model::<f32>(&p).unwrap();
        assert_eq!(model2.cfg.unary_channels, 8);
        assert_eq!(ps2.len(), ps.len());
        for (id, slot) in ps.iter() {
            let other = ps2.lookup(&slot.name).unwrap();
            assert_eq!(ps2.slot(other).data, slot.data, "{}", slot.name);
            let _ = id;
        }
    }
}
