//! Checkpoint file format: magic "PWDR", version, network config, schedule
//! parameters, flat f32 parameter vector, and optional AdamW moment vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::denoiser::{self, DenoiserConfig, DenoiserParams, Padding};
use crate::error::{PowdrError, Result};

pub const PWDR_MAGIC: &[u8; 4] = b"PWDR";
pub const PWDR_VERSION: u32 = 1;

/// AdamW moment vectors and step counter, serialized alongside parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net_cfg: DenoiserConfig,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub params: Vec<f32>,
    pub opt: Option<OptimizerState>,
}

impl Checkpoint {
    /// Reconstruct a parameter store (f64 working precision) from the
    /// serialized f32 vector.
    pub fn to_denoiser_params(&self) -> Result<DenoiserParams> {
        let mut rng = crate::rng::derive_rng(0, crate::rng::stream::INIT, 0);
        let mut p = denoiser::init_params(&self.net_cfg, &mut rng)?;
        if p.data.len() != self.params.len() {
            return Err(PowdrError::contract(format!(
                "checkpoint has {} params, config implies {}",
                self.params.len(),
                p.data.len()
            )));
        }
        for (d, s) in p.data.iter_mut().zip(&self.params) {
            *d = *s as f64;
        }
        Ok(p)
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PWDR_MAGIC)?;
        w.write_all(&PWDR_VERSION.to_le_bytes())?;
        let cfg = &self.net_cfg;
        w.write_all(&(cfg.base_channels as u32).to_le_bytes())?;
        w.write_all(&(cfg.channel_multipliers.len() as u32).to_le_bytes())?;
        for &m in &cfg.channel_multipliers {
            w.write_all(&(m as u32).to_le_bytes())?;
        }
        w.write_all(&(cfg.blocks_per_level as u32).to_le_bytes())?;
        w.write_all(&cfg.dropout_rate.to_le_bytes())?;
        w.write_all(&(cfg.time_embed_dim as u32).to_le_bytes())?;
        w.write_all(&(denoiser::IN_CHANNELS as u32).to_le_bytes())?;
        w.write_all(&(denoiser::OUT_CHANNELS as u32).to_le_bytes())?;
        w.write_all(&(self.t_max as u32).to_le_bytes())?;
        w.write_all(&self.beta_start.to_le_bytes())?;
        w.write_all(&self.beta_end.to_le_bytes())?;
        w.write_all(&u32::from(self.opt.is_some()).to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for &p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        if let Some(opt) = &self.opt {
            w.write_all(&opt.step.to_le_bytes())?;
            for &x in opt.m.iter().chain(opt.v.iter()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| PowdrError::format(0, "truncated magic"))?;
        if &magic != PWDR_MAGIC {
            return Err(PowdrError::format(0, "bad magic, expected \"PWDR\""));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        macro_rules! u32le {
            () => {{
                r.read_exact(&mut b4)
                    .map_err(|_| PowdrError::format(4, "truncated header"))?;
                u32::from_le_bytes(b4)
            }};
        }
        let version = u32le!();
        if version != PWDR_VERSION {
            return Err(PowdrError::format(4, format!("unsupported version {version}")));
        }
        let base_channels = u32le!() as usize;
        let n_mult = u32le!() as usize;
        if n_mult == 0 || n_mult > 16 {
            return Err(PowdrError::format(12, "implausible multiplier count"));
        }
        let mut channel_multipliers = Vec::with_capacity(n_mult);
        for _ in 0..n_mult {
            channel_multipliers.push(u32le!() as usize);
        }
        let blocks_per_level = u32le!() as usize;
        r.read_exact(&mut b8)
            .map_err(|_| PowdrError::format(0, "truncated header"))?;
        let dropout_rate = f64::from_le_bytes(b8);
        let time_embed_dim = u32le!() as usize;
        let in_ch = u32le!() as usize;
        let out_ch = u32le!() as usize;
        if in_ch != denoiser::IN_CHANNELS || out_ch != denoiser::OUT_CHANNELS {
            return Err(PowdrError::format(0, "channel counts must be 16 in / 8 out"));
        }
        let t_max = u32le!() as usize;
        r.read_exact(&mut b8)
            .map_err(|_| PowdrError::format(0, "truncated schedule"))?;
        let beta_start = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)
            .map_err(|_| PowdrError::format(0, "truncated schedule"))?;
        let beta_end = f64::from_le_bytes(b8);
        let has_opt = u32le!() != 0;
        r.read_exact(&mut b8)
            .map_err(|_| PowdrError::format(0, "truncated param count"))?;
        let n_params = u64::from_le_bytes(b8) as usize;
        let net_cfg = DenoiserConfig {
            base_channels,
            channel_multipliers,
            blocks_per_level,
            dropout_rate,
            time_embed_dim,
            padding: Padding::Zero,
        };
        net_cfg.validate()?;
        if denoiser::param_count(&net_cfg) != n_params {
            return Err(PowdrError::format(
                0,
                "parameter count does not match declared config",
            ));
        }
        let read_f32s = |r: &mut BufReader<File>, n: usize| -> Result<Vec<f32>> {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|_| PowdrError::format(0, "truncated parameter payload"))?;
            Ok(buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let params = read_f32s(&mut r, n_params)?;
        let opt = if has_opt {
            r.read_exact(&mut b8)
                .map_err(|_| PowdrError::format(0, "truncated optimizer step"))?;
            let step = u64::from_le_bytes(b8);
            let m = read_f32s(&mut r, n_params)?;
            let v = read_f32s(&mut r, n_params)?;
            Some(OptimizerState { step, m, v })
        } else {
            None
        };
        Ok(Checkpoint {
            net_cfg,
            t_max,
            beta_start,
            beta_end,
            params,
            opt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn roundtrip_with_and_without_optimizer() {
        let cfg = DenoiserConfig {
            base_channels: 2,
            channel_multipliers: vec![1, 2],
            blocks_per_level: 1,
            dropout_rate: 0.1,
            time_embed_dim: 4,
            padding: Padding::Zero,
        };
        let n = denoiser::param_count(&cfg);
        let mut rng = crate::rng::derive_rng(1, crate::rng::stream::INIT, 0);
        let params: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pwdr");
        let ck = Checkpoint {
            net_cfg: cfg.clone(),
            t_max: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            params: params.clone(),
            opt: Some(OptimizerState {
                step: 7,
                m: vec![0.5; n],
                v: vec![0.25; n],
            }),
        };
        ck.write(&p).unwrap();
        assert_eq!(Checkpoint::read(&p).unwrap(), ck);

        let ck2 = Checkpoint {
            opt: None,
            ..ck.clone()
        };
        ck2.write(&p).unwrap();
        assert_eq!(Checkpoint::read(&p).unwrap(), ck2);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pwdr");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(Checkpoint::read(&p).is_err());
    }
}
