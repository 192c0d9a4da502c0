//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `NMTO`, `u32` format version, `u32` length
//! plus JSON header, `u32` network count, every network's layer-size table
//! (`u32` count, then `fan_in, fan_out` pairs), every network's parameters
//! (`u64` count, `f64` values), then every network's Adam state (`u8` flag,
//! `u64` step, first and second moments as `f64`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::mlp::Mlp;
use super::rbn::{RayBendingNet, RbnConfig};
use super::sdf_net::{NeuralSdf, SdfNetConfig};
use crate::error::CheckpointError;
use crate::scalar::Real;
use crate::sdf::ShapeSpec;

pub const MAGIC: &[u8; 4] = b"NMTO";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryRecord {
    Learned(SdfNetConfig),
    Analytic(ShapeSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: u64,
    pub geometry: GeometryRecord,
    pub rbn: RbnConfig,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamRecord {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkRecord {
    pub layers: Vec<(u32, u32)>,
    pub params: Vec<f64>,
    pub adam: Option<AdamRecord>,
}

impl NetworkRecord {
    pub fn capture<T: Real>(net: &Mlp<T>, adam: Option<&Adam<T>>) -> Self {
        let f = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| (l.fan_in as u32, l.fan_out as u32))
                .collect(),
            params: f(net.params()),
            adam: adam.map(|a| AdamRecord {
                step: a.step,
                m: f(&a.m),
                v: f(&a.v),
            }),
        }
    }

    /// Copies the stored parameters into `net`, which must have the same
    /// layer table.
    pub fn restore<T: Real>(&self, net: &mut Mlp<T>) -> Result<(), CheckpointError> {
        let table: Vec<(u32, u32)> = net
            .layers()
            .iter()
            .map(|l| (l.fan_in as u32, l.fan_out as u32))
            .collect();
        if table != self.layers {
            return Err(CheckpointError::Malformed(
                "layer table does not match the configured architecture".into(),
            ));
        }
        for (p, &v) in net.params_mut().iter_mut().zip(&self.params) {
            *p = T::lit(v);
        }
        Ok(())
    }

    pub fn restore_adam<T: Real>(&self, config: AdamConfig) -> Adam<T> {
        let mut adam = Adam::new(self.params.len(), config);
        if let Some(a) = &self.adam {
            adam.step = a.step;
            adam.m = a.m.iter().map(|&v| T::lit(v)).collect();
            adam.v = a.v.iter().map(|&v| T::lit(v)).collect();
        }
        adam
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Present for learned geometry.
    pub sdf: Option<NetworkRecord>,
    pub rbn: NetworkRecord,
}

impl Checkpoint {
    pub fn networks(&self) -> Vec<&NetworkRecord> {
        self.sdf.iter().chain(std::iter::once(&self.rbn)).collect()
    }

    pub fn load_rbn<T: Real>(&self) -> Result<RayBendingNet<T>, CheckpointError> {
        self.header.rbn.validate().map_err(CheckpointError::Malformed)?;
        let mut net = RayBendingNet::zeros(self.header.rbn);
        self.rbn.restore(&mut net.net)?;
        Ok(net)
    }

    /// The learned SDF, or `None` for analytic geometry.
    pub fn load_sdf<T: Real>(&self) -> Result<Option<NeuralSdf<T>>, CheckpointError> {
        match (&self.header.geometry, &self.sdf) {
            (GeometryRecord::Learned(cfg), Some(rec)) => {
                cfg.validate().map_err(CheckpointError::Malformed)?;
                let mut net = NeuralSdf::zeros(*cfg);
                rec.restore(&mut net.net)?;
                Ok(Some(net))
            }
            (GeometryRecord::Analytic(_), None) => Ok(None),
            _ => Err(CheckpointError::Malformed(
                "geometry record and stored networks disagree".into(),
            )),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let nets = self.networks();
        out.extend_from_slice(&(nets.len() as u32).to_le_bytes());
        for n in &nets {
            out.extend_from_slice(&(n.layers.len() as u32).to_le_bytes());
            for &(i, o) in &n.layers {
                out.extend_from_slice(&i.to_le_bytes());
                out.extend_from_slice(&o.to_le_bytes());
            }
        }
        let put = |out: &mut Vec<u8>, v: &[f64]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for n in &nets {
            out.extend_from_slice(&(n.params.len() as u64).to_le_bytes());
            put(&mut out, &n.params);
        }
        for n in &nets {
            match &n.adam {
                Some(a) => {
                    out.push(1);
                    out.extend_from_slice(&a.step.to_le_bytes());
                    put(&mut out, &a.m);
                    put(&mut out, &a.v);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        let expected_nets = match header.geometry {
            GeometryRecord::Learned(_) => 2,
            GeometryRecord::Analytic(_) => 1,
        };
        let count = r.u32()? as usize;
        if count != expected_nets {
            return Err(CheckpointError::Malformed(format!(
                "expected {expected_nets} networks, found {count}"
            )));
        }
        let mut tables = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let mut t = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                t.push((r.u32()?, r.u32()?));
            }
            tables.push(t);
        }
        let mut records = Vec::with_capacity(count);
        for layers in tables {
            let n = r.u64()? as usize;
            let expected: usize = layers.iter().map(|&(i, o)| (i as usize + 1) * o as usize).sum();
            if n != expected {
                return Err(CheckpointError::Malformed(format!(
                    "parameter count {n} does not match the layer table ({expected})"
                )));
            }
            records.push(NetworkRecord {
                layers,
                params: r.f64s(n)?,
                adam: None,
            });
        }
        for rec in records.iter_mut() {
            match r.take(1)?[0] {
                0 => {}
                1 => {
                    let step = r.u64()?;
                    let n = rec.params.len();
                    rec.adam = Some(AdamRecord {
                        step,
                        m: r.f64s(n)?,
                        v: r.f64s(n)?,
                    });
                }
                f => return Err(CheckpointError::Malformed(format!("bad optimizer flag {f}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        let rbn = records.pop().unwrap();
        Ok(Self {
            header,
            sdf: records.pop(),
            rbn,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
