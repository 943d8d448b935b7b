//! Binary checkpoint format.
//!
//! Layout, all integers 32-bit little-endian and values 64-bit little-endian
//! floats:
//!
//! ```text
//! "M2SPE1" | count | { name_len | name (UTF-8) | rank | dims[rank] | values }*
//! ```
//!
//! The encoder configuration travels alongside the weights as rank-1 arrays
//! named `config.<field>`, so a checkpoint is self-describing.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const MAGIC: &[u8; 6] = b"M2SPE1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedArray {
    fn vector(name: &str, values: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            dims: vec![values.len()],
            values,
        }
    }

    fn matrix(name: String, m: &Matrix) -> Self {
        Self {
            name,
            dims: vec![m.rows(), m.cols()],
            values: m.values().to_vec(),
        }
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn u32_of(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| bad(format!("{n} does not fit in 32 bits")))
}

pub fn write_arrays<W: Write>(mut w: W, arrays: &[NamedArray]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&u32_of(arrays.len())?)?;
    for a in arrays {
        let expected: usize = a.dims.iter().product();
        if expected != a.values.len() {
            return Err(bad(format!(
                "array {} has dims {:?} but {} values",
                a.name,
                a.dims,
                a.values.len()
            )));
        }
        w.write_all(&u32_of(a.name.len())?)?;
        w.write_all(a.name.as_bytes())?;
        w.write_all(&u32_of(a.dims.len())?)?;
        for &d in &a.dims {
            w.write_all(&u32_of(d)?)?;
        }
        for v in &a.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

pub fn read_arrays<R: Read>(mut r: R) -> Result<Vec<NamedArray>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = read_u32(&mut r)?;
        let dims = (0..rank)
            .map(|_| read_u32(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        out.push(NamedArray { name, dims, values });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last array"));
    }
    Ok(out)
}

/// Encoder configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let c = &self.config;
        let count = |n: usize| vec![n as f64];
        let mut out = vec![
            NamedArray::vector("config.num_layers", count(c.num_layers)),
            NamedArray::vector("config.num_heads", count(c.num_heads)),
            NamedArray::vector("config.hidden_dim", count(c.hidden_dim)),
            NamedArray::vector("config.ff_dim", count(c.ff_dim)),
            NamedArray::vector("config.K", count(c.num_cls)),
            NamedArray::vector(
                "config.injection_layers",
                c.injection_layers.iter().map(|&l| l as f64).collect(),
            ),
            NamedArray::vector("config.vocab_size", count(c.vocab_size)),
            NamedArray::vector("config.max_seq_len", count(c.max_seq_len)),
            NamedArray::vector("config.lambda", vec![c.lambda]),
            NamedArray::vector("config.reparam_enabled", vec![flag(c.reparam_enabled)]),
            NamedArray::vector(
                "config.injections_enabled",
                vec![flag(c.injections_enabled)],
            ),
        ];
        out.extend(
            self.params
                .named()
                .into_iter()
                .map(|(name, m)| NamedArray::matrix(name, m)),
        );
        out
    }

    pub fn from_arrays(arrays: Vec<NamedArray>) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedArray> {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| bad(format!("missing array {name}")))
        };
        let scalar = |name: &str| -> Result<f64> {
            let a = find(name)?;
            match a.values.as_slice() {
                [v] => Ok(*v),
                _ => Err(bad(format!("{name} should hold one value"))),
            }
        };
        let count = |name: &str| -> Result<usize> {
            let v = scalar(name)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(bad(format!("{name} = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let config = EncoderConfig {
            num_layers: count("config.num_layers")?,
            num_heads: count("config.num_heads")?,
            hidden_dim: count("config.hidden_dim")?,
            ff_dim: count("config.ff_dim")?,
            num_cls: count("config.K")?,
            injection_layers: find("config.injection_layers")?
                .values
                .iter()
                .map(|&v| v as usize)
                .collect(),
            vocab_size: count("config.vocab_size")?,
            max_seq_len: count("config.max_seq_len")?,
            lambda: scalar("config.lambda")?,
            reparam_enabled: scalar("config.reparam_enabled")? != 0.0,
            injections_enabled: scalar("config.injections_enabled")? != 0.0,
        };
        config.validate()?;
        let mut params = EncoderParams::zeros_like(&config)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.arrays_mut()) {
            let a = find(name)?;
            if a.dims != [slot.rows(), slot.cols()] {
                return Err(bad(format!(
                    "{name}: dims {:?} vs expected {:?}",
                    a.dims,
                    slot.shape()
                )));
            }
            slot.values_mut().copy_from_slice(&a.values);
        }
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_arrays(&mut buf, &self.to_arrays()).expect("in-memory write");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_arrays(read_arrays(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let arrays = vec![NamedArray {
            name: "ab".into(),
            dims: vec![1, 2],
            values: vec![1.0, -2.5],
        }];
        let mut buf = Vec::new();
        write_arrays(&mut buf, &arrays).unwrap();
        let mut expect = b"M2SPE1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(b"ab");
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(read_arrays(buf.as_slice()).unwrap(), arrays);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 4,
            ff_dim: 8,
            num_cls: 2,
            injection_layers: vec![2],
            vocab_size: 10,
            max_seq_len: 3,
            lambda: 0.5,
            reparam_enabled: false,
            injections_enabled: true,
        };
        let ck = Checkpoint::new(cfg.clone(), EncoderParams::init(&cfg, 8).unwrap()).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption() {
        assert!(read_arrays(&b"M2SPE0\0\0\0\0"[..]).is_err());
        let cfg = EncoderConfig {
            hidden_dim: 4,
            num_heads: 1,
            ff_dim: 4,
            num_layers: 1,
            injection_layers: vec![1],
            vocab_size: 8,
            max_seq_len: 2,
            ..EncoderConfig::default()
        };
        let ck = Checkpoint::new(cfg.clone(), EncoderParams::init(&cfg, 0).unwrap()).unwrap();
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bytes = ck.to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
