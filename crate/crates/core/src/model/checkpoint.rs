//! Parameter checkpoint files.
//!
//! Layout (little-endian): magic `FAMC`, u32 version, u64 model spec hash,
//! u32 tensor count, then per tensor a u32 name length, the UTF-8 name,
//! u8 role (0 weight, 1 bias), u32 rank and u32 dims; finally every value as
//! an f64 in declaration order.

use std::io::{Read, Write};

use super::{ModelSpec, Param, ParameterSet, Role};
use crate::error::{FamError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FAMC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: u64,
    pub params: ParameterSet,
}

pub fn write_checkpoint<W: Write>(mut w: W, spec: &ModelSpec, params: &ParameterSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&spec.hash().to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[match p.role {
            Role::Weight => 0,
            Role::Bias => 1,
        }])?;
        w.write_all(&(p.tensor.shape().len() as u32).to_le_bytes())?;
        for &d in p.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for p in params.iter() {
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint; when `expected` is given the stored spec hash must match.
pub fn read_checkpoint<R: Read>(mut r: R, expected: Option<&ModelSpec>) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FamError::Input("not a parameter checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(FamError::Input(format!("unsupported checkpoint version {version}")));
    }
    let mut hash = [0u8; 8];
    r.read_exact(&mut hash)?;
    let spec_hash = u64::from_le_bytes(hash);
    if let Some(spec) = expected {
        if spec.hash() != spec_hash {
            return Err(FamError::Input(format!(
                "checkpoint was written for a different model than `{}`",
                spec.describe()
            )));
        }
    }
    let n = read_u32(&mut r)? as usize;
    let mut headers = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| FamError::Input("checkpoint tensor name is not UTF-8".into()))?;
        let mut role = [0u8; 1];
        r.read_exact(&mut role)?;
        let role = match role[0] {
            0 => Role::Weight,
            1 => Role::Bias,
            other => return Err(FamError::Input(format!("unknown tensor role {other}"))),
        };
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        headers.push((name, role, shape));
    }
    let mut entries = Vec::with_capacity(n);
    for (name, role, shape) in headers {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push(Param {
            name,
            role,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(Checkpoint {
        spec_hash,
        params: ParameterSet::new(entries)?,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = ModelSpec::desk_conv4(2).unwrap();
        let p = init_params(&spec, 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &p).unwrap();
        let ck = read_checkpoint(buf.as_slice(), Some(&spec)).unwrap();
        assert_eq!(ck.params.to_bits(), p.to_bits());
        assert_eq!(ck.spec_hash, spec.hash());
    }

    #[test]
    fn spec_mismatch_rejected() {
        let spec = ModelSpec::mlp(&[4], &[8], 3).unwrap();
        let other = ModelSpec::mlp(&[4], &[9], 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &init_params(&spec, 0).unwrap()).unwrap();
        assert!(read_checkpoint(buf.as_slice(), Some(&other)).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 1], None).is_err());
    }
}
