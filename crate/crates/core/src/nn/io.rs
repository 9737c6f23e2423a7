//! Binary weight bundles.
//!
//! Layout (little endian): magic `VCWB`, `u32` format version, `u32` entry count,
//! then per entry `u16` name length, UTF-8 name, `u32` value count, `f32` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use super::Parameterized;

const MAGIC: &[u8; 4] = b"VCWB";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weight bundle (bad magic)")]
    BadMagic,
    #[error("unsupported bundle version {0}")]
    Version(u32),
    #[error("bundle is missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has {found} values, network expects {expected}")]
    Size { name: String, expected: usize, found: usize },
    #[error("bundle has unexpected tensor `{0}`")]
    Unexpected(String),
}

pub fn save_bundle(model: &dyn Parameterized, mut w: impl Write) -> Result<(), BundleError> {
    let mut entries: Vec<(String, Vec<f32>)> = Vec::new();
    model.visit(&mut |name, p| entries.push((name.to_string(), p.value.clone())));
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, values) in entries {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(values.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, BundleError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Load values into an already-constructed network of the matching architecture.
pub fn load_bundle(model: &mut dyn Parameterized, mut r: impl Read) -> Result<(), BundleError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(BundleError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(BundleError::Version(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8_lossy(&name).into_owned();
        let n = read_u32(&mut r)? as usize;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.insert(name, values);
    }
    let mut err = None;
    model.visit_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.remove(name) {
            None => err = Some(BundleError::Missing(name.to_string())),
            Some(v) if v.len() != p.value.len() => {
                err = Some(BundleError::Size { name: name.to_string(), expected: p.value.len(), found: v.len() })
            }
            Some(v) => p.value = v,
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = tensors.into_keys().next() {
        return Err(BundleError::Unexpected(name));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{Conv2d, Layer, ParamVisitor, ParamVisitorMut};
    use super::*;
    use rand::SeedableRng;

    struct One(Conv2d);
    impl Parameterized for One {
        fn visit(&self, f: &mut ParamVisitor<'_>) {
            self.0.visit("c", f)
        }
        fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
            self.0.visit_mut("c", f)
        }
    }

    #[test]
    fn bundle_round_trip_and_mismatch() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = One(Conv2d::same(2, 3, 3, &mut rng));
        let mut buf = Vec::new();
        save_bundle(&a, &mut buf).unwrap();
        let mut b = One(Conv2d::same(2, 3, 3, &mut rng));
        load_bundle(&mut b, buf.as_slice()).unwrap();
        assert_eq!(a.0.weight.value, b.0.weight.value);

        let mut wrong = One(Conv2d::same(2, 4, 3, &mut rng));
        assert!(matches!(load_bundle(&mut wrong, buf.as_slice()), Err(BundleError::Size { .. })));
        assert!(matches!(load_bundle(&mut b, &b"nope"[..]), Err(BundleError::BadMagic)));
    }
}
