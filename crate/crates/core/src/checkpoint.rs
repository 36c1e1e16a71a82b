//! Weight files: a small versioned header and the flat parameter vector.
//!
//! Layout (little-endian): magic `FBWT`, `u32` format version, `u64`
//! architecture hash, `u8` model tag, `u64` value count, then the values as
//! IEEE-754 doubles in parameter-store order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::persist::{read_file, write_atomic, Decoder, Encoder};

const MAGIC: &[u8; 4] = b"FBWT";
const FORMAT_VERSION: u32 = 1;

/// Which network a weight file belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelTag {
    Detector,
    LidarToRadar,
    RadarToLidar,
}

impl ModelTag {
    fn code(self) -> u8 {
        match self {
            ModelTag::Detector => 0,
            ModelTag::LidarToRadar => 1,
            ModelTag::RadarToLidar => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ModelTag::Detector),
            1 => Ok(ModelTag::LidarToRadar),
            2 => Ok(ModelTag::RadarToLidar),
            _ => Err(Error::Format(format!("unknown model tag {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub tag: ModelTag,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, tag: ModelTag) -> Self {
        Checkpoint {
            config_hash: store.config_hash(),
            tag,
            values: store.to_flat(),
        }
    }

    /// Copies the values into `store` after checking architecture and tag.
    pub fn load_into(&self, store: &mut ParamStore, tag: ModelTag) -> Result<()> {
        if self.tag != tag {
            return Err(Error::Config(format!(
                "checkpoint holds {:?} weights, expected {tag:?}",
                self.tag
            )));
        }
        if self.config_hash != store.config_hash() {
            return Err(Error::Config(format!(
                "checkpoint architecture hash {:016x} does not match model {:016x}",
                self.config_hash,
                store.config_hash()
            )));
        }
        store.load_flat(&self.values)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(MAGIC);
        e.u32(FORMAT_VERSION);
        e.u64(self.config_hash);
        e.u8(self.tag.code());
        e.u64(self.values.len() as u64);
        e.f64s(&self.values);
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes);
        d.expect(MAGIC)?;
        let version = d.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let config_hash = d.u64()?;
        let tag = ModelTag::from_code(d.u8()?)?;
        let n = d.u64()? as usize;
        let values = d.f64s(n)?;
        d.finish()?;
        Ok(Checkpoint {
            config_hash,
            tag,
            values,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    fn store(shape: &[usize]) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_fn(shape, |i| i as f64 * 0.5 - 1.0)).unwrap();
        s
    }

    #[test]
    fn round_trip_and_mismatch() {
        let s = store(&[2, 3]);
        let ck = Checkpoint::from_store(&s, ModelTag::Detector);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);

        let mut target = store(&[2, 3]);
        target.load_flat(&[0.0; 6]).unwrap();
        back.load_into(&mut target, ModelTag::Detector).unwrap();
        assert_eq!(target.to_flat(), s.to_flat());

        let mut other = store(&[3, 2]);
        assert!(matches!(back.load_into(&mut other, ModelTag::Detector), Err(Error::Config(_))));
        assert!(matches!(back.load_into(&mut target, ModelTag::LidarToRadar), Err(Error::Config(_))));

        let bytes = ck.encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }
}
