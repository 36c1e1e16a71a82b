use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::ParamStore;

/// Flat model weights bound to an architecture by its config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub config_hash: u64,
}

impl WeightVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Bytes on the wire: eight per coordinate.
    pub fn wire_bytes(&self) -> u64 {
        8 * self.values.len() as u64
    }

    pub fn check_compatible(&self, other: &WeightVector) -> Result<()> {
        if self.config_hash != other.config_hash || self.dim() != other.dim() {
            return Err(Error::Invariant(format!(
                "weight vectors disagree: {:016x}/{} vs {:016x}/{}",
                self.config_hash,
                self.dim(),
                other.config_hash,
                other.dim()
            )));
        }
        Ok(())
    }
}

pub fn flatten(params: &ParamStore) -> WeightVector {
    WeightVector {
        values: params.to_flat(),
        config_hash: params.config_hash(),
    }
}

/// A copy of `template` carrying the values of `vector`.
pub fn unflatten(vector: &WeightVector, template: &ParamStore) -> Result<ParamStore> {
    if vector.config_hash != template.config_hash() {
        return Err(Error::Config(format!(
            "weight vector hash {:016x} does not match architecture {:016x}",
            vector.config_hash,
            template.config_hash()
        )));
    }
    let mut out = template.clone();
    out.zero_grad();
    out.load_flat(&vector.values)?;
    Ok(out)
}

/// Coordinate-wise unweighted mean.
pub fn aggregate(vectors: &[&WeightVector]) -> Result<WeightVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Usage("cannot aggregate zero weight vectors".into()))?;
    let mut sum = vec![0.0; first.dim()];
    for v in vectors {
        first.check_compatible(v)?;
        sum.iter_mut().zip(&v.values).for_each(|(s, x)| *s += x);
    }
    let n = vectors.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(WeightVector {
        values: sum,
        config_hash: first.config_hash,
    })
}
