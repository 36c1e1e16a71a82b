//! Resumable training state on disk.
//!
//! Layout (little-endian): magic `FBTS`, `u32` version, `u64` next round,
//! `u64` architecture hash, `u64` dimension, the global weights, `u64`
//! number of per-client models, then each of those.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fed::{TrainState, WeightVector};
use crate::persist::{read_file, write_atomic, Decoder, Encoder};

const MAGIC: &[u8; 4] = b"FBTS";
const VERSION: u32 = 1;

pub fn encode_state(state: &TrainState) -> Vec<u8> {
    let dim = state.global.dim();
    let mut e = Encoder::new();
    e.bytes(MAGIC);
    e.u32(VERSION);
    e.u64(state.next_round as u64);
    e.u64(state.global.config_hash);
    e.u64(dim as u64);
    e.f64s(&state.global.values);
    e.u64(state.locals.len() as u64);
    for l in &state.locals {
        e.f64s(&l.values);
    }
    e.finish()
}

pub fn decode_state(bytes: &[u8]) -> Result<TrainState> {
    let mut d = Decoder::new(bytes);
    d.expect(MAGIC)?;
    let v = d.u32()?;
    if v != VERSION {
        return Err(Error::Format(format!("training state version {v} is not supported")));
    }
    let next_round = d.u64()? as usize;
    let config_hash = d.u64()?;
    let dim = d.u64()? as usize;
    let vector = |d: &mut Decoder| -> Result<WeightVector> {
        Ok(WeightVector {
            values: d.f64s(dim)?,
            config_hash,
        })
    };
    let global = vector(&mut d)?;
    let n = d.u64()? as usize;
    let locals = (0..n).map(|_| vector(&mut d)).collect::<Result<_>>()?;
    d.finish()?;
    Ok(TrainState {
        next_round,
        global,
        locals,
    })
}

pub fn write_state(path: &Path, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode_state(state))
}

pub fn read_state(path: &Path) -> Result<TrainState> {
    decode_state(&read_file(path)?)
}
