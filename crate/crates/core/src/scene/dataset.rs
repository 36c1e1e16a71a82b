use std::collections::HashSet;
use std::path::Path;

use super::{
    apply_weather, drop_annotations, drop_modality, render_sample, Annotation, ClientProfile,
    ModalityPolicy, Sample, SceneParams, Weather, WeatherMix,
};
use crate::error::{Error, Result};
use crate::geom::RotatedBox;
use crate::grad::Tensor;
use crate::persist::{read_file, write_atomic, Decoder, Encoder};
use crate::seed;

/// Which pool a sample id belongs to. Pools never share ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleNamespace {
    Client(usize),
    Test,
    Pretrain,
}

impl SampleNamespace {
    pub fn sample_id(self, index: usize) -> u64 {
        let (ns, client) = match self {
            SampleNamespace::Client(c) => (1u64, c as u64),
            SampleNamespace::Test => (2, 0),
            SampleNamespace::Pretrain => (3, 0),
        };
        (ns << 56) | ((client & 0xff_ffff) << 32) | (index as u64 & 0xffff_ffff)
    }

    pub fn of(id: u64) -> SampleNamespace {
        match id >> 56 {
            1 => SampleNamespace::Client(((id >> 32) & 0xff_ffff) as usize),
            2 => SampleNamespace::Test,
            _ => SampleNamespace::Pretrain,
        }
    }
}

fn heterogeneous_sample(
    id: u64,
    seed: u64,
    params: &SceneParams,
    weather: &WeatherMix,
    modality: &ModalityPolicy,
    keep_ratio: f64,
) -> Result<Sample> {
    let clean = render_sample(id, seed, params)?;
    let w = weather.draw(&mut seed::rng(seed::derive(seed, &[seed::stream::WEATHER])));
    let s = apply_weather(&clean, w, seed, params);
    let s = drop_modality(&s, modality, seed)?;
    drop_annotations(&s, keep_ratio, seed)
}

/// Local datasets, one per profile, in profile order.
pub fn build_client_datasets(
    profiles: &[ClientProfile],
    params: &SceneParams,
    global_seed: u64,
) -> Result<Vec<Vec<Sample>>> {
    params.validate()?;
    let mut ids = HashSet::new();
    for p in profiles {
        p.validate()?;
        if !ids.insert(p.id) {
            return Err(Error::Config(format!("duplicate client id {}", p.id)));
        }
    }
    profiles
        .iter()
        .map(|p| {
            let client_seed = p.seed(global_seed);
            (0..p.samples)
                .map(|i| {
                    let s = seed::derive(client_seed, &[seed::stream::SAMPLE, i as u64]);
                    let id = SampleNamespace::Client(p.id).sample_id(i);
                    heterogeneous_sample(id, s, params, &p.weather, &p.modality, p.keep_ratio)
                })
                .collect()
        })
        .collect()
}

/// Shared, fully annotated evaluation set.
pub fn build_test_set(
    params: &SceneParams,
    count: usize,
    global_seed: u64,
    weather: &WeatherMix,
    modality: &ModalityPolicy,
) -> Result<Vec<Sample>> {
    params.validate()?;
    weather.validate()?;
    let base = seed::derive(global_seed, &[seed::stream::TEST_SET]);
    (0..count)
        .map(|i| {
            let s = seed::derive(base, &[seed::stream::SAMPLE, i as u64]);
            heterogeneous_sample(SampleNamespace::Test.sample_id(i), s, params, weather, modality, 1.0)
        })
        .collect()
}

/// Complete lidar/radar pairs for autoencoder pretraining.
pub fn build_pretrain_pairs(
    params: &SceneParams,
    count: usize,
    global_seed: u64,
    weather: &WeatherMix,
) -> Result<Vec<Sample>> {
    params.validate()?;
    weather.validate()?;
    let base = seed::derive(global_seed, &[seed::stream::PRETRAIN]);
    (0..count)
        .map(|i| {
            let s = seed::derive(base, &[seed::stream::SAMPLE, i as u64]);
            let id = SampleNamespace::Pretrain.sample_id(i);
            heterogeneous_sample(id, s, params, weather, &ModalityPolicy::none(), 1.0)
        })
        .collect()
}

const MAGIC: &[u8; 4] = b"FBDS";
const FORMAT_VERSION: u32 = 1;

/// Fixed fields at the top of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub grid: usize,
    pub lidar_channels: usize,
    pub seed: u64,
}

const FLAG_LIDAR: u8 = 1;
const FLAG_RADAR: u8 = 2;
const FLAG_LIDAR_IMPUTED: u8 = 4;
const FLAG_RADAR_IMPUTED: u8 = 8;
const BOX_BYTES: usize = 5 * 8 + 2;

/// Encoded size in bytes of one sample record, including its length prefix.
/// Depends only on shapes, so it can be evaluated without rendering.
pub fn sample_encoded_len(
    grid: usize,
    lidar_channels: usize,
    has_lidar: bool,
    has_radar: bool,
    boxes: usize,
) -> usize {
    let plane = grid * grid * 8;
    8 + 8 + 1 + 1
        + if has_lidar { lidar_channels * plane } else { 0 }
        + if has_radar { plane } else { 0 }
        + 4
        + boxes * BOX_BYTES
}

fn encode_sample(e: &mut Encoder, s: &Sample, header: &DatasetHeader) -> Result<()> {
    let mut flags = 0;
    let plane = header.grid * header.grid;
    for (present, bit, channels, frame) in [
        (s.lidar.is_some(), FLAG_LIDAR, header.lidar_channels, &s.lidar),
        (s.radar.is_some(), FLAG_RADAR, 1, &s.radar),
    ] {
        if present {
            flags |= bit;
            let len = frame.as_ref().map_or(0, Tensor::numel);
            if len != channels * plane {
                return Err(Error::Invariant(format!(
                    "sample {} frame has {len} values, header implies {}",
                    s.id,
                    channels * plane
                )));
            }
        }
    }
    if s.lidar_imputed {
        flags |= FLAG_LIDAR_IMPUTED;
    }
    if s.radar_imputed {
        flags |= FLAG_RADAR_IMPUTED;
    }
    let len = sample_encoded_len(
        header.grid,
        header.lidar_channels,
        s.lidar.is_some(),
        s.radar.is_some(),
        s.annotations.len(),
    ) - 8;
    e.u64(len as u64);
    e.u64(s.id);
    e.u8(s.weather.code());
    e.u8(flags);
    for frame in [&s.lidar, &s.radar].into_iter().flatten() {
        e.f64s(frame.data());
    }
    e.u32(s.annotations.len() as u32);
    for a in &s.annotations {
        let b = a.bbox;
        e.f64s(&[b.cx, b.cy, b.length, b.width, b.angle]);
        e.u8(b.forward as u8);
        e.u8(a.kept as u8);
    }
    Ok(())
}

fn decode_sample(d: &mut Decoder, header: &DatasetHeader) -> Result<Sample> {
    let len = d.u64()? as usize;
    let mut rec = Decoder::new(d.take(len)?);
    let id = rec.u64()?;
    let weather = Weather::from_code(rec.u8()?)?;
    let flags = rec.u8()?;
    let n = header.grid;
    let mut frame = |present: bool, channels: usize| -> Result<Option<Tensor>> {
        if !present {
            return Ok(None);
        }
        let data = rec.f64s(channels * n * n)?;
        Ok(Some(Tensor::new(vec![channels, n, n], data)?))
    };
    let lidar = frame(flags & FLAG_LIDAR != 0, header.lidar_channels)?;
    let radar = frame(flags & FLAG_RADAR != 0, 1)?;
    let count = rec.u32()? as usize;
    let mut annotations = Vec::with_capacity(count);
    for _ in 0..count {
        let v = rec.f64s(5)?;
        let forward = rec.u8()? != 0;
        let kept = rec.u8()? != 0;
        annotations.push(Annotation {
            bbox: RotatedBox {
                cx: v[0],
                cy: v[1],
                length: v[2],
                width: v[3],
                angle: v[4],
                forward,
            },
            kept,
        });
    }
    rec.finish()?;
    let s = Sample {
        id,
        lidar,
        radar,
        annotations,
        weather,
        lidar_imputed: flags & FLAG_LIDAR_IMPUTED != 0,
        radar_imputed: flags & FLAG_RADAR_IMPUTED != 0,
    };
    s.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(s)
}

pub fn encode_dataset(header: &DatasetHeader, samples: &[Sample]) -> Result<Vec<u8>> {
    let mut e = Encoder::new();
    e.bytes(MAGIC);
    e.u32(FORMAT_VERSION);
    e.u32(header.grid as u32);
    e.u32(header.lidar_channels as u32);
    e.u64(header.seed);
    e.u64(samples.len() as u64);
    for s in samples {
        encode_sample(&mut e, s, header)?;
    }
    Ok(e.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetHeader, Vec<Sample>)> {
    let mut d = Decoder::new(bytes);
    d.expect(MAGIC)?;
    let version = d.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let header = DatasetHeader {
        grid: d.u32()? as usize,
        lidar_channels: d.u32()? as usize,
        seed: d.u64()?,
    };
    let count = d.u64()? as usize;
    let samples = (0..count)
        .map(|_| decode_sample(&mut d, &header))
        .collect::<Result<Vec<_>>>()?;
    d.finish()?;
    Ok((header, samples))
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[Sample]) -> Result<()> {
    write_atomic(path, &encode_dataset(header, samples)?)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    decode_dataset(&read_file(path)?)
}
