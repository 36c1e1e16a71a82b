//! Synthetic bird's-eye-view scenes.
//!
//! A [`Scene`] is a set of non-overlapping vehicles around an ego sensor at
//! the grid centre. It is rendered into a multi-channel lidar frame and a
//! single-channel radar frame; heterogeneity (weather, missing annotations,
//! missing modalities) is layered on top per client.

mod dataset;
mod hetero;
mod render;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::rotated_iou;
use crate::geom::RotatedBox;
use crate::grad::Tensor;
use crate::seed;

pub use dataset::{
    build_client_datasets, build_pretrain_pairs, build_test_set, decode_dataset, encode_dataset,
    read_dataset, sample_encoded_len, write_dataset, DatasetHeader, SampleNamespace,
};
pub use hetero::{
    apply_weather, drop_annotations, drop_modality, ClientProfile, ModalityPolicy, Weather,
    WeatherMix,
};
pub use render::{render_lidar, render_radar, vehicle_template};

/// Knobs for scene generation and rendering. Distances are in grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub grid: usize,
    pub lidar_channels: usize,
    pub min_vehicles: usize,
    pub max_vehicles: usize,
    pub min_length: f64,
    pub max_length: f64,
    pub aspect: f64,
    /// Vehicle centres are drawn within this distance of the ego.
    pub placement_radius: f64,
    pub lidar_range: f64,
    pub radar_range: f64,
    /// Lidar intensity falls off as `1 / (1 + d / d0)`.
    pub intensity_d0: f64,
    pub radar_speckle: f64,
    pub radar_floor: f64,
    pub fog_factor: f64,
    /// Clutter cells per mm/h of precipitation.
    pub clutter_per_mmh: f64,
    pub precipitation_mmh: f64,
    pub clutter_radius: f64,
    pub max_overlap_iou: f64,
    pub rejection_budget: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            grid: 128,
            lidar_channels: 4,
            min_vehicles: 2,
            max_vehicles: 8,
            min_length: 8.0,
            max_length: 14.0,
            aspect: 2.5,
            placement_radius: 60.0,
            lidar_range: 40.0,
            radar_range: 60.0,
            intensity_d0: 32.0,
            radar_speckle: 0.1,
            radar_floor: 0.02,
            fog_factor: 0.5,
            clutter_per_mmh: 1.0,
            precipitation_mmh: 30.0,
            clutter_radius: 16.0,
            max_overlap_iou: 0.05,
            rejection_budget: 10_000,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.grid < 4 {
            return bad("grid must be at least 4");
        }
        if self.lidar_channels < 2 {
            return bad("lidar needs at least one occupancy and one intensity channel");
        }
        if self.min_vehicles > self.max_vehicles {
            return bad("min_vehicles exceeds max_vehicles");
        }
        if !(self.min_length > 0.0 && self.min_length <= self.max_length) {
            return bad("vehicle length range is empty or non-positive");
        }
        if self.aspect < 1.0 {
            return bad("aspect must be at least 1");
        }
        if !(self.lidar_range > 0.0 && self.radar_range > self.lidar_range) {
            return bad("need 0 < lidar_range < radar_range");
        }
        let nonneg = [
            self.placement_radius,
            self.intensity_d0,
            self.radar_speckle,
            self.radar_floor,
            self.clutter_per_mmh,
            self.precipitation_mmh,
            self.clutter_radius,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.intensity_d0 == 0.0 {
            return bad("distances, noise levels and rates must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.fog_factor) {
            return bad("fog_factor must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.max_overlap_iou) {
            return bad("max_overlap_iou must lie in [0, 1]");
        }
        Ok(())
    }

    /// Ego position: the centre of the grid.
    pub fn ego(&self) -> (f64, f64) {
        let c = self.grid as f64 / 2.0;
        (c, c)
    }

    pub fn radar_channels(&self) -> usize {
        1
    }
}

/// Vehicles placed around the ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: usize,
    pub seed: u64,
    pub vehicles: Vec<RotatedBox>,
}

/// Rejection-samples a scene whose vehicles pairwise overlap below
/// `max_overlap_iou`.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::SCENE]));
    let count = rng.random_range(params.min_vehicles..=params.max_vehicles);
    let (ex, ey) = params.ego();
    let mut vehicles: Vec<RotatedBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while vehicles.len() < count {
        attempts += 1;
        if attempts > params.rejection_budget {
            return Err(Error::Generation(format!(
                "placed {} of {count} vehicles within {} attempts",
                vehicles.len(),
                params.rejection_budget
            )));
        }
        let length = rng.random_range(params.min_length..=params.max_length);
        let width = length / params.aspect;
        let angle = rng.random_range(0.0..180.0);
        let forward = rng.random_bool(0.5);
        let cx = rng.random_range(0.0..params.grid as f64);
        let cy = rng.random_range(0.0..params.grid as f64);
        if (cx - ex).hypot(cy - ey) > params.placement_radius {
            continue;
        }
        let b = RotatedBox::new(cx, cy, length, width, angle, forward);
        if vehicles
            .iter()
            .all(|v| rotated_iou(v, &b) < params.max_overlap_iou)
        {
            vehicles.push(b);
        }
    }
    Ok(Scene {
        grid: params.grid,
        seed,
        vehicles,
    })
}

/// A ground-truth box plus whether this client's annotator labelled it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: RotatedBox,
    pub kept: bool,
}

/// One training or evaluation instance.
///
/// `annotations` mirrors the full ground truth box for box, with `kept`
/// marking the labels this client actually has. Evaluation uses
/// [`Sample::ground_truth`], which ignores the flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub lidar: Option<Tensor>,
    pub radar: Option<Tensor>,
    pub annotations: Vec<Annotation>,
    pub weather: Weather,
    pub lidar_imputed: bool,
    pub radar_imputed: bool,
}

impl Sample {
    pub fn ground_truth(&self) -> Vec<RotatedBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    pub fn kept_boxes(&self) -> Vec<RotatedBox> {
        self.annotations
            .iter()
            .filter(|a| a.kept)
            .map(|a| a.bbox)
            .collect()
    }

    pub fn has_lidar(&self) -> bool {
        self.lidar.is_some()
    }

    pub fn has_radar(&self) -> bool {
        self.radar.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lidar.is_none() && self.radar.is_none() {
            return Err(Error::Invariant(format!("sample {} has no modality", self.id)));
        }
        if let Some(l) = &self.lidar {
            let c = l.shape()[0];
            let plane = l.numel() / c;
            let (occ, intensity) = l.data().split_at((c - 1) * plane);
            if occ.iter().any(|v| !(0.0..=1.0).contains(v)) || intensity.iter().any(|v| *v < 0.0) {
                return Err(Error::Invariant(format!("sample {} lidar out of range", self.id)));
            }
        }
        if let Some(r) = &self.radar {
            if r.data().iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Invariant(format!("sample {} radar negative", self.id)));
            }
        }
        Ok(())
    }
}

/// Renders a complete, fully annotated, clear-weather sample.
pub fn render_sample(id: u64, seed: u64, params: &SceneParams) -> Result<Sample> {
    let scene = generate_scene(seed, params)?;
    let lidar = render_lidar(&scene, params);
    let radar = render_radar(&scene, params, seed::derive(seed, &[seed::stream::RADAR_NOISE]));
    Ok(Sample {
        id,
        lidar: Some(lidar),
        radar: Some(radar),
        annotations: scene
            .vehicles
            .iter()
            .map(|&bbox| Annotation { bbox, kept: true })
            .collect(),
        weather: Weather::Clear,
        lidar_imputed: false,
        radar_imputed: false,
    })
}

#[cfg(test)]
mod tests;
