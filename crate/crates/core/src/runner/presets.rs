//! Named starting configurations.
//!
//! `desk` is the default scale: 8 clients × 200 samples on a 64×64 grid for
//! 30 rounds, with a single-core machine in mind. The `motivation-*` presets
//! layer one kind of heterogeneity over it. `paper-scale` restores the full
//! sizes (20 × 2,000 samples, 128×128 grid, 5 local epochs, SGD at 0.01 with
//! decay 0.01) for long runs; its 150 rounds match the ablation horizon,
//! while the desk presets stop at 30, which is past the point where the
//! selection strategy has been seen to converge (10 to 20 rounds).
//!
//! Every name also exists with a `-lite` suffix: 32×32 grid, 40 samples per
//! client, a smaller test set. Those are what the acceptance suite runs.

use std::path::PathBuf;

use super::config::{AeSection, DataConfig, ExperimentConfig, OutputConfig, SweepConfig, SweepParameter, CONFIG_VERSION};
use crate::detector::{AnchorConfig, DetectorConfig, LossConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fed::{FlConfig, Imputation, LocalOptimizer, Strategy};
use crate::grad::{AdamConfig, SgdConfig};
use crate::impute::{AeConfig, PretrainConfig};
use crate::scene::{ClientProfile, ModalityPolicy, SceneParams, WeatherMix};

pub const PRESETS: &[&str] = &[
    "desk",
    "motivation-2.1",
    "motivation-2.2",
    "motivation-2.3",
    "standalone-plus",
    "paper-scale",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Scale {
    grid: usize,
    clients: usize,
    samples: usize,
    test: usize,
    pretrain: usize,
    held_out: usize,
}

const DESK: Scale = Scale {
    grid: 64,
    clients: 8,
    samples: 200,
    test: 200,
    pretrain: 800,
    held_out: 200,
};

const LITE: Scale = Scale {
    grid: 32,
    clients: 8,
    samples: 40,
    test: 60,
    pretrain: 400,
    held_out: 100,
};

const PAPER: Scale = Scale {
    grid: 128,
    clients: 20,
    samples: 2000,
    test: 2000,
    pretrain: 20_000,
    held_out: 2000,
};

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (base, scale) = match name.strip_suffix("-lite") {
        Some(b) => (b, LITE),
        None => (name, DESK),
    };
    let mut cfg = match base {
        "desk" => desk(scale),
        "motivation-2.1" => motivation_annotations(scale),
        "motivation-2.2" => motivation_modalities(scale),
        "motivation-2.3" => motivation_divergence(scale),
        "standalone-plus" => standalone_plus(scale),
        "paper-scale" if scale == DESK => paper_scale(),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name:?}; known: {} (each also with -lite)",
                PRESETS.join(", ")
            )))
        }
    };
    cfg.output.dir = PathBuf::from("runs").join(name);
    cfg.validate()?;
    Ok(cfg)
}

/// Scene parameters scaled to `grid`, with 5-8 cell vehicles.
pub(super) fn scene(grid: usize) -> SceneParams {
    let g = grid as f64;
    let (min_vehicles, max_vehicles) = if grid <= 32 { (1, 4) } else { (2, 6) };
    SceneParams {
        grid,
        min_vehicles,
        max_vehicles,
        min_length: 5.0,
        max_length: 8.0,
        placement_radius: 0.42 * g,
        lidar_range: 0.32 * g,
        radar_range: 0.48 * g,
        intensity_d0: g / 4.0,
        clutter_radius: g / 8.0,
        ..SceneParams::default()
    }
}

fn uniform_clients(s: Scale) -> Vec<ClientProfile> {
    (0..s.clients)
        .map(|id| ClientProfile {
            id,
            keep_ratio: 1.0,
            modality: ModalityPolicy::none(),
            weather: WeatherMix::default(),
            samples: s.samples,
        })
        .collect()
}

fn desk(s: Scale) -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        seed: 1,
        workers: 1,
        data: DataConfig {
            scene: scene(s.grid),
            clients: uniform_clients(s),
            test_samples: s.test,
            test_weather: WeatherMix::default(),
            test_modality: ModalityPolicy::none(),
            pretrain_samples: s.pretrain,
            pretrain_held_out: s.held_out,
            pretrain_weather: WeatherMix::default(),
        },
        model: DetectorConfig {
            grid: s.grid,
            anchors: AnchorConfig {
                scales: vec![6.5],
                ..AnchorConfig::default()
            },
            ..DetectorConfig::default()
        },
        ae: AeSection {
            model: AeConfig {
                grid: s.grid,
                ..AeConfig::default()
            },
            pretrain: PretrainConfig::default(),
        },
        fl: FlConfig {
            rounds: 30,
            local_epochs: 1,
            selection_fraction: 0.4,
            strategy: Strategy::Autofed,
            prox_mu: 0.01,
            batch_size: 4,
            sgd: SgdConfig::default(),
            optimizer: LocalOptimizer::Adam,
            adam: AdamConfig {
                learning_rate: 0.01,
                ..AdamConfig::default()
            },
            loss: LossConfig { mce: true, p_th: 0.1 },
            imputation: Imputation::Autoencoder,
            eval_every: 5,
            record_embedding: false,
        },
        eval: EvalConfig::default(),
        sweep: None,
        output: OutputConfig {
            dir: PathBuf::from("runs/desk"),
            checkpoint_every: 5,
        },
    }
}

/// Half the clients keep only 30% of their annotations.
fn motivation_annotations(s: Scale) -> ExperimentConfig {
    let mut cfg = desk(s);
    let half = cfg.data.clients.len() / 2;
    for c in cfg.data.clients.iter_mut().take(half) {
        c.keep_ratio = 0.3;
    }
    cfg.fl.strategy = Strategy::Fedavg;
    cfg.fl.imputation = Imputation::ZeroFill;
    cfg.sweep = Some(SweepConfig {
        parameter: SweepParameter::PTh,
        values: vec![0.0, 0.1, 0.3],
        seeds: vec![1, 2, 3],
    });
    cfg
}

/// A quarter of the clients lost radar, another quarter lost lidar.
fn motivation_modalities(s: Scale) -> ExperimentConfig {
    let mut cfg = desk(s);
    let quarter = cfg.data.clients.len() / 4;
    for (i, c) in cfg.data.clients.iter_mut().enumerate() {
        if i < quarter {
            c.modality = ModalityPolicy { drop_lidar: 0.0, drop_radar: 1.0 };
        } else if i < 2 * quarter {
            c.modality = ModalityPolicy { drop_lidar: 1.0, drop_radar: 0.0 };
        }
    }
    cfg.fl.strategy = Strategy::Fedavg;
    cfg.fl.loss.mce = false;
    cfg
}

/// 40 clients: annotation level 10%..100% in steps of 10% per block of four,
/// a 25% chance per sample of losing one modality, and all four weathers.
fn motivation_divergence(s: Scale) -> ExperimentConfig {
    let mut cfg = desk(s);
    let samples = (s.samples * s.clients / 40).max(1);
    cfg.data.clients = (0..40)
        .map(|id| ClientProfile {
            id,
            keep_ratio: (id / 4 + 1) as f64 / 10.0,
            modality: ModalityPolicy {
                drop_lidar: 0.125,
                drop_radar: 0.125,
            },
            weather: WeatherMix::uniform(),
            samples,
        })
        .collect();
    cfg.data.test_weather = WeatherMix::uniform();
    cfg.data.pretrain_weather = WeatherMix::uniform();
    cfg.fl.record_embedding = true;
    cfg.sweep = Some(SweepConfig {
        parameter: SweepParameter::SelectionFraction,
        values: vec![0.2, 0.4, 1.0],
        seeds: vec![1, 2, 3],
    });
    cfg
}

/// Standalone training on homogeneous, fully annotated data.
fn standalone_plus(s: Scale) -> ExperimentConfig {
    let mut cfg = desk(s);
    cfg.fl.strategy = Strategy::Standalone;
    cfg.fl.imputation = Imputation::ZeroFill;
    cfg
}

fn paper_scale() -> ExperimentConfig {
    let s = PAPER;
    let mut cfg = desk(s);
    cfg.data.scene = SceneParams::default();
    cfg.model = DetectorConfig {
        width: 32,
        attention_dim: 32,
        rpn_hidden: 64,
        hidden: 128,
        ..DetectorConfig::default()
    };
    cfg.fl.rounds = 150;
    cfg.fl.local_epochs = 5;
    cfg.fl.batch_size = 8;
    cfg.fl.optimizer = LocalOptimizer::Sgd;
    cfg.fl.sgd = SgdConfig::default();
    cfg.fl.eval_every = 10;
    cfg.output.checkpoint_every = 10;
    cfg
}
