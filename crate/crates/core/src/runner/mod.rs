//! Experiment orchestration: configuration, presets, the in-memory
//! pipeline, and the file-backed commands behind the CLI.

mod commands;
mod config;
mod presets;
mod state;

use std::collections::HashSet;

pub use commands::{
    cmd_eval, cmd_gen_data, cmd_pretrain_ae, cmd_report, cmd_sweep, cmd_train, load_data, saved_state, EvalRow, Layout,
    ReportSummary, RunCost, SweepRow, SweepTable, GAP,
};
pub use config::{
    AeSection, DataConfig, ExperimentConfig, OutputConfig, SweepConfig, SweepParameter, CONFIG_VERSION,
};
pub use presets::{preset, PRESETS};
pub use state::{decode_state, encode_state, read_state, write_state};

use crate::detector::Detector;
use crate::error::Result;
use crate::fed::{prepare_clients, Federation, Imputation, RoundReport, TrainState};
use crate::grad::ParamStore;
use crate::impute::{pretrain, Autoencoder, Direction, PretrainReport};
use crate::scene::{build_client_datasets, build_pretrain_pairs, build_test_set, Sample};
use crate::seed;

/// Every sample an experiment uses.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// `(client id, local samples)` in profile order.
    pub clients: Vec<(usize, Vec<Sample>)>,
    pub test: Vec<Sample>,
    pub pretrain: Vec<Sample>,
}

impl ExperimentData {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let local = build_client_datasets(&d.clients, &d.scene, cfg.seed)?;
        Ok(ExperimentData {
            clients: d.clients.iter().map(|p| p.id).zip(local).collect(),
            test: build_test_set(&d.scene, d.test_samples, cfg.seed, &d.test_weather, &d.test_modality)?,
            pretrain: build_pretrain_pairs(&d.scene, d.pretrain_samples, cfg.seed, &d.pretrain_weather)?,
        })
    }

    pub fn client_ids(&self) -> HashSet<u64> {
        self.clients.iter().flat_map(|(_, s)| s.iter().map(|x| x.id)).collect()
    }

    /// Some local sample lacks a modality, so imputation has work to do.
    pub fn needs_imputation(&self) -> bool {
        self.clients
            .iter()
            .flat_map(|(_, s)| s)
            .any(|s| !s.has_lidar() || !s.has_radar())
    }
}

/// Both translation directions after pretraining.
#[derive(Debug, Clone)]
pub struct TrainedAutoencoders {
    pub lidar_to_radar: Autoencoder,
    pub radar_to_lidar: Autoencoder,
    pub reports: [PretrainReport; 2],
}

/// Trains both autoencoders on the pretraining pairs. The last
/// `pretrain_held_out` pairs are held out for scoring.
pub fn pretrain_autoencoders(
    cfg: &ExperimentConfig,
    pairs: &[Sample],
    fl_ids: &HashSet<u64>,
) -> Result<TrainedAutoencoders> {
    let split = pairs.len().saturating_sub(cfg.data.pretrain_held_out);
    let (train, held_out) = pairs.split_at(split);
    let base = seed::derive(cfg.seed, &[seed::stream::PRETRAIN]);
    let run = |dir: Direction, label: u64| -> Result<(Autoencoder, PretrainReport)> {
        let s = seed::derive(base, &[label]);
        let mut ae = Autoencoder::new(cfg.ae.model.clone(), dir, s)?;
        let report = pretrain(&mut ae, train, held_out, fl_ids, &cfg.ae.pretrain, s)?;
        Ok((ae, report))
    };
    let (l2r, r1) = run(Direction::LidarToRadar, 0)?;
    let (r2l, r2) = run(Direction::RadarToLidar, 1)?;
    Ok(TrainedAutoencoders {
        lidar_to_radar: l2r,
        radar_to_lidar: r2l,
        reports: [r1, r2],
    })
}

/// Detector and round-0 weights for `cfg`.
pub fn build_model(cfg: &ExperimentConfig) -> Result<(Detector, ParamStore)> {
    let det = Detector::new(cfg.model.clone())?;
    let init = det.init_params(seed::derive(cfg.seed, &[seed::stream::INIT]))?;
    Ok((det, init))
}

/// What a finished training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<RoundReport>,
    pub state: TrainState,
    pub pretrain: Option<[PretrainReport; 2]>,
}

/// Federated training on in-memory data. `autoencoders` (lidar→radar,
/// radar→lidar) are consulted only when imputation is configured and some
/// sample lacks a modality.
pub fn train_on<F>(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    autoencoders: Option<(&Autoencoder, &Autoencoder)>,
    resume: Option<TrainState>,
    observer: F,
) -> Result<(Vec<RoundReport>, TrainState)>
where
    F: FnMut(&RoundReport, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    let (det, init) = build_model(cfg)?;
    let (imputation, aes) = match (cfg.fl.imputation, data.needs_imputation()) {
        (Imputation::Autoencoder, true) => (Imputation::Autoencoder, autoencoders),
        // Imputation leaves complete samples untouched.
        _ => (Imputation::ZeroFill, None),
    };
    let clients = prepare_clients(&det, data.clients.clone(), imputation, aes, cfg.seed, cfg.workers)?;
    let fed = Federation {
        detector: &det,
        init: &init,
        clients: &clients,
        test: &data.test,
        config: &cfg.fl,
        eval: &cfg.eval,
        workers: cfg.workers,
    };
    fed.run_training(resume, observer)
}

/// Generate, pretrain when needed, train: the whole experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = ExperimentData::generate(cfg)?;
    let aes = if cfg.fl.imputation == Imputation::Autoencoder && data.needs_imputation() {
        Some(pretrain_autoencoders(cfg, &data.pretrain, &data.client_ids())?)
    } else {
        None
    };
    let pair = aes.as_ref().map(|a| (&a.lidar_to_radar, &a.radar_to_lidar));
    let (reports, state) = train_on(cfg, &data, pair, None, |_, _| Ok(()))?;
    Ok(TrainOutcome {
        reports,
        state,
        pretrain: aes.map(|a| a.reports),
    })
}
