//! Simulated federated training: local updates, exact nearest-neighbour
//! client selection, aggregation, baselines and byte accounting.

mod kdtree;
mod pca;
mod pool;
mod report;
mod select;
mod weights;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::{AnchorTargets, Detector, LossConfig};
use crate::error::{Error, Result};
use crate::eval::{summarize, EvalConfig, EvalSummary, ImageEval};
use crate::grad::{sgd_step, Adam, AdamConfig, ParamStore, SgdConfig};
use crate::impute::{impute, Autoencoder};
use crate::scene::{sample_encoded_len, Sample};
use crate::seed;

pub use kdtree::{squared_distance, KdTree, LEAF_SIZE};
pub use pca::{pca_embed, Embedding, PCA_MAX_ITERS, PCA_TOLERANCE};
pub use pool::par_map;
pub use report::{RoundReport, CSV_HEADER, GAP};
pub use select::{select_clients, Selection};
pub use weights::{aggregate, flatten, unflatten, WeightVector};

/// How local models are combined each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Nearest-neighbour client selection, then averaging.
    Autofed,
    Fedavg,
    /// Averaging, with a proximal pull toward the global model locally.
    Fedprox,
    /// No communication; every client keeps its own model.
    Standalone,
}

/// Local optimiser. Adam state starts fresh at every round, so nothing
/// beyond the weights crosses a round boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalOptimizer {
    #[default]
    Sgd,
    Adam,
}

/// What fills a missing modality before local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Imputation {
    #[default]
    ZeroFill,
    Autoencoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Fraction `c` of clients aggregated under `autofed`.
    pub selection_fraction: f64,
    pub strategy: Strategy,
    #[serde(default)]
    pub prox_mu: f64,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub optimizer: LocalOptimizer,
    /// Used when `optimizer` is `adam`.
    #[serde(default)]
    pub adam: AdamConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub imputation: Imputation,
    /// Evaluate every this many rounds (the last round always); 0 means the
    /// last round only.
    #[serde(default)]
    pub eval_every: usize,
    /// Record a 2-D PCA embedding of the local models each round.
    #[serde(default)]
    pub record_embedding: bool,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            rounds: 30,
            local_epochs: 5,
            selection_fraction: 0.4,
            strategy: Strategy::Autofed,
            prox_mu: 0.01,
            batch_size: 8,
            sgd: SgdConfig::default(),
            optimizer: LocalOptimizer::Sgd,
            adam: AdamConfig::default(),
            loss: LossConfig {
                mce: true,
                p_th: 0.1,
            },
            imputation: Imputation::Autoencoder,
            eval_every: 0,
            record_embedding: false,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "selection fraction {} outside (0, 1]",
                self.selection_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::Config(format!("prox_mu {} must be nonnegative", self.prox_mu)));
        }
        self.sgd.validate()?;
        self.adam.validate()?;
        self.loss.validate()
    }

    /// `M = round(c·N)`, at least one.
    pub fn selected_count(&self, clients: usize) -> usize {
        ((self.selection_fraction * clients as f64).round() as usize).clamp(1, clients.max(1))
    }

    fn evaluates(&self, round: usize) -> bool {
        round + 1 == self.rounds || (self.eval_every > 0 && (round + 1).is_multiple_of(self.eval_every))
    }
}

/// A client's prepared local data.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Local samples after imputation.
    pub samples: Vec<Sample>,
    pub targets: Vec<AnchorTargets>,
    /// Serialized size of the client's raw local data.
    pub raw_bytes: u64,
    pub seed: u64,
}

/// Imputes (when configured) and precomputes anchor targets.
///
/// The autoencoders are frozen and deterministic, so imputing once here is
/// identical to imputing again at the start of every round.
pub fn prepare_clients(
    detector: &Detector,
    datasets: Vec<(usize, Vec<Sample>)>,
    imputation: Imputation,
    autoencoders: Option<(&Autoencoder, &Autoencoder)>,
    master_seed: u64,
    workers: usize,
) -> Result<Vec<ClientState>> {
    let grid = detector.config().grid;
    let c_l = detector.config().lidar_channels;
    par_map(&datasets, workers, |_, (id, samples)| {
        let raw_bytes = samples
            .iter()
            .map(|s| sample_encoded_len(grid, c_l, s.has_lidar(), s.has_radar(), s.annotations.len()) as u64)
            .sum();
        let samples = match (imputation, autoencoders) {
            (Imputation::ZeroFill, _) => samples.clone(),
            (Imputation::Autoencoder, Some((l2r, r2l))) => {
                samples.iter().map(|s| impute(s, l2r, r2l)).collect::<Result<_>>()?
            }
            (Imputation::Autoencoder, None) => {
                return Err(Error::Config("autoencoder imputation requested without autoencoders".into()))
            }
        };
        let targets = samples.iter().map(|s| detector.targets(s)).collect();
        Ok(ClientState {
            id: *id,
            samples,
            targets,
            raw_bytes,
            seed: seed::derive(master_seed, &[seed::stream::CLIENT, *id as u64]),
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub weights: WeightVector,
    /// Mean detection loss of each local epoch.
    pub epoch_losses: Vec<f64>,
    /// The client had no samples and returned its starting point.
    pub skipped: bool,
}

/// Local training: `E` epochs of mini-batch updates from `start`. Under
/// `fedprox` every batch gradient gains `μ·(w − anchor)`.
pub fn client_update(
    detector: &Detector,
    template: &ParamStore,
    client: &ClientState,
    start: &WeightVector,
    anchor: &WeightVector,
    cfg: &FlConfig,
    round: usize,
) -> Result<LocalOutcome> {
    start.check_compatible(anchor)?;
    if cfg.local_epochs == 0 || client.samples.is_empty() {
        return Ok(LocalOutcome {
            weights: start.clone(),
            epoch_losses: Vec::new(),
            skipped: client.samples.is_empty(),
        });
    }
    let mut params = unflatten(start, template)?;
    let mut order: Vec<usize> = (0..client.samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    let mut adam = match cfg.optimizer {
        LocalOptimizer::Sgd => None,
        LocalOptimizer::Adam => Some(Adam::new(cfg.adam, &params)?),
    };
    let prox = (cfg.strategy == Strategy::Fedprox && cfg.prox_mu > 0.0).then_some(cfg.prox_mu);
    for epoch in 0..cfg.local_epochs {
        let mut rng = seed::rng(seed::derive(
            client.seed,
            &[seed::stream::ROUND, round as u64, seed::stream::EPOCH, epoch as u64],
        ));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let b = detector.accumulate_gradients(&mut params, &client.samples[i], &client.targets[i], &cfg.loss, scale)?;
                total += b.total;
            }
            if let Some(mu) = prox {
                let mut offset = 0;
                for (_, t) in params.iter_mut() {
                    let n = t.numel();
                    let g: Vec<f64> = t
                        .data()
                        .iter()
                        .zip(&anchor.values[offset..offset + n])
                        .map(|(w, a)| mu * (w - a))
                        .collect();
                    t.accumulate_grad(&g)?;
                    offset += n;
                }
            }
            match adam.as_mut() {
                Some(a) => a.step(&mut params)?,
                None => sgd_step(&mut params, &cfg.sgd, round)?,
            }
        }
        epoch_losses.push(total / client.samples.len() as f64);
    }
    Ok(LocalOutcome {
        weights: flatten(&params),
        epoch_losses,
        skipped: false,
    })
}

/// Scores `weights` on `test`, spreading inference over `workers`.
pub fn evaluate_weights(
    detector: &Detector,
    template: &ParamStore,
    weights: &WeightVector,
    test: &[Sample],
    eval: &EvalConfig,
    workers: usize,
) -> Result<EvalSummary> {
    let params = unflatten(weights, template)?;
    let images = par_map(test, workers, |_, s| {
        Ok(ImageEval {
            detections: detector.infer(&params, &eval.modality_mask.apply(s))?,
            ground_truth: s.ground_truth(),
        })
    })?;
    summarize(&images, eval)
}

/// Everything a run needs besides its mutable state.
pub struct Federation<'a> {
    pub detector: &'a Detector,
    /// Architecture template and round-0 global weights.
    pub init: &'a ParamStore,
    pub clients: &'a [ClientState],
    pub test: &'a [Sample],
    pub config: &'a FlConfig,
    pub eval: &'a EvalConfig,
    pub workers: usize,
}

/// Resumable training state after some number of rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub next_round: usize,
    pub global: WeightVector,
    /// Per-client models under `standalone`; empty otherwise.
    pub locals: Vec<WeightVector>,
}

impl Federation<'_> {
    pub fn initial_state(&self) -> TrainState {
        let global = flatten(self.init);
        let locals = if self.config.strategy == Strategy::Standalone {
            vec![global.clone(); self.clients.len()]
        } else {
            Vec::new()
        };
        TrainState {
            next_round: 0,
            global,
            locals,
        }
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.eval.validate()?;
        let mut ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("client ids must be unique".into()));
        }
        if self.clients.is_empty() {
            return Err(Error::Config("no clients".into()));
        }
        Ok(())
    }

    /// One communication round from `state`.
    pub fn run_round(&self, state: &TrainState) -> Result<(RoundReport, TrainState)> {
        self.validate()?;
        let cfg = self.config;
        let round = state.next_round;
        let standalone = cfg.strategy == Strategy::Standalone;
        if standalone && state.locals.len() != self.clients.len() {
            return Err(Error::Invariant("standalone state lacks per-client models".into()));
        }
        let outcomes = par_map(self.clients, self.workers, |i, client| {
            let start = if standalone { &state.locals[i] } else { &state.global };
            client_update(self.detector, self.init, client, start, &state.global, cfg, round)
        })?;
        let dim = state.global.dim();
        for o in &outcomes {
            state.global.check_compatible(&o.weights)?;
        }
        let all_ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        let (selected, next) = match cfg.strategy {
            Strategy::Standalone => {
                let locals: Vec<WeightVector> = outcomes.iter().map(|o| o.weights.clone()).collect();
                (all_ids.clone(), TrainState {
                    next_round: round + 1,
                    global: state.global.clone(),
                    locals,
                })
            }
            strategy => {
                let ids = if strategy == Strategy::Autofed {
                    let m = cfg.selected_count(self.clients.len());
                    let pairs: Vec<(usize, &WeightVector)> =
                        all_ids.iter().copied().zip(outcomes.iter().map(|o| &o.weights)).collect();
                    select_clients(&pairs, m)?.ids
                } else {
                    let mut ids = all_ids.clone();
                    ids.sort_unstable();
                    ids
                };
                let chosen: Vec<&WeightVector> = ids
                    .iter()
                    .map(|id| &outcomes[all_ids.iter().position(|x| x == id).expect("selected id exists")].weights)
                    .collect();
                let global = aggregate(&chosen)?;
                (ids, TrainState {
                    next_round: round + 1,
                    global,
                    locals: Vec::new(),
                })
            }
        };
        let eval = if cfg.evaluates(round) {
            Some(if standalone {
                let per_client = next
                    .locals
                    .iter()
                    .map(|w| evaluate_weights(self.detector, self.init, w, self.test, self.eval, self.workers))
                    .collect::<Result<Vec<_>>>()?;
                EvalSummary::mean(&per_client).expect("at least one client")
            } else {
                evaluate_weights(self.detector, self.init, &next.global, self.test, self.eval, self.workers)?
            })
        } else {
            None
        };
        let embedding = if cfg.record_embedding {
            let vs: Vec<&[f64]> = outcomes.iter().map(|o| o.weights.values.as_slice()).collect();
            Some(pca_embed(&vs)?.coords)
        } else {
            None
        };
        let n = self.clients.len() as u64;
        let per_client = if standalone { 0 } else { 8 * dim as u64 };
        let report = RoundReport {
            round,
            strategy: cfg.strategy,
            selected,
            skipped: self
                .clients
                .iter()
                .zip(&outcomes)
                .filter(|(_, o)| o.skipped)
                .map(|(c, _)| c.id)
                .collect(),
            local_losses: outcomes.iter().map(|o| o.epoch_losses.clone()).collect(),
            eval,
            dimension: dim,
            bytes_model_up: per_client * n,
            bytes_model_down: per_client * n,
            bytes_raw_data: self.clients.iter().map(|c| c.raw_bytes).sum(),
            embedding,
        };
        Ok((report, next))
    }

    /// Runs rounds until `config.rounds`, starting from `resume` or from the
    /// initial weights. `observer` sees every report with the state after it.
    pub fn run_training<F>(&self, resume: Option<TrainState>, mut observer: F) -> Result<(Vec<RoundReport>, TrainState)>
    where
        F: FnMut(&RoundReport, &TrainState) -> Result<()>,
    {
        self.validate()?;
        let mut state = resume.unwrap_or_else(|| self.initial_state());
        if state.global.config_hash != self.init.config_hash() {
            return Err(Error::Config("resume state belongs to a different architecture".into()));
        }
        let mut reports = Vec::new();
        while state.next_round < self.config.rounds {
            let (report, next) = self.run_round(&state)?;
            observer(&report, &next)?;
            reports.push(report);
            state = next;
        }
        Ok((reports, state))
    }
}

#[cfg(test)]
mod tests;
