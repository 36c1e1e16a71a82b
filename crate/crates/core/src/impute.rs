//! Cross-modal autoencoders that fill in a missing sensor frame from the
//! one that is present.
//!
//! Four stride-2 convolutions (kernel 4, padding 1) halve the grid down to a
//! 1/16 latent map; four stride-2 transposed convolutions bring it back. The
//! first three encoder outputs are added, through 1×1 projections, to the
//! matching decoder outputs.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelTag;
use crate::error::{Error, Result};
use crate::grad::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::scene::Sample;
use crate::seed;

const KERNEL: usize = 4;
const LEAK: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LidarToRadar,
    RadarToLidar,
}

impl Direction {
    pub fn tag(self) -> ModelTag {
        match self {
            Direction::LidarToRadar => ModelTag::LidarToRadar,
            Direction::RadarToLidar => ModelTag::RadarToLidar,
        }
    }

    fn channels(self, lidar_channels: usize) -> (usize, usize) {
        match self {
            Direction::LidarToRadar => (lidar_channels, 1),
            Direction::RadarToLidar => (1, lidar_channels),
        }
    }

    fn source(self, sample: &Sample) -> Option<&Tensor> {
        match self {
            Direction::LidarToRadar => sample.lidar.as_ref(),
            Direction::RadarToLidar => sample.radar.as_ref(),
        }
    }

    fn target(self, sample: &Sample) -> Option<&Tensor> {
        match self {
            Direction::LidarToRadar => sample.radar.as_ref(),
            Direction::RadarToLidar => sample.lidar.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub grid: usize,
    pub lidar_channels: usize,
    /// Encoder output channels; the last entry is the latent width.
    pub widths: [usize; 4],
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            grid: 128,
            lidar_channels: 4,
            widths: [2, 4, 8, 32],
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || !self.grid.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "autoencoder grid {} must be a positive multiple of 16",
                self.grid
            )));
        }
        if self.lidar_channels < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "autoencoder needs at least 2 lidar channels and nonzero widths, got {} / {:?}",
                self.lidar_channels, self.widths
            )));
        }
        Ok(())
    }
}

/// Parameter indices of one layer.
#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: AeConfig,
    direction: Direction,
    encoder: [Layer; 4],
    decoder: [Layer; 4],
    /// `skips[j]` projects encoder output `2 − j` onto decoder output `j`.
    skips: [Layer; 3],
    params: ParamStore,
}

impl Autoencoder {
    pub fn new(config: AeConfig, direction: Direction, seed: u64) -> Result<Self> {
        config.validate()?;
        let (cin, cout) = direction.channels(config.lidar_channels);
        let w = config.widths;
        let mut params = ParamStore::new();
        let mut rng = seed::rng(seed::derive(seed, &[seed::stream::INIT]));
        let mut layer = |params: &mut ParamStore, name: String, shape: [usize; 4], fan_in: usize| -> Result<Layer> {
            // The output layer starts near zero so an untrained model predicts
            // roughly what zero-filling would.
            let std = if name == "dec4" { 0.01 } else { (2.0 / fan_in as f64).sqrt() };
            let t = Tensor::from_fn(&shape, |_| std * rng.sample::<f64, _>(StandardNormal));
            let bias_len = if name.starts_with("dec") { shape[1] } else { shape[0] };
            Ok(Layer {
                w: params.register(format!("{name}.w"), t)?,
                b: params.register(format!("{name}.b"), Tensor::zeros(&[bias_len]))?,
            })
        };
        let kk = KERNEL * KERNEL;
        let enc_in = [cin, w[0], w[1], w[2]];
        let mut encoder = Vec::new();
        for i in 0..4 {
            encoder.push(layer(&mut params, format!("enc{}", i + 1), [w[i], enc_in[i], KERNEL, KERNEL], enc_in[i] * kk)?);
        }
        let dec_io = [(w[3], w[2]), (w[2], w[1]), (w[1], w[0]), (w[0], cout)];
        let mut decoder = Vec::new();
        for (j, &(i, o)) in dec_io.iter().enumerate() {
            // Transposed kernels are C_in × C_out; each output sees about C_in·K²/4 taps.
            decoder.push(layer(&mut params, format!("dec{}", j + 1), [i, o, KERNEL, KERNEL], (i * kk / 4).max(1))?);
        }
        let mut skips = Vec::new();
        for j in 0..3 {
            let c = w[2 - j];
            skips.push(layer(&mut params, format!("skip{}", j + 1), [c, c, 1, 1], c)?);
        }
        Ok(Autoencoder {
            config,
            direction,
            encoder: encoder.try_into().expect("four encoder layers"),
            decoder: decoder.try_into().expect("four decoder layers"),
            skips: skips.try_into().expect("three skips"),
            params,
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn source_shape(&self) -> [usize; 3] {
        let n = self.config.grid;
        [self.direction.channels(self.config.lidar_channels).0, n, n]
    }

    pub fn target_shape(&self) -> [usize; 3] {
        let n = self.config.grid;
        [self.direction.channels(self.config.lidar_channels).1, n, n]
    }

    /// Builds the translation of `x` on `tape` given parameter handles from
    /// [`ParamStore::attach`].
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        if tape.shape(x) != self.source_shape() {
            return Err(Error::Config(format!(
                "{:?} autoencoder expects input {:?}, got {:?}",
                self.direction,
                self.source_shape(),
                tape.shape(x)
            )));
        }
        let mut h = x;
        let mut enc = Vec::with_capacity(4);
        for l in &self.encoder {
            let z = tape.conv2d(h, vars[l.w], 2, 1)?;
            let z = tape.add_channel_bias(z, vars[l.b])?;
            h = tape.leaky_relu(z, LEAK)?;
            enc.push(h);
        }
        for (j, l) in self.decoder.iter().enumerate() {
            let z = tape.conv_transpose2d(h, vars[l.w], 2, 1)?;
            h = tape.add_channel_bias(z, vars[l.b])?;
            if j < 3 {
                let s = &self.skips[j];
                let p = tape.conv2d(enc[2 - j], vars[s.w], 1, 0)?;
                let p = tape.add_channel_bias(p, vars[s.b])?;
                let sum = tape.add(h, p)?;
                h = tape.leaky_relu(sum, LEAK)?;
            }
        }
        Ok(h)
    }

    /// Translates one source frame; also returns the multiply-accumulate count.
    pub fn forward_traced(&self, source: &Tensor) -> Result<(Tensor, u64)> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let x = tape.leaf(source.clone());
        let y = self.forward_on_tape(&mut tape, &vars, x)?;
        Ok((tape.value(y).clone(), tape.macs()))
    }

    pub fn forward(&self, source: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(source)?.0)
    }

    /// Squared reconstruction error of one complete pair.
    fn pair_loss(&self, tape: &mut Tape, vars: &[Var], sample: &Sample) -> Result<Var> {
        let (src, tgt) = pair(self.direction, sample)?;
        let x = tape.leaf(src.clone());
        let y = self.forward_on_tape(tape, vars, x)?;
        tape.mse_loss(y, tgt.data().to_vec())
    }

    /// Mean squared error over `samples`, which must all be complete.
    pub fn mse(&self, samples: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let (src, tgt) = pair(self.direction, s)?;
            let y = self.forward(src)?;
            total += mean_sq_diff(y.data(), tgt.data());
        }
        Ok(total / samples.len().max(1) as f64)
    }
}

fn pair(direction: Direction, s: &Sample) -> Result<(&Tensor, &Tensor)> {
    match (direction.source(s), direction.target(s)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Input(format!("sample {} is not a complete lidar/radar pair", s.id))),
    }
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Error of predicting all zeros for the target modality.
pub fn zero_fill_mse(direction: Direction, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (_, tgt) = pair(direction, s)?;
        total += tgt.data().iter().map(|v| v * v).sum::<f64>() / tgt.numel() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 8,
            adam: AdamConfig {
                learning_rate: 0.003,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub direction: Direction,
    pub epochs: usize,
    /// Mean training loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub held_out_mse: f64,
    pub zero_fill_mse: f64,
}

/// Trains `ae` in place on complete pairs and scores it on `held_out`.
///
/// Fails when any training or held-out id appears in `fl_ids`: the
/// autoencoder must never see the federated clients' data.
pub fn pretrain(
    ae: &mut Autoencoder,
    train: &[Sample],
    held_out: &[Sample],
    fl_ids: &HashSet<u64>,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretraining batch size must be positive".into()));
    }
    if let Some(s) = train.iter().chain(held_out).find(|s| fl_ids.contains(&s.id)) {
        return Err(Error::Config(format!(
            "pretraining sample {} also belongs to federated training data",
            s.id
        )));
    }
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Config("no pretraining pairs".into()));
    }
    let mut adam = Adam::new(cfg.adam, &ae.params)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed::derive(seed, &[seed::stream::PRETRAIN, seed::stream::EPOCH, epoch as u64]));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let vars = ae.params.attach(&mut tape);
                let loss = ae.pair_loss(&mut tape, &vars, &train[i])?;
                total += tape.value(loss).item();
                let scaled = tape.scale(loss, scale)?;
                let grads = tape.backward(scaled)?;
                ae.params.accumulate(&grads, &vars)?;
            }
            adam.step(&mut ae.params)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    Ok(PretrainReport {
        direction: ae.direction,
        epochs: cfg.epochs,
        epoch_losses,
        held_out_mse: ae.mse(held_out)?,
        zero_fill_mse: zero_fill_mse(ae.direction, held_out)?,
    })
}

/// Fills the missing modality of `sample` with the matching autoencoder's
/// translation of the present one. Complete samples come back unchanged.
pub fn impute(sample: &Sample, lidar_to_radar: &Autoencoder, radar_to_lidar: &Autoencoder) -> Result<Sample> {
    if lidar_to_radar.direction != Direction::LidarToRadar || radar_to_lidar.direction != Direction::RadarToLidar {
        return Err(Error::Usage("autoencoders passed in the wrong order".into()));
    }
    let mut out = sample.clone();
    match (&sample.lidar, &sample.radar) {
        (Some(_), Some(_)) => {}
        (Some(l), None) => {
            let mut r = lidar_to_radar.forward(l)?;
            r.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            out.radar = Some(r);
            out.radar_imputed = true;
        }
        (None, Some(r)) => {
            let mut l = radar_to_lidar.forward(r)?;
            let c = l.shape()[0];
            let plane = l.numel() / c;
            let (occ, intensity) = l.data_mut().split_at_mut((c - 1) * plane);
            occ.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            intensity.iter_mut().for_each(|v| *v = v.max(0.0));
            out.lidar = Some(l);
            out.lidar_imputed = true;
        }
        (None, None) => {
            return Err(Error::Input(format!("sample {} has neither lidar nor radar", sample.id)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Detector, DetectorConfig};
    use crate::grad::gradcheck::check_gradients;
    use crate::scene::{build_pretrain_pairs, SceneParams, WeatherMix};

    fn micro() -> AeConfig {
        AeConfig {
            grid: 16,
            lidar_channels: 2,
            widths: [2, 2, 3, 3],
        }
    }

    fn scene(grid: usize) -> SceneParams {
        let g = grid as f64;
        SceneParams {
            grid,
            min_vehicles: 2,
            max_vehicles: 5,
            min_length: g / 16.0,
            max_length: g * 14.0 / 128.0,
            placement_radius: g * 0.45,
            lidar_range: g * 0.3,
            radar_range: g * 0.47,
            clutter_radius: g / 8.0,
            ..SceneParams::default()
        }
    }

    #[test]
    fn shapes_follow_direction() {
        let cfg = AeConfig::default();
        let l2r = Autoencoder::new(cfg.clone(), Direction::LidarToRadar, 1).unwrap();
        let y = l2r.forward(&Tensor::zeros(&[4, 128, 128])).unwrap();
        assert_eq!(y.shape(), [1, 128, 128]);
        let r2l = Autoencoder::new(cfg, Direction::RadarToLidar, 1).unwrap();
        assert_eq!(r2l.forward(&Tensor::zeros(&[1, 128, 128])).unwrap().shape(), [4, 128, 128]);
        assert!(r2l.forward(&Tensor::zeros(&[4, 128, 128])).is_err());
        assert!(AeConfig { grid: 40, ..AeConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_weights_give_constant_bias_output() {
        let mut ae = Autoencoder::new(micro(), Direction::LidarToRadar, 2).unwrap();
        for (name, t) in ae.params_mut().iter_mut() {
            let v = if name == "dec4.b" { 0.25 } else { 0.0 };
            t.data_mut().fill(v);
        }
        let y = ae.forward(&Tensor::zeros(&[2, 16, 16])).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ae = Autoencoder::new(micro(), Direction::RadarToLidar, 3).unwrap();
        let mut rng = seed::rng(4);
        // Nonzero biases keep activations off the leaky-relu kink.
        let mut inputs: Vec<Tensor> = ae.params().iter().map(|(_, t)| t.clone()).collect();
        for t in &mut inputs {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        let src = Tensor::from_fn(&[1, 16, 16], |_| rng.random_range(0.0..1.0));
        // A target close to the current output keeps the loss value small,
        // which keeps central differences out of round-off territory.
        let mut probe = ae.clone();
        for ((_, t), v) in probe.params_mut().iter_mut().zip(&inputs) {
            *t = v.clone();
        }
        let tgt: Vec<f64> = probe
            .forward(&src)
            .unwrap()
            .data()
            .iter()
            .map(|v| v + rng.random_range(-0.1..0.1))
            .collect();
        inputs.push(src);
        let report = check_gradients(&inputs, 1e-4, |tape, vars| {
            let (params, x) = vars.split_at(vars.len() - 1);
            let y = ae.forward_on_tape(tape, params, x[0])?;
            let mse = tape.mse_loss(y, tgt.clone())?;
            tape.scale(mse, tgt.len() as f64)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn macs_stay_below_a_tenth_of_the_detector() {
        let det = Detector::new(DetectorConfig::default()).unwrap();
        let sample = crate::scene::render_sample(1, 1, &scene(128)).unwrap();
        let (_, det_macs) = det.infer_traced(&det.init_params(1).unwrap(), &sample).unwrap();
        for d in [Direction::LidarToRadar, Direction::RadarToLidar] {
            let ae = Autoencoder::new(AeConfig::default(), d, 1).unwrap();
            let src = d.source(&sample).unwrap();
            let (_, macs) = ae.forward_traced(src).unwrap();
            let ratio = macs as f64 / det_macs as f64;
            assert!(ratio < 0.1, "{d:?}: {macs} vs {det_macs} ({ratio:.3})");
        }
    }

    #[test]
    fn zero_epochs_leave_weights_and_overlap_is_rejected() {
        let p = scene(32);
        let pairs = build_pretrain_pairs(&p, 4, 1, &WeatherMix::default()).unwrap();
        let cfg = AeConfig { grid: 32, ..AeConfig::default() };
        let mut ae = Autoencoder::new(cfg, Direction::LidarToRadar, 1).unwrap();
        let before = ae.params().clone();
        let none = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let report = pretrain(&mut ae, &pairs, &pairs, &HashSet::new(), &none, 1).unwrap();
        assert_eq!(ae.params(), &before);
        assert!(report.epoch_losses.is_empty() && report.zero_fill_mse >= 0.0);
        let clash: HashSet<u64> = [pairs[2].id].into();
        let err = pretrain(&mut ae, &pairs, &[], &clash, &PretrainConfig::default(), 1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    fn trained(direction: Direction, seed: u64) -> (Autoencoder, PretrainReport, Vec<Sample>) {
        let p = scene(32);
        let all = build_pretrain_pairs(&p, 660, seed, &WeatherMix::uniform()).unwrap();
        let (train, held) = all.split_at(160);
        let cfg = AeConfig { grid: 32, ..AeConfig::default() };
        let mut ae = Autoencoder::new(cfg, direction, seed).unwrap();
        let report = pretrain(&mut ae, train, held, &HashSet::new(), &PretrainConfig::default(), seed).unwrap();
        (ae, report, held.to_vec())
    }

    #[test]
    fn pretraining_beats_zero_fill() {
        for d in [Direction::LidarToRadar, Direction::RadarToLidar] {
            let (ae, report, held) = trained(d, 5);
            assert!(report.held_out_mse < report.zero_fill_mse, "{report:?}");
            let ups = report.epoch_losses.windows(2).filter(|w| w[1] > w[0] + 1e-6).count();
            assert!(ups * 100 <= report.epoch_losses.len(), "{:?}", report.epoch_losses);
            if d == Direction::RadarToLidar {
                continue;
            }
            // Imputed radar against the held-back truth, sample by sample.
            let better = held
                .iter()
                .filter(|s| {
                    let (src, tgt) = pair(d, s).unwrap();
                    let y = ae.forward(src).unwrap();
                    let zero = tgt.data().iter().map(|v| v * v).sum::<f64>() / tgt.numel() as f64;
                    mean_sq_diff(y.data(), tgt.data()) < zero
                })
                .count();
            assert!(better * 5 >= held.len() * 4, "{better} of {}", held.len());
        }
    }

    #[test]
    fn imputation_routes_and_preserves() {
        let (l2r, _, held) = trained(Direction::LidarToRadar, 6);
        let r2l = Autoencoder::new(l2r.config().clone(), Direction::RadarToLidar, 6).unwrap();
        let full = held[0].clone();
        assert_eq!(impute(&full, &l2r, &r2l).unwrap(), full);

        let no_radar = Sample { radar: None, ..full.clone() };
        let filled = impute(&no_radar, &l2r, &r2l).unwrap();
        assert_eq!(filled.lidar, full.lidar);
        assert!(filled.radar_imputed && !filled.lidar_imputed);
        let mut want = l2r.forward(full.lidar.as_ref().unwrap()).unwrap();
        want.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        assert_eq!(filled.radar.as_ref(), Some(&want));
        filled.validate().unwrap();

        let no_lidar = Sample { lidar: None, ..full.clone() };
        let filled = impute(&no_lidar, &l2r, &r2l).unwrap();
        assert_eq!(filled.radar, full.radar);
        assert!(filled.lidar_imputed);
        filled.validate().unwrap();

        let empty = Sample { lidar: None, radar: None, ..full };
        assert!(matches!(impute(&empty, &l2r, &r2l), Err(Error::Input(_))));
        assert!(impute(&no_lidar, &r2l, &l2r).is_err());
    }
}
