use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, SceneParams};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Clear,
    Fog,
    Rain,
    Snow,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::Clear, Weather::Fog, Weather::Rain, Weather::Snow];

    pub fn code(self) -> u8 {
        match self {
            Weather::Clear => 0,
            Weather::Fog => 1,
            Weather::Rain => 2,
            Weather::Snow => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Weather::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown weather code {code}")))
    }
}

/// Relative odds of each weather condition for one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherMix {
    pub clear: f64,
    pub fog: f64,
    pub rain: f64,
    pub snow: f64,
}

impl Default for WeatherMix {
    fn default() -> Self {
        WeatherMix::only(Weather::Clear)
    }
}

impl WeatherMix {
    pub fn only(w: Weather) -> Self {
        let mut m = WeatherMix {
            clear: 0.0,
            fog: 0.0,
            rain: 0.0,
            snow: 0.0,
        };
        *m.weight_mut(w) = 1.0;
        m
    }

    pub fn uniform() -> Self {
        WeatherMix {
            clear: 1.0,
            fog: 1.0,
            rain: 1.0,
            snow: 1.0,
        }
    }

    fn weight_mut(&mut self, w: Weather) -> &mut f64 {
        match w {
            Weather::Clear => &mut self.clear,
            Weather::Fog => &mut self.fog,
            Weather::Rain => &mut self.rain,
            Weather::Snow => &mut self.snow,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [self.clear, self.fog, self.rain, self.snow]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid weather mix {self:?}")));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Weather {
        let w = self.weights();
        let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                return Weather::ALL[i];
            }
            u -= wi;
        }
        // Rounding can leave u just above the last bucket.
        let last = w.iter().rposition(|v| *v > 0.0).expect("validated non-empty");
        Weather::ALL[last]
    }
}

/// Degrades the lidar frame according to `weather`; radar is untouched.
///
/// Fog blinds the lidar beyond `fog_factor · lidar_range`. Rain and snow
/// scatter bright clutter cells near the sensor, snow half again as many.
pub fn apply_weather(sample: &Sample, weather: Weather, seed: u64, params: &SceneParams) -> Sample {
    let mut out = sample.clone();
    out.weather = weather;
    let Some(lidar) = out.lidar.as_mut() else {
        return out;
    };
    let n = params.grid;
    let c = params.lidar_channels;
    let plane = n * n;
    let (ex, ey) = params.ego();
    let data = lidar.data_mut();
    match weather {
        Weather::Clear => {}
        Weather::Fog => {
            let reach = params.fog_factor * params.lidar_range;
            for r in 0..n {
                for col in 0..n {
                    let d = (col as f64 + 0.5 - ex).hypot(r as f64 + 0.5 - ey);
                    if d > reach {
                        for k in 0..c {
                            data[k * plane + r * n + col] = 0.0;
                        }
                    }
                }
            }
        }
        Weather::Rain | Weather::Snow => {
            let factor = if weather == Weather::Snow { 1.5 } else { 1.0 };
            let count = (factor * params.precipitation_mmh * params.clutter_per_mmh).round() as usize;
            let mut rng = seed::rng(seed::derive(seed, &[seed::stream::WEATHER]));
            let radius = params.clutter_radius.min(params.lidar_range);
            let mut placed = 0;
            while placed < count && radius > 0.0 {
                let x = rng.random_range(-radius..radius);
                let y = rng.random_range(-radius..radius);
                if x.hypot(y) > radius {
                    continue;
                }
                placed += 1;
                let col = (ex + x).floor();
                let r = (ey + y).floor();
                if col < 0.0 || r < 0.0 || col >= n as f64 || r >= n as f64 {
                    continue;
                }
                let cell = r as usize * n + col as usize;
                let slice = rng.random_range(0..c - 1);
                data[slice * plane + cell] = 1.0;
                data[(c - 1) * plane + cell] = 1.0;
            }
        }
    }
    out
}

/// Keeps each currently kept annotation with probability `keep_ratio`.
pub fn drop_annotations(sample: &Sample, keep_ratio: f64, seed: u64) -> Result<Sample> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(Error::Config(format!("keep_ratio {keep_ratio} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::ANNOTATION]));
    let mut out = sample.clone();
    for a in &mut out.annotations {
        let keep = rng.random_bool(keep_ratio);
        a.kept &= keep;
    }
    Ok(out)
}

/// Probability of losing each modality. The two events are exclusive, drawn
/// from one uniform number, so a sample never loses both.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityPolicy {
    pub drop_lidar: f64,
    pub drop_radar: f64,
}

impl ModalityPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.drop_lidar) || !ok(self.drop_radar) || self.drop_lidar + self.drop_radar > 1.0 {
            return Err(Error::Config(format!(
                "modality drop probabilities {self:?} must be in [0, 1] and sum to at most 1"
            )));
        }
        Ok(())
    }
}

pub fn drop_modality(sample: &Sample, policy: &ModalityPolicy, seed: u64) -> Result<Sample> {
    policy.validate()?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::MODALITY]));
    let u: f64 = rng.random();
    let mut out = sample.clone();
    if u < policy.drop_lidar {
        if out.radar.is_none() {
            return Err(Error::Policy(format!(
                "sample {} would lose lidar, its only modality",
                sample.id
            )));
        }
        out.lidar = None;
    } else if u < policy.drop_lidar + policy.drop_radar {
        if out.lidar.is_none() {
            return Err(Error::Policy(format!(
                "sample {} would lose radar, its only modality",
                sample.id
            )));
        }
        out.radar = None;
    }
    Ok(out)
}

/// Heterogeneity recipe for one client's local dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub id: usize,
    pub keep_ratio: f64,
    #[serde(default)]
    pub modality: ModalityPolicy,
    #[serde(default)]
    pub weather: WeatherMix,
    pub samples: usize,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "client {}: keep_ratio {} outside (0, 1]",
                self.id, self.keep_ratio
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config(format!("client {} has no samples", self.id)));
        }
        self.modality.validate()?;
        self.weather.validate()
    }

    /// This client's data stream seed under `global_seed`.
    pub fn seed(&self, global_seed: u64) -> u64 {
        seed::derive(global_seed, &[seed::stream::CLIENT, self.id as u64])
    }
}
