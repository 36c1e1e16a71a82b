//! The file-backed commands. Every write goes through a temp file and a
//! rename, so an interrupted command never leaves a truncated artifact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, SweepParameter};
use super::state::{read_state, write_state};
use super::{build_model, pretrain_autoencoders, train_on, ExperimentData, TrainOutcome};
use crate::checkpoint::{Checkpoint, ModelTag};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, EvalSummary, ModalityMask};
use crate::fed::{evaluate_weights, Imputation, RoundReport, Strategy, TrainState, WeightVector, CSV_HEADER};
use crate::impute::{Autoencoder, Direction, PretrainReport};
use crate::persist::{read_file, write_atomic};
use crate::scene::{read_dataset, write_dataset, DatasetHeader, Sample};

pub use crate::fed::GAP;

/// Where each artifact lives under an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn of(cfg: &ExperimentConfig) -> Self {
        Layout::new(&cfg.output.dir)
    }

    pub fn client_data(&self, id: usize) -> PathBuf {
        self.root.join(format!("data/client-{id:03}.fbds"))
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data/test.fbds")
    }

    pub fn pretrain_data(&self) -> PathBuf {
        self.root.join("data/pretrain.fbds")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }

    pub fn autoencoder(&self, dir: Direction) -> PathBuf {
        self.root.join(match dir {
            Direction::LidarToRadar => "ae/lidar-to-radar.fbwt",
            Direction::RadarToLidar => "ae/radar-to-lidar.fbwt",
        })
    }

    pub fn pretrain_report(&self) -> PathBuf {
        self.root.join("ae/pretrain_report.json")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("train/resolved_config.toml")
    }

    pub fn rounds_ndjson(&self) -> PathBuf {
        self.root.join("train/rounds.ndjson")
    }

    pub fn rounds_csv(&self) -> PathBuf {
        self.root.join("train/rounds.csv")
    }

    pub fn train_state(&self) -> PathBuf {
        self.root.join("train/state.fbts")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("train/model.fbwt")
    }

    pub fn client_model(&self, id: usize) -> PathBuf {
        self.root.join(format!("train/models/client-{id:03}.fbwt"))
    }

    pub fn round_checkpoint(&self, round: usize) -> PathBuf {
        self.root.join(format!("train/checkpoints/round-{round:04}.fbwt"))
    }

    pub fn round_state(&self, round: usize) -> PathBuf {
        self.root.join(format!("train/checkpoints/round-{round:04}.fbts"))
    }

    pub fn eval_rows(&self, checkpoint: &Path) -> PathBuf {
        let stem = checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        self.root.join(format!("eval/{stem}.ndjson"))
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("sweep/sweep.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn timestamp() -> String {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", t.as_secs(), t.subsec_millis())
}

fn header(cfg: &ExperimentConfig) -> DatasetHeader {
    DatasetHeader {
        grid: cfg.data.scene.grid,
        lidar_channels: cfg.data.scene.lidar_channels,
        seed: cfg.seed,
    }
}

/// Writes every dataset plus a manifest of SHA-256 hashes, keyed by path
/// relative to the output directory. Returns the manifest.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<BTreeMap<String, String>> {
    let layout = Layout::of(cfg);
    let data = ExperimentData::generate(cfg)?;
    let h = header(cfg);
    let mut files: Vec<(PathBuf, &[Sample])> = data
        .clients
        .iter()
        .map(|(id, s)| (layout.client_data(*id), s.as_slice()))
        .collect();
    files.push((layout.test_data(), &data.test));
    files.push((layout.pretrain_data(), &data.pretrain));
    let mut manifest = BTreeMap::new();
    for (path, samples) in files {
        write_dataset(&path, &h, samples)?;
        let rel = path.strip_prefix(&layout.root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
        manifest.insert(rel, sha256_hex(&read_file(&path)?));
    }
    write_atomic(&layout.manifest(), to_json(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn read_checked(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let (h, samples) = read_dataset(path)?;
    let want = header(cfg);
    if h.grid != want.grid || h.lidar_channels != want.lidar_channels {
        return Err(Error::Config(format!(
            "{} holds {}×{} grids with {} lidar channels; config wants {}×{} with {}",
            path.display(),
            h.grid,
            h.grid,
            h.lidar_channels,
            want.grid,
            want.grid,
            want.lidar_channels
        )));
    }
    Ok(samples)
}

/// Reads the datasets written by [`cmd_gen_data`].
pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let layout = Layout::of(cfg);
    let clients = cfg
        .data
        .clients
        .iter()
        .map(|p| Ok((p.id, read_checked(&layout.client_data(p.id), cfg)?)))
        .collect::<Result<_>>()?;
    Ok(ExperimentData {
        clients,
        test: read_checked(&layout.test_data(), cfg)?,
        pretrain: read_checked(&layout.pretrain_data(), cfg)?,
    })
}

/// Pretrains both autoencoders on the stored pairs and saves them with a
/// report that includes the zero-fill baseline.
pub fn cmd_pretrain_ae(cfg: &ExperimentConfig) -> Result<[PretrainReport; 2]> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let data = load_data(cfg)?;
    let aes = pretrain_autoencoders(cfg, &data.pretrain, &data.client_ids())?;
    for ae in [&aes.lidar_to_radar, &aes.radar_to_lidar] {
        Checkpoint::from_store(ae.params(), ae.direction().tag()).write(&layout.autoencoder(ae.direction()))?;
    }
    write_atomic(&layout.pretrain_report(), to_json(&aes.reports)?.as_bytes())?;
    Ok(aes.reports)
}

fn load_autoencoder(cfg: &ExperimentConfig, layout: &Layout, dir: Direction) -> Result<Autoencoder> {
    let mut ae = Autoencoder::new(cfg.ae.model.clone(), dir, 0)?;
    Checkpoint::read(&layout.autoencoder(dir))?.load_into(ae.params_mut(), dir.tag())?;
    Ok(ae)
}

fn checkpoint_of(w: &WeightVector) -> Checkpoint {
    Checkpoint {
        config_hash: w.config_hash,
        tag: ModelTag::Detector,
        values: w.values.clone(),
    }
}

fn csv_text(reports: &[RoundReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn read_round_log(path: &Path) -> Result<Vec<(RoundReport, Option<String>)>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(RoundReport::from_ndjson_line)
        .collect()
}

/// Trains per the config and writes the resolved config, NDJSON and CSV
/// round logs, periodic resumable state and the final weights.
///
/// If the output directory already holds state from a run with the same
/// resolved config, training continues from it; the continuation is
/// identical to an uninterrupted run.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let data = load_data(cfg)?;
    let aes = if cfg.fl.imputation == Imputation::Autoencoder && data.needs_imputation() {
        Some((
            load_autoencoder(cfg, &layout, Direction::LidarToRadar)?,
            load_autoencoder(cfg, &layout, Direction::RadarToLidar)?,
        ))
    } else {
        None
    };

    let resolved = cfg.to_toml_string()?;
    let same_run = layout.train_state().exists()
        && read_file(&layout.resolved_config()).ok().as_deref() == Some(resolved.as_bytes());
    let (resume, mut lines, mut reports) = if same_run {
        let state = read_state(&layout.train_state())?;
        let mut lines = Vec::new();
        let mut reports = Vec::new();
        for (r, stamp) in read_round_log(&layout.rounds_ndjson())? {
            if r.round < state.next_round {
                lines.push(r.ndjson_line(stamp.as_deref().unwrap_or(""))?);
                reports.push(r);
            }
        }
        (Some(state), lines, reports)
    } else {
        (None, Vec::new(), Vec::new())
    };
    write_atomic(&layout.resolved_config(), resolved.as_bytes())?;

    let every = cfg.output.checkpoint_every;
    let last = cfg.fl.rounds;
    let pair = aes.as_ref().map(|(a, b)| (a, b));
    let (_, state) = train_on(cfg, &data, pair, resume, |report, state| {
        lines.push(report.ndjson_line(&timestamp())?);
        reports.push(report.clone());
        write_atomic(&layout.rounds_ndjson(), (lines.join("\n") + "\n").as_bytes())?;
        write_atomic(&layout.rounds_csv(), csv_text(&reports).as_bytes())?;
        let done = state.next_round;
        if done == last || (every > 0 && done % every == 0) {
            if cfg.fl.strategy != Strategy::Standalone {
                checkpoint_of(&state.global).write(&layout.round_checkpoint(done))?;
            }
            write_state(&layout.round_state(done), state)?;
            write_state(&layout.train_state(), state)?;
        }
        Ok(())
    })?;
    if reports.is_empty() {
        write_atomic(&layout.rounds_ndjson(), b"")?;
        write_atomic(&layout.rounds_csv(), csv_text(&[]).as_bytes())?;
        write_state(&layout.train_state(), &state)?;
    }
    if cfg.fl.strategy == Strategy::Standalone {
        for (p, w) in cfg.data.clients.iter().zip(&state.locals) {
            checkpoint_of(w).write(&layout.client_model(p.id))?;
        }
    } else {
        checkpoint_of(&state.global).write(&layout.model())?;
    }
    Ok(TrainOutcome {
        reports,
        state,
        pretrain: None,
    })
}

/// One row of the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub checkpoint: String,
    pub mask: ModalityMask,
    pub summary: EvalSummary,
}

/// Scores a detector checkpoint on the stored test set under each sensor
/// combination: both, without radar, without lidar.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let path = checkpoint.map_or_else(|| layout.model(), Path::to_path_buf);
    let ckpt = Checkpoint::read(&path)?;
    let (det, mut params) = build_model(cfg)?;
    ckpt.load_into(&mut params, ModelTag::Detector)?;
    let weights = crate::fed::flatten(&params);
    let test = read_checked(&layout.test_data(), cfg)?;
    let name = path.display().to_string();
    let mut rows = Vec::new();
    for mask in [ModalityMask::Both, ModalityMask::WithoutRadar, ModalityMask::WithoutLidar] {
        let eval = EvalConfig {
            modality_mask: mask,
            ..cfg.eval.clone()
        };
        rows.push(EvalRow {
            checkpoint: name.clone(),
            mask,
            summary: evaluate_weights(&det, &params, &weights, &test, &eval, cfg.workers)?,
        });
    }
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(&layout.eval_rows(&path), text.as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    /// Metrics of the last round.
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Value-major, seed-minor.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Per-value means over seeds, in value order.
    pub fn means(&self) -> Vec<(f64, EvalSummary)> {
        self.values
            .iter()
            .map(|&v| {
                let per: Vec<EvalSummary> = self.rows.iter().filter(|r| r.value == v).map(|r| r.summary).collect();
                (v, EvalSummary::mean(&per).expect("every value has rows"))
            })
            .collect()
    }

    /// The header line records the values exactly as configured.
    pub fn header_line(&self) -> String {
        format!(
            "# sweep parameter={} values={:?} seeds={:?}",
            self.parameter.name(),
            self.values,
            self.seeds
        )
    }

    pub fn to_csv(&self) -> String {
        let metrics = "ap50,ap65,ap80,ap_mean,ar1,ar10,ar100";
        let row = |v: f64, seed: &str, s: &EvalSummary| {
            let m: Vec<String> = s.values().iter().map(|x| format!("{x}")).collect();
            format!("{v:?},{seed},{}\n", m.join(","))
        };
        let mut out = format!("{}\nvalue,seed,{metrics}\n", self.header_line());
        for r in &self.rows {
            out.push_str(&row(r.value, &r.seed.to_string(), &r.summary));
        }
        for (v, s) in self.means() {
            out.push_str(&row(v, "mean", &s));
        }
        out
    }
}

/// Retrains once per (value, seed) and tabulates final metrics. Data and
/// autoencoders are shared across values for each seed.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepTable> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
    let seeds = if sweep.seeds.is_empty() { vec![cfg.seed] } else { sweep.seeds.clone() };
    let mut rows = Vec::new();
    for &seed in &seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        base.sweep = None;
        let mut data: Option<ExperimentData> = None;
        let mut aes = None;
        for &value in &sweep.values {
            let mut run = base.clone();
            run.apply(sweep.parameter, value)?;
            if data.is_none() || sweep.parameter == SweepParameter::KeepRatio {
                data = Some(ExperimentData::generate(&run)?);
            }
            let d = data.as_ref().expect("generated above");
            if aes.is_none() && run.fl.imputation == Imputation::Autoencoder && d.needs_imputation() {
                aes = Some(pretrain_autoencoders(&run, &d.pretrain, &d.client_ids())?);
            }
            let pair = aes.as_ref().map(|a| (&a.lidar_to_radar, &a.radar_to_lidar));
            let (reports, _) = train_on(&run, d, pair, None, |_, _| Ok(()))?;
            let summary = reports
                .iter()
                .rev()
                .find_map(|r| r.eval)
                .ok_or_else(|| Error::Config("sweep runs need at least one round".into()))?;
            rows.push(SweepRow { value, seed, summary });
        }
    }
    let table = SweepTable {
        parameter: sweep.parameter,
        values: sweep.values,
        seeds,
        rows,
    };
    write_atomic(&Layout::of(cfg).sweep_csv(), table.to_csv().as_bytes())?;
    Ok(table)
}

/// Communication totals of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCost {
    pub run: String,
    pub rounds: usize,
    pub final_eval: Option<EvalSummary>,
    pub bytes_model_up: u64,
    pub bytes_model_down: u64,
    pub bytes_raw_data: u64,
    pub model_to_raw_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: Vec<RunCost>,
}

/// Merges the round logs of several runs into `<out>/report/`:
/// `rounds.csv` (every round of every run, with a leading `run` column),
/// `ap50.csv` (one column per run, `NA` where a run has no value) and
/// `summary.json` (communication totals).
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let reports: Vec<RoundReport> = read_round_log(&Layout::new(dir).rounds_ndjson())?
            .into_iter()
            .map(|(r, _)| r)
            .collect();
        runs.push((name, reports));
    }

    let mut long = format!("run,{CSV_HEADER}\n");
    for (name, reports) in &runs {
        for r in reports {
            long.push_str(&format!("{name},{}\n", r.csv_row()));
        }
    }

    let rounds: BTreeSet<usize> = runs.iter().flat_map(|(_, rs)| rs.iter().map(|r| r.round)).collect();
    let mut wide = String::from("round");
    for (name, _) in &runs {
        wide.push_str(&format!(",{name}"));
    }
    wide.push('\n');
    for round in rounds {
        wide.push_str(&round.to_string());
        for (_, rs) in &runs {
            let cell = rs
                .iter()
                .find(|r| r.round == round)
                .and_then(|r| r.eval)
                .map_or_else(|| GAP.to_string(), |e| format!("{}", e.ap50));
            wide.push(',');
            wide.push_str(&cell);
        }
        wide.push('\n');
    }

    let summary = ReportSummary {
        runs: runs
            .iter()
            .map(|(name, rs)| {
                let up: u64 = rs.iter().map(|r| r.bytes_model_up).sum();
                let down: u64 = rs.iter().map(|r| r.bytes_model_down).sum();
                let raw: u64 = rs.iter().map(|r| r.bytes_raw_data).sum();
                RunCost {
                    run: name.clone(),
                    rounds: rs.len(),
                    final_eval: rs.iter().rev().find_map(|r| r.eval),
                    bytes_model_up: up,
                    bytes_model_down: down,
                    bytes_raw_data: raw,
                    model_to_raw_ratio: (raw > 0).then(|| (up + down) as f64 / raw as f64),
                }
            })
            .collect(),
    };
    let dir = Layout::new(out).report_dir();
    write_atomic(&dir.join("rounds.csv"), long.as_bytes())?;
    write_atomic(&dir.join("ap50.csv"), wide.as_bytes())?;
    write_atomic(&dir.join("summary.json"), to_json(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Used by tests and the CLI to tell a completed run from a partial one.
pub fn saved_state(cfg: &ExperimentConfig) -> Result<Option<TrainState>> {
    let p = Layout::of(cfg).train_state();
    if p.exists() {
        read_state(&p).map(Some)
    } else {
        Ok(None)
    }
}
