//! Config loading, hashing and the on-disk output formats.

use std::fs;
use std::path::Path;

use airmeta_core::{ChannelRound, ExperimentConfig, Pipeline, RoundRecord, SweepSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

/// Bumped whenever a CSV column or JSON field changes.
pub const SCHEMA_VERSION: u32 = 1;

pub fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

pub fn load_experiment(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg: ExperimentConfig = parse_toml(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    cfg.validate()
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

pub fn load_sweep(path: &Path, seed: Option<u64>) -> Result<SweepSpec, Failure> {
    let mut spec: SweepSpec = parse_toml(path)?;
    if let Some(s) = seed {
        spec.base.master_seed = s;
    }
    spec.validate()
        .map_err(|e| Failure::Usage(format!("invalid sweep {}: {e}", path.display())))?;
    Ok(spec)
}

/// SHA-256 of the canonical JSON form of a config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let canonical = serde_json::to_string(cfg).expect("configs serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config_sha256: String,
    pub master_seed: u64,
    pub trial_seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, cfg: &T, master_seed: u64, trial_seeds: Vec<u64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool: "airmeta".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: config_hash(cfg),
            master_seed,
            trial_seeds,
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
            config: serde_json::to_value(cfg).expect("configs serialize"),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, Failure> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Failure::Usage(format!("invalid manifest {}: {e}", path.display())))
}

/// State after the last round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub eta: f64,
    pub alpha: f64,
    pub grad_norm_sq: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub theta: Vec<f64>,
}

/// One pipeline's rounds for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub trial: usize,
    pub pipeline: Pipeline,
    pub records: Vec<RoundRecord>,
    pub last: FinalState,
}

const BASE_COLUMNS: [&str; 21] = [
    "trial",
    "pipeline",
    "row",
    "round",
    "eta",
    "alpha",
    "grad_norm_sq",
    "train_loss",
    "test_loss",
    "rho",
    "v",
    "v_measured",
    "snr_db",
    "n_active",
    "sum_h_sq",
    "min_g_norm_sq",
    "max_g_norm_sq",
    "max_mem_norm_sq",
    "max_tx_power",
    "pseudo_inverse",
    "theta_dim",
];

fn pipeline_name(p: Pipeline) -> &'static str {
    match p {
        Pipeline::Air => "air",
        Pipeline::Ideal => "ideal",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("cannot write {}: {e}", path.display()))
}

/// One row per round plus a `final` row per track; `theta_j` columns follow the fixed ones.
pub fn write_trajectory_csv(path: &Path, tracks: &[Track], snr_db: f64) -> Result<(), Failure> {
    let dim = tracks.first().map(|t| t.last.theta.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|j| format!("theta_{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for tr in tracks {
        for r in &tr.records {
            let mut row = vec![
                tr.trial.to_string(),
                pipeline_name(tr.pipeline).into(),
                "round".into(),
                r.round.to_string(),
                r.eta.to_string(),
                r.alpha.to_string(),
                r.grad_norm_sq.to_string(),
                r.train_loss.to_string(),
                opt(r.test_loss),
                r.rho.to_string(),
                r.v_model.to_string(),
                r.v_measured.to_string(),
                snr_db.to_string(),
                r.n_active.to_string(),
                r.sum_h_sq.to_string(),
                r.min_g_norm_sq.to_string(),
                r.max_g_norm_sq.to_string(),
                r.max_mem_norm_sq.to_string(),
                r.max_tx_power.to_string(),
                r.pseudo_inverse.to_string(),
                r.theta.len().to_string(),
            ];
            row.extend(r.theta.iter().map(|x| x.to_string()));
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        let f = &tr.last;
        let mut row = vec![
            tr.trial.to_string(),
            pipeline_name(tr.pipeline).into(),
            "final".into(),
            tr.records.len().to_string(),
            f.eta.to_string(),
            f.alpha.to_string(),
            f.grad_norm_sq.to_string(),
            f.train_loss.to_string(),
            f.test_loss.to_string(),
        ];
        row.extend(std::iter::repeat_n(String::new(), BASE_COLUMNS.len() - row.len() - 1));
        row.push(f.theta.len().to_string());
        row.extend(f.theta.iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

pub fn write_trajectory_json(path: &Path, tracks: &[Track]) -> Result<(), Failure> {
    write_json(path, &tracks)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T, Failure> {
    rec.get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Failure::Usage(format!("trajectory line {line}: bad {name} value")))
}

/// Reads a trajectory written by [`write_trajectory_csv`] or [`write_trajectory_json`].
pub fn read_trajectory(path: &Path) -> Result<Vec<Track>, Failure> {
    if path.extension().is_some_and(|e| e == "json") {
        return serde_json::from_str(&read_text(path)?)
            .map_err(|e| Failure::Usage(format!("invalid trajectory {}: {e}", path.display())));
    }
    let mut rd = csv::Reader::from_path(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let header = rd.headers().map_err(|e| Failure::Usage(e.to_string()))?.clone();
    if header.len() < BASE_COLUMNS.len() || header.iter().zip(BASE_COLUMNS).any(|(a, b)| a != b) {
        return Err(Failure::Usage(format!("{} is not a trajectory file", path.display())));
    }
    let n = BASE_COLUMNS.len();
    let mut tracks: Vec<Track> = Vec::new();
    let mut current: Option<Track> = None;
    for (i, rec) in rd.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Failure::Usage(format!("trajectory line {line}: {e}")))?;
        let trial: usize = field(&rec, 0, "trial", line)?;
        let pipeline = match &rec[1] {
            "air" => Pipeline::Air,
            "ideal" => Pipeline::Ideal,
            other => return Err(Failure::Usage(format!("trajectory line {line}: unknown pipeline {other:?}"))),
        };
        let dim: usize = field(&rec, n - 1, "theta_dim", line)?;
        let theta = (0..dim)
            .map(|j| field::<f64>(&rec, n + j, "theta", line))
            .collect::<Result<Vec<_>, _>>()?;
        let track = current.get_or_insert_with(|| Track {
            trial,
            pipeline,
            records: Vec::new(),
            last: FinalState {
                eta: 0.0,
                alpha: 0.0,
                grad_norm_sq: 0.0,
                train_loss: 0.0,
                test_loss: 0.0,
                theta: Vec::new(),
            },
        });
        if track.trial != trial || track.pipeline != pipeline {
            return Err(Failure::Usage(format!("trajectory line {line}: track ended without a final row")));
        }
        match &rec[2] {
            "round" => track.records.push(RoundRecord {
                round: field(&rec, 3, "round", line)?,
                eta: field(&rec, 4, "eta", line)?,
                alpha: field(&rec, 5, "alpha", line)?,
                grad_norm_sq: field(&rec, 6, "grad_norm_sq", line)?,
                train_loss: field(&rec, 7, "train_loss", line)?,
                test_loss: if rec[8].is_empty() {
                    None
                } else {
                    Some(field(&rec, 8, "test_loss", line)?)
                },
                rho: field(&rec, 9, "rho", line)?,
                v_model: field(&rec, 10, "v", line)?,
                v_measured: field(&rec, 11, "v_measured", line)?,
                n_active: field(&rec, 13, "n_active", line)?,
                sum_h_sq: field(&rec, 14, "sum_h_sq", line)?,
                min_g_norm_sq: field(&rec, 15, "min_g_norm_sq", line)?,
                max_g_norm_sq: field(&rec, 16, "max_g_norm_sq", line)?,
                max_mem_norm_sq: field(&rec, 17, "max_mem_norm_sq", line)?,
                max_tx_power: field(&rec, 18, "max_tx_power", line)?,
                pseudo_inverse: field(&rec, 19, "pseudo_inverse", line)?,
                theta,
            }),
            "final" => {
                track.last = FinalState {
                    eta: field(&rec, 4, "eta", line)?,
                    alpha: field(&rec, 5, "alpha", line)?,
                    grad_norm_sq: field(&rec, 6, "grad_norm_sq", line)?,
                    train_loss: field(&rec, 7, "train_loss", line)?,
                    test_loss: field(&rec, 8, "test_loss", line)?,
                    theta,
                };
                tracks.push(current.take().expect("track in progress"));
            }
            other => return Err(Failure::Usage(format!("trajectory line {line}: unknown row kind {other:?}"))),
        }
    }
    if current.is_some() {
        return Err(Failure::Usage("trajectory ends without a final row".into()));
    }
    Ok(tracks)
}

/// Replay log: every gain and noise sample of every round.
pub fn write_channels_csv(path: &Path, channels: &[(usize, &[ChannelRound])]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["trial", "round", "kind", "index", "re", "im", "noise_var"])
        .map_err(|e| csv_err(path, e))?;
    for (trial, rounds) in channels {
        for (t, ch) in rounds.iter().enumerate() {
            for (id, h) in &ch.gains {
                w.write_record([
                    trial.to_string(),
                    t.to_string(),
                    "gain".into(),
                    id.to_string(),
                    h.re.to_string(),
                    h.im.to_string(),
                    ch.noise_var.to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
            for (j, z) in ch.noise.iter().enumerate() {
                w.write_record([
                    trial.to_string(),
                    t.to_string(),
                    "noise".into(),
                    j.to_string(),
                    z.re.to_string(),
                    z.im.to_string(),
                    ch.noise_var.to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| csv_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(pipeline: Pipeline, rho: f64) -> Track {
        Track {
            trial: 1,
            pipeline,
            records: vec![RoundRecord {
                round: 0,
                eta: 0.1,
                alpha: 0.3,
                grad_norm_sq: 1.0 / 3.0,
                train_loss: 2.5,
                test_loss: None,
                rho,
                v_model: 1e-3,
                v_measured: 2e-3,
                n_active: 3,
                sum_h_sq: 2.0,
                min_g_norm_sq: 0.1,
                max_g_norm_sq: 0.2,
                max_mem_norm_sq: 0.05,
                max_tx_power: 0.9,
                pseudo_inverse: false,
                theta: vec![0.1, -0.2],
            }],
            last: FinalState {
                eta: 0.1,
                alpha: 0.3,
                grad_norm_sq: 0.25,
                train_loss: 2.0,
                test_loss: 2.2,
                theta: vec![0.15, -0.1],
            },
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let tracks = vec![track(Pipeline::Air, 12.5), track(Pipeline::Ideal, f64::NAN)];
        write_trajectory_csv(&path, &tracks, 19.0).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back[0], tracks[0]);
        assert!(back[1].records[0].rho.is_nan());
        assert_eq!(back[1].last, tracks[1].last);
    }

    #[test]
    fn trajectory_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let tracks = vec![track(Pipeline::Air, 12.5), track(Pipeline::Ideal, f64::NAN)];
        write_trajectory_json(&path, &tracks).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back[0], tracks[0]);
        assert!(back[1].records[0].rho.is_nan());
    }

    #[test]
    fn hash_tracks_config_changes() {
        let a = ExperimentConfig::default_convergence();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.master_seed += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
