//! Configuration layering: profile defaults, then the JSON file, then flags.
//!
//! Each subcommand has a flag struct whose field names equal the keys of its
//! resolved configuration. Both layers are merged as JSON objects and the
//! result is deserialized with unknown keys rejected.

use std::path::PathBuf;

use anyhow::anyhow;
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use ncspoof::experiments::{nbiot_t_s, Profile, AR_SWEEP_DB, NBIOT_DELTA_F};
use ncspoof::waveform::Modulation;

use crate::Failure;

/// Keys handled globally rather than by a subcommand's configuration.
const GLOBAL_KEYS: [&str; 2] = ["profile", "seed"];

pub const DEFAULT_SEED: u64 = 1;

/// Merges `file` and then `flags` over `defaults`. Null flag values mean
/// "not given".
pub fn resolve<C, F>(defaults: &C, file: Option<&Value>, flags: &F) -> Result<C, Failure>
where
    C: Serialize + DeserializeOwned,
    F: Serialize,
{
    let mut merged = match serde_json::to_value(defaults).map_err(Failure::runtime)? {
        Value::Object(m) => m,
        _ => return Err(Failure::runtime(anyhow!("configuration is not an object"))),
    };
    if let Some(file) = file {
        let obj = file
            .as_object()
            .ok_or_else(|| Failure::validation(anyhow!("configuration file must hold a JSON object")))?;
        overlay(&mut merged, obj, true);
    }
    if let Value::Object(obj) = serde_json::to_value(flags).map_err(Failure::runtime)? {
        overlay(&mut merged, &obj, false);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::validation(anyhow!("configuration: {e}")))
}

fn overlay(base: &mut Map<String, Value>, layer: &Map<String, Value>, skip_global: bool) {
    for (k, v) in layer {
        if v.is_null() || (skip_global && GLOBAL_KEYS.contains(&k.as_str())) {
            continue;
        }
        base.insert(k.clone(), v.clone());
    }
}

pub fn seed_of(flag: Option<u64>, file: Option<&Value>) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match file.and_then(|v| v.get("seed")) {
        None => Ok(DEFAULT_SEED),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| Failure::validation(anyhow!("seed must be a non-negative integer"))),
    }
}

// ---------------------------------------------------------------------------
// gen

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct GenFlags {
    /// ofdm | interleaved | pattern1 | pattern2 | random | structured
    #[arg(long)]
    pub pattern: Option<String>,
    /// Subcarrier count N.
    #[arg(long)]
    pub n: Option<usize>,
    /// Interleaving spacing for `interleaved`.
    #[arg(long)]
    pub q: Option<usize>,
    /// Activation probability for `random`.
    #[arg(long)]
    pub prob: Option<f64>,
    /// bpsk | qam16
    #[arg(long)]
    pub modulation: Option<String>,
    /// Subcarrier spacing grid in Hz, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub delta_f: Option<Vec<f64>>,
    /// Complex samples per row.
    #[arg(long)]
    pub n1: Option<usize>,
    /// Sampling interval in seconds.
    #[arg(long)]
    pub t_s: Option<f64>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    /// awgn | multipath | rayleigh_flat
    #[arg(long)]
    pub channel: Option<String>,
    #[arg(long)]
    pub rows: Option<usize>,
    /// Add a pure-noise source next to the signal source.
    #[arg(long)]
    pub with_noise: Option<bool>,
    /// occupancy | class | none
    #[arg(long)]
    pub labels: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub pattern: String,
    pub n: usize,
    pub q: usize,
    pub prob: f64,
    pub modulation: Modulation,
    pub delta_f: Vec<f64>,
    pub n1: usize,
    pub t_s: f64,
    pub snr_db: f64,
    pub channel: String,
    pub rows: usize,
    pub with_noise: bool,
    pub labels: String,
}

impl GenConfig {
    pub fn defaults(profile: Profile) -> Self {
        Self {
            pattern: "random".into(),
            n: 16,
            q: 2,
            prob: 0.5,
            modulation: Modulation::Bpsk,
            delta_f: NBIOT_DELTA_F.to_vec(),
            n1: 80,
            t_s: nbiot_t_s(16),
            snr_db: 5.0,
            channel: "awgn".into(),
            rows: match profile {
                Profile::Desk => 50_000,
                Profile::Paper => 500_000,
            },
            with_noise: false,
            labels: "occupancy".into(),
        }
    }
}

// ---------------------------------------------------------------------------
// caf

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct CafFlags {
    /// table1-1 | table1-2 | table1-3 | all
    #[arg(long)]
    pub case: Option<String>,
    /// Largest lag in samples; lags run from -max_lag to max_lag.
    #[arg(long)]
    pub max_lag: Option<i64>,
    /// Peak threshold relative to the largest off-zero magnitude.
    #[arg(long)]
    pub peak_threshold: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CafCliConfig {
    pub case: String,
    pub max_lag: i64,
    pub peak_threshold: f64,
    pub samples: usize,
    pub snr_db: f64,
}

impl CafCliConfig {
    pub fn defaults(_profile: Profile) -> Self {
        Self {
            case: "all".into(),
            max_lag: 400,
            peak_threshold: 0.3,
            samples: 100_000,
            snr_db: 5.0,
        }
    }
}

// ---------------------------------------------------------------------------
// train-supervised

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct SupervisedFlags {
    /// Train on a dataset written by `gen` instead of generating one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// ofdm | pattern1 | pattern2 | random
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub modulation: Option<String>,
    /// Spoofing SNR of the adversary's observations.
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub test_rows: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedCliConfig {
    pub data: Option<PathBuf>,
    pub n: usize,
    pub pattern: String,
    pub modulation: Modulation,
    pub snr_db: f64,
    pub rows: usize,
    pub test_rows: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl SupervisedCliConfig {
    pub fn defaults(profile: Profile) -> Self {
        let (rows, steps) = match profile {
            Profile::Desk => (60_000, 3000),
            Profile::Paper => (2_000_000, 200_000),
        };
        Self {
            data: None,
            n: 16,
            pattern: "random".into(),
            modulation: Modulation::Bpsk,
            snr_db: 5.0,
            rows,
            test_rows: 10_000,
            steps,
            lr: 5e-4,
            batch_size: 100,
        }
    }
}

// ---------------------------------------------------------------------------
// train-vae

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct VaeFlags {
    /// structured | random | random-qam
    #[arg(long)]
    pub experiment: Option<String>,
    /// plain | beta | dip | factor
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub lambda_od: Option<f64>,
    /// Latent dimension (default depends on the experiment).
    #[arg(long)]
    pub nz: Option<usize>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Steps over which the regularizers ramp up from zero.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeCliConfig {
    pub experiment: String,
    pub variant: String,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_d: f64,
    pub lambda_od: f64,
    pub nz: Option<usize>,
    pub rows: Option<usize>,
    pub steps: Option<usize>,
    pub warmup: Option<usize>,
    pub lr: f64,
    pub snr_db: Option<f64>,
}

impl VaeCliConfig {
    pub fn defaults(_profile: Profile) -> Self {
        Self {
            experiment: "random".into(),
            variant: "factor".into(),
            beta: 4.0,
            gamma: 5.0,
            lambda_d: 10.0,
            lambda_od: 100.0,
            nz: None,
            rows: None,
            steps: None,
            warmup: None,
            lr: 5e-4,
            snr_db: None,
        }
    }
}

// ---------------------------------------------------------------------------
// sense

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct SenseFlags {
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Energy histogram bins.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SenseConfig {
    pub snr_db: f64,
    pub rows: Option<usize>,
    pub steps: Option<usize>,
    pub bins: usize,
}

impl SenseConfig {
    pub fn defaults(_profile: Profile) -> Self {
        Self {
            snr_db: 5.0,
            rows: None,
            steps: None,
            bins: 50,
        }
    }
}

// ---------------------------------------------------------------------------
// metrics / traverse

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct MetricsFlags {
    /// Directory written by `train-vae`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Traversal thresholds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub epsilon: Option<Vec<f64>>,
    /// Rows used for traversals.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Votes per factor for the Higgins and Kim metrics.
    #[arg(long)]
    pub votes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub model: Option<PathBuf>,
    pub epsilon: Vec<f64>,
    pub rows: usize,
    pub votes: usize,
}

impl MetricsConfig {
    pub fn defaults(_profile: Profile) -> Self {
        Self {
            model: None,
            epsilon: vec![0.5, 1.0],
            rows: 500,
            votes: 50,
        }
    }
}

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct TraverseFlags {
    /// Directory written by `train-vae`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Traversal half-range.
    #[arg(long)]
    pub c: Option<f64>,
    /// Traversal points.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraverseConfig {
    pub model: Option<PathBuf>,
    pub epsilon: f64,
    pub c: f64,
    pub k: usize,
    pub rows: usize,
}

impl TraverseConfig {
    pub fn defaults(_profile: Profile) -> Self {
        Self {
            model: None,
            epsilon: 0.5,
            c: 3.0,
            k: 40,
            rows: 500,
        }
    }
}

// ---------------------------------------------------------------------------
// spoof-eval / rx-eval

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct LinkFlags {
    /// `oracle` or a `supervised.json` written by `train-supervised`.
    #[arg(long)]
    pub adversary: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub modulation: Option<String>,
    /// SNR of the observation link.
    #[arg(long)]
    pub snr_db: Option<f64>,
    /// awgn | rayleigh_flat
    #[arg(long)]
    pub link: Option<String>,
    /// Receiver E_b/N_0 sweep in dB, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub eb_n0_db: Option<Vec<f64>>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub adversary: String,
    pub n: usize,
    pub pattern: String,
    pub modulation: Modulation,
    pub snr_db: f64,
    pub link: String,
    pub eb_n0_db: Vec<f64>,
    pub frames: usize,
}

impl LinkConfig {
    pub fn defaults(profile: Profile) -> Self {
        Self {
            adversary: "oracle".into(),
            n: 16,
            pattern: "random".into(),
            modulation: Modulation::Bpsk,
            snr_db: 5.0,
            link: "awgn".into(),
            eb_n0_db: AR_SWEEP_DB.to_vec(),
            frames: match profile {
                Profile::Desk => 4000,
                Profile::Paper => 250_000,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_file_override_defaults() {
        let d = CafCliConfig::defaults(Profile::Desk);
        let file = json!({"max_lag": 100, "snr_db": 10.0, "seed": 4, "profile": "desk"});
        let flags = CafFlags {
            max_lag: Some(50),
            ..Default::default()
        };
        let c: CafCliConfig = resolve(&d, Some(&file), &flags).unwrap();
        assert_eq!(c.max_lag, 50);
        assert_eq!(c.snr_db, 10.0);
        assert_eq!(c.case, "all");
        assert_eq!(seed_of(None, Some(&file)).unwrap(), 4);
        assert_eq!(seed_of(Some(9), Some(&file)).unwrap(), 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let d = CafCliConfig::defaults(Profile::Desk);
        let file = json!({"max_lags": 100});
        let r = resolve(&d, Some(&file), &CafFlags::default());
        assert!(matches!(r, Err(Failure::Validation(_))));
    }

    #[test]
    fn enum_values_are_checked() {
        let d = GenConfig::defaults(Profile::Desk);
        let flags = GenFlags {
            modulation: Some("qam64".into()),
            ..Default::default()
        };
        assert!(matches!(resolve(&d, None, &flags), Err(Failure::Validation(_))));
        let flags = GenFlags {
            modulation: Some("qam16".into()),
            ..Default::default()
        };
        assert_eq!(resolve(&d, None, &flags).unwrap().modulation, Modulation::Qam16);
    }
}
