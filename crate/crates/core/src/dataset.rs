//! Labeled and unlabeled datasets of vectorized noisy frames.
//!
//! On disk a dataset is a directory holding `manifest.json`, `data.f32le`
//! (row-major, `rows x 2 n1`) and, depending on the label schema,
//! `labels.f32le` or `labels.u8`. Row `i` is generated from its own random
//! stream `(seed, i)`, so generation order does not matter.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{db_to_lin, ChannelKind, ChannelSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};
use crate::waveform::{
    random_bits, synthesize, vectorize, ComplexFrame, Modulation, PatternFamily,
    TransmissionParams,
};

pub const SCHEMA_VERSION: u32 = 1;

const PILOT_TAG: u64 = 0x5049_4c4f_54;
const SPLIT_TAG: u64 = 0x5350_4c49_54;
const PILOT_FRAMES: usize = 4096;

/// One way of producing a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Source {
    /// An NC-OFDM symbol with a freshly drawn pattern, powers and bits.
    Signal {
        n_subcarriers: usize,
        /// Subcarrier spacing drawn uniformly from this grid (Hz).
        delta_f_grid: Vec<f64>,
        family: PatternFamily,
        modulation: Modulation,
    },
    /// Receiver noise only.
    Noise,
}

impl Source {
    pub fn signal(n: usize, delta_f: f64, family: PatternFamily, modulation: Modulation) -> Self {
        Source::Signal {
            n_subcarriers: n,
            delta_f_grid: vec![delta_f],
            family,
            modulation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LabelSchema {
    None,
    /// `[u padded to n_max, N, delta_f in Hz]` per row, as f32.
    Occupancy { n_max: usize },
    /// Index of the source that produced the row, as u8.
    Class,
}

impl LabelSchema {
    pub fn width(&self) -> usize {
        match self {
            LabelSchema::None => 0,
            LabelSchema::Occupancy { n_max } => n_max + 2,
            LabelSchema::Class => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Each row draws one source uniformly.
    pub sources: Vec<Source>,
    pub n1: usize,
    pub t_s: f64,
    /// Spoofing SNR: nominal signal power over N0.
    pub snr_db: f64,
    pub channel: ChannelKind,
    pub labels: LabelSchema,
    pub rows: usize,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::EmptyInput("dataset sources"));
        }
        if self.n1 == 0 || self.rows == 0 {
            return Err(Error::invalid("n1 and rows must be at least 1"));
        }
        if !(self.t_s > 0.0) {
            return Err(Error::invalid("sampling interval must be positive"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::invalid("SNR must be finite"));
        }
        self.channel.validate()?;
        for s in &self.sources {
            if let Source::Signal {
                n_subcarriers,
                delta_f_grid,
                ..
            } = s
            {
                if delta_f_grid.is_empty() {
                    return Err(Error::EmptyInput("subcarrier spacing grid"));
                }
                let max_df = delta_f_grid.iter().cloned().fold(0.0, f64::max);
                if 1.0 / self.t_s < *n_subcarriers as f64 * max_df * (1.0 - 1e-9) {
                    return Err(Error::invalid(format!(
                        "sampling rate {} Hz below the {} Hz band",
                        1.0 / self.t_s,
                        *n_subcarriers as f64 * max_df
                    )));
                }
                if let LabelSchema::Occupancy { n_max } = self.labels {
                    if *n_subcarriers > n_max {
                        return Err(Error::invalid(format!(
                            "N = {n_subcarriers} exceeds label width {n_max}"
                        )));
                    }
                }
            }
        }
        if self.labels == LabelSchema::Class && self.sources.len() > 256 {
            return Err(Error::invalid("at most 256 classes"));
        }
        Ok(())
    }

    /// Largest subcarrier count among the signal sources.
    pub fn n_max(&self) -> usize {
        self.sources
            .iter()
            .filter_map(|s| match s {
                Source::Signal { n_subcarriers, .. } => Some(*n_subcarriers),
                Source::Noise => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        2 * self.n1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub rows: usize,
    pub dim: usize,
    /// Noise spectral density used for every row.
    pub n0: f64,
    /// Mean pilot signal power from which `n0` was set.
    pub nominal_power: f64,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    None,
    Occupancy { width: usize, values: Vec<f32> },
    Class(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Row-major `rows x dim`.
    pub x: Vec<f32>,
    pub labels: Labels,
}

/// Everything known about one generated row.
#[derive(Clone, Debug)]
pub struct RowSample {
    pub x: Vec<f64>,
    pub source: usize,
    pub params: Option<TransmissionParams>,
    pub bits: Vec<u8>,
    pub clean: Option<ComplexFrame>,
}

impl RowSample {
    pub fn occupancy_label(&self, n_max: usize) -> Vec<f32> {
        let mut out = vec![0f32; n_max + 2];
        if let Some(p) = &self.params {
            for (o, &u) in out.iter_mut().zip(p.pattern.occupancy()) {
                *o = u as f32;
            }
            out[n_max] = p.n_subcarriers as f32;
            out[n_max + 1] = p.delta_f as f32;
        }
        out
    }
}

fn draw_signal<R: Rng + ?Sized>(
    source: &Source,
    n1: usize,
    t_s: f64,
    rng: &mut R,
) -> Result<(TransmissionParams, Vec<u8>, ComplexFrame)> {
    let Source::Signal {
        n_subcarriers,
        delta_f_grid,
        family,
        modulation,
    } = source
    else {
        unreachable!("noise source has no signal")
    };
    let df = delta_f_grid[rng.random_range(0..delta_f_grid.len())];
    let params = TransmissionParams::random(*n_subcarriers, df, family, *modulation, rng)?;
    let bits = random_bits(params.bits_per_frame(), rng);
    let symbols = modulation.modulate(&bits)?;
    let frame = synthesize(&params, &symbols, n1, t_s)?;
    Ok((params, bits, frame))
}

/// Mean `E_s` of the signal sources over a pilot batch drawn from a stream
/// independent of the dataset rows; 1 when there are no signal sources.
pub fn nominal_power(config: &DatasetConfig, seed: u64) -> Result<f64> {
    let signals: Vec<&Source> = config
        .sources
        .iter()
        .filter(|s| matches!(s, Source::Signal { .. }))
        .collect();
    if signals.is_empty() {
        return Ok(1.0);
    }
    let pilot_seed = derive_seed(seed, PILOT_TAG);
    let total = (0..PILOT_FRAMES)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(pilot_seed, i as u64);
            let s = signals[i % signals.len()];
            draw_signal(s, config.n1, config.t_s, &mut rng).map(|(_, _, f)| f.power())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(total.iter().sum::<f64>() / PILOT_FRAMES as f64)
}

/// Generates row `row` of the dataset defined by `(config, seed)`.
pub fn generate_row(config: &DatasetConfig, n0: f64, seed: u64, row: u64) -> Result<RowSample> {
    let mut rng = stream_rng(seed, row);
    let source = rng.random_range(0..config.sources.len());
    let channel = ChannelSpec::new(config.channel.clone(), n0)?;
    match &config.sources[source] {
        s @ Source::Signal { .. } => {
            let (params, bits, frame) = draw_signal(s, config.n1, config.t_s, &mut rng)?;
            let (rx, _gain) = channel.apply(&frame, &mut rng)?;
            Ok(RowSample {
                x: vectorize(&rx).0,
                source,
                params: Some(params),
                bits,
                clean: Some(frame),
            })
        }
        Source::Noise => {
            let zero = ComplexFrame {
                samples: vec![num_complex::Complex64::new(0.0, 0.0); config.n1],
                t_s: config.t_s,
            };
            let (rx, _) = channel.apply(&zero, &mut rng)?;
            Ok(RowSample {
                x: vectorize(&rx).0,
                source,
                params: None,
                bits: Vec::new(),
                clean: None,
            })
        }
    }
}

pub fn noise_level(config: &DatasetConfig, seed: u64) -> Result<(f64, f64)> {
    let p = nominal_power(config, seed)?;
    Ok((p / db_to_lin(config.snr_db), p))
}

/// Builds the dataset in memory. Rows are generated in parallel; the result
/// does not depend on the thread count.
pub fn build(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let (n0, nominal) = noise_level(config, seed)?;
    let rows: Vec<RowSample> = (0..config.rows as u64)
        .into_par_iter()
        .map(|i| generate_row(config, n0, seed, i))
        .collect::<Result<_>>()?;
    Ok(assemble(config, seed, n0, nominal, rows))
}

/// Single-threaded reference build.
pub fn build_serial(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let (n0, nominal) = noise_level(config, seed)?;
    let rows: Vec<RowSample> = (0..config.rows as u64)
        .map(|i| generate_row(config, n0, seed, i))
        .collect::<Result<_>>()?;
    Ok(assemble(config, seed, n0, nominal, rows))
}

fn assemble(config: &DatasetConfig, seed: u64, n0: f64, nominal: f64, rows: Vec<RowSample>) -> Dataset {
    let dim = config.dim();
    let mut x = Vec::with_capacity(rows.len() * dim);
    for r in &rows {
        x.extend(r.x.iter().map(|&v| v as f32));
    }
    let labels = match config.labels {
        LabelSchema::None => Labels::None,
        LabelSchema::Occupancy { n_max } => Labels::Occupancy {
            width: n_max + 2,
            values: rows.iter().flat_map(|r| r.occupancy_label(n_max)).collect(),
        },
        LabelSchema::Class => Labels::Class(rows.iter().map(|r| r.source as u8).collect()),
    };
    Dataset {
        manifest: DatasetManifest {
            schema_version: SCHEMA_VERSION,
            seed,
            rows: rows.len(),
            dim,
            n0,
            nominal_power: nominal,
            config: config.clone(),
        },
        x,
        labels,
    }
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.manifest.rows
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.x[i * d..(i + 1) * d]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// Rows `indices` as an `f64` matrix.
    pub fn batch(&self, indices: &[usize]) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((indices.len(), d));
        for (r, &i) in indices.iter().enumerate() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(self.row(i)) {
                *o = v as f64;
            }
        }
        out
    }

    pub fn to_array(&self) -> Array2<f64> {
        let all: Vec<usize> = (0..self.rows()).collect();
        self.batch(&all)
    }

    /// Occupancy label row `[u.., N, delta_f]`, if present.
    pub fn occupancy(&self, i: usize) -> Option<&[f32]> {
        match &self.labels {
            Labels::Occupancy { width, values } => Some(&values[i * width..(i + 1) * width]),
            _ => None,
        }
    }

    pub fn class(&self, i: usize) -> Option<u8> {
        match &self.labels {
            Labels::Class(c) => Some(c[i]),
            _ => None,
        }
    }

    /// Subset in the given row order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::None => Labels::None,
            Labels::Occupancy { width, .. } => Labels::Occupancy {
                width: *width,
                values: indices
                    .iter()
                    .flat_map(|&i| self.occupancy(i).unwrap().iter().copied())
                    .collect(),
            },
            Labels::Class(c) => Labels::Class(indices.iter().map(|&i| c[i]).collect()),
        };
        let mut manifest = self.manifest.clone();
        manifest.rows = indices.len();
        Dataset {
            manifest,
            x,
            labels,
        }
    }

    /// Seeded disjoint partition into `(train, test)` with
    /// `round(train_frac * rows)` training rows.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_frac) {
            return Err(Error::invalid(format!("train fraction {train_frac} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.rows()).collect();
        idx.shuffle(&mut stream_rng(derive_seed(seed, SPLIT_TAG), 0));
        let n_train = (train_frac * self.rows() as f64).round() as usize;
        Ok((self.select(&idx[..n_train]), self.select(&idx[n_train..])))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("data.f32le"), &f32_bytes(&self.x))?;
        match &self.labels {
            Labels::None => {}
            Labels::Occupancy { values, .. } => {
                write_atomic(&dir.join("labels.f32le"), &f32_bytes(values))?
            }
            Labels::Class(c) => write_atomic(&dir.join("labels.u8"), c)?,
        }
        // Manifest last: its presence marks a complete dataset.
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&dir.join("manifest.json"), &json)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.json");
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let version: serde_json::Value = serde_json::from_slice(&text)?;
        let found = version
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Malformed {
                path: mpath.clone(),
                reason: "missing schema_version".into(),
            })? as u32;
        if found != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found,
                expected: SCHEMA_VERSION,
            });
        }
        let manifest: DatasetManifest = serde_json::from_slice(&text)?;
        let x = read_f32(&dir.join("data.f32le"))?;
        if x.len() != manifest.rows * manifest.dim {
            return Err(Error::Malformed {
                path: dir.join("data.f32le"),
                reason: format!(
                    "{} values, expected {} x {}",
                    x.len(),
                    manifest.rows,
                    manifest.dim
                ),
            });
        }
        let labels = match manifest.config.labels {
            LabelSchema::None => Labels::None,
            LabelSchema::Occupancy { n_max } => {
                let path = dir.join("labels.f32le");
                let values = read_f32(&path)?;
                if values.len() != manifest.rows * (n_max + 2) {
                    return Err(Error::Malformed {
                        path,
                        reason: "label count does not match rows".into(),
                    });
                }
                Labels::Occupancy {
                    width: n_max + 2,
                    values,
                }
            }
            LabelSchema::Class => {
                let path = dir.join("labels.u8");
                let c = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                if c.len() != manifest.rows {
                    return Err(Error::Malformed {
                        path,
                        reason: "label count does not match rows".into(),
                    });
                }
                Labels::Class(c)
            }
        };
        Ok(Dataset {
            manifest,
            x,
            labels,
        })
    }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: "length is not a multiple of 4 bytes".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
