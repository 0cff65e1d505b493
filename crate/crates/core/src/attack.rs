//! Adversary and receiver pipelines: spectrum sensing, supervised and
//! unsupervised parameter inference, spoofed-frame generation and the
//! bit-error-rate evaluation at the receiver.
//!
//! BER bookkeeping for parameter mismatches:
//! * wrong `N` or `Δf` — the receiver cannot decode the frame; every bit
//!   counts as an error with probability 0.5;
//! * an active subcarrier the adversary left empty — its bits count at 0.5;
//! * subcarriers the adversary fills but the transmitter did not use are
//!   ignored by the receiver.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::channel::{db_to_lin, ChannelKind, ChannelSpec};
use crate::dataset::{generate_row, noise_level, Dataset, DatasetConfig, LabelSchema, Labels, Source};
use crate::error::{Error, Result};
use crate::metrics::{LatentEncoder, LatentMap};
use crate::nn::{
    hard_threshold, load_checkpoint, save_checkpoint, train_with, Activation, Loss, Mlp, Standardizer, TrainConfig,
};
use crate::rng::{derive_seed, stream_rng};
use crate::vae::VaeModel;
use crate::waveform::{random_bits, synthesize_amplitudes, SpectrumAnalyzer, TransmissionParams};

/// Gaussian tail probability `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Coherent BPSK over AWGN: `Q(sqrt(2 E_b / N_0))`.
pub fn bpsk_awgn_ber(eb_n0_db: f64) -> f64 {
    q_function((2.0 * db_to_lin(eb_n0_db)).sqrt())
}

/// Normal-approximation 95% interval half-width for a proportion.
pub fn proportion_ci(p: f64, n: f64) -> f64 {
    if n <= 0.0 {
        return f64::INFINITY;
    }
    1.96 * (p * (1.0 - p) / n).max(0.0).sqrt()
}

// ---------------------------------------------------------------------------
// Spectrum sensing

/// Two-component Gaussian mixture with diagonal covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGmm {
    pub weights: [f64; 2],
    pub means: [Vec<f64>; 2],
    pub vars: [Vec<f64>; 2],
}

const GMM_VAR_FLOOR: f64 = 1e-6;

impl DiagonalGmm {
    /// Expectation-maximization from a median-norm split: rows with norm at
    /// or below the median seed component 0, the rest component 1.
    pub fn fit(z: ArrayView2<f64>, max_iter: usize, tol: f64) -> Result<Self> {
        let n = z.nrows();
        if n < 4 {
            return Err(Error::DegenerateClustering(format!("{n} rows cannot be split in two")));
        }
        let norms: Vec<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut sorted = norms.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[n / 2];
        let mut resp = Array2::zeros((n, 2));
        for (i, &nm) in norms.iter().enumerate() {
            resp[[i, usize::from(nm > median)]] = 1.0;
        }
        let mut gmm = Self::m_step(z, resp.view())?;
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..max_iter {
            let (r, ll) = gmm.e_step(z);
            gmm = Self::m_step(z, r.view())?;
            if (ll - prev).abs() <= tol * ll.abs().max(1.0) {
                break;
            }
            prev = ll;
        }
        Ok(gmm)
    }

    fn m_step(z: ArrayView2<f64>, resp: ArrayView2<f64>) -> Result<Self> {
        let n = z.nrows() as f64;
        let d = z.ncols();
        let mut weights = [0.0; 2];
        let mut means = [vec![0.0; d], vec![0.0; d]];
        let mut vars = [vec![0.0; d], vec![0.0; d]];
        for k in 0..2 {
            let r = resp.column(k);
            let nk = r.sum();
            if nk < 1e-3 * n {
                return Err(Error::DegenerateClustering(format!(
                    "component {k} collapsed to weight {:.2e}",
                    nk / n
                )));
            }
            weights[k] = nk / n;
            for j in 0..d {
                let col = z.column(j);
                let m = r.dot(&col) / nk;
                let v = r.iter().zip(col.iter()).map(|(w, x)| w * (x - m) * (x - m)).sum::<f64>() / nk;
                means[k][j] = m;
                vars[k][j] = v.max(GMM_VAR_FLOOR);
            }
        }
        Ok(Self { weights, means, vars })
    }

    fn log_joint(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let mut lp = self.weights[k].ln();
            for ((xi, m), v) in x.iter().zip(&self.means[k]).zip(&self.vars[k]) {
                lp -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (xi - m) * (xi - m) / v);
            }
            *o = lp;
        }
        out
    }

    /// Responsibilities and total log-likelihood.
    fn e_step(&self, z: ArrayView2<f64>) -> (Array2<f64>, f64) {
        let mut resp = Array2::zeros((z.nrows(), 2));
        let mut ll = 0.0;
        for (i, row) in z.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let lj = self.log_joint(&row);
            let m = lj[0].max(lj[1]);
            let lse = m + ((lj[0] - m).exp() + (lj[1] - m).exp()).ln();
            ll += lse;
            resp[[i, 0]] = (lj[0] - lse).exp();
            resp[[i, 1]] = (lj[1] - lse).exp();
        }
        (resp, ll)
    }

    pub fn predict(&self, z: ArrayView2<f64>) -> Vec<usize> {
        z.rows()
            .into_iter()
            .map(|r| {
                let lj = self.log_joint(&r.to_vec());
                usize::from(lj[1] > lj[0])
            })
            .collect()
    }
}

/// Histograms of row energies for the two sensing clusters on shared bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyHistograms {
    pub edges: Vec<f64>,
    pub noise: Vec<usize>,
    pub signal: Vec<usize>,
}

impl EnergyHistograms {
    pub fn new(energies: &[f64], is_signal: &[bool], bins: usize) -> Self {
        let lo = energies.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut noise = vec![0; bins];
        let mut signal = vec![0; bins];
        for (&e, &s) in energies.iter().zip(is_signal) {
            let b = (((e - lo) / width) as usize).min(bins - 1);
            if s {
                signal[b] += 1;
            } else {
                noise[b] += 1;
            }
        }
        Self { edges, noise, signal }
    }

    fn mode(h: &[usize]) -> usize {
        h.iter()
            .enumerate()
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Mode bins `(noise, signal)`.
    pub fn modes(&self) -> (usize, usize) {
        (Self::mode(&self.noise), Self::mode(&self.signal))
    }

    /// The modes sit in different bins and each mode bin belongs to its own
    /// cluster by a 9:1 majority.
    pub fn modes_separated(&self) -> bool {
        let (mn, ms) = self.modes();
        mn != ms && self.noise[mn] >= 9 * self.signal[mn] && self.signal[ms] >= 9 * self.noise[ms]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensingResult {
    pub is_signal: Vec<bool>,
    pub energies: Vec<f64>,
    /// Mean energy of clusters 0 and 1.
    pub cluster_energy: [f64; 2],
    pub signal_cluster: usize,
    pub gmm: DiagonalGmm,
}

impl SensingResult {
    pub fn accuracy(&self, truth: &[bool]) -> f64 {
        let hits = self.is_signal.iter().zip(truth).filter(|(a, b)| a == b).count();
        hits as f64 / truth.len().max(1) as f64
    }

    pub fn histograms(&self, bins: usize) -> EnergyHistograms {
        EnergyHistograms::new(&self.energies, &self.is_signal, bins)
    }
}

fn encode_chunked<E: LatentEncoder + ?Sized>(enc: &E, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let chunks: Vec<Array2<f64>> = (0..x.nrows())
        .step_by(4096)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|s| enc.encode_mean(x.slice(s![s..(s + 4096).min(x.nrows()), ..])))
        .collect::<Result<_>>()?;
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))
}

/// Unsupervised signal/noise separation: a two-component mixture on the
/// latent means; the cluster with the lower mean energy is labeled noise.
pub fn sense_spectrum<E: LatentEncoder + ?Sized>(enc: &E, x: ArrayView2<f64>) -> Result<SensingResult> {
    let z = encode_chunked(enc, x)?;
    let gmm = DiagonalGmm::fit(z.view(), 200, 1e-8)?;
    let cluster = gmm.predict(z.view());
    let energies: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut sum = [0.0; 2];
    let mut count = [0usize; 2];
    for (&c, &e) in cluster.iter().zip(&energies) {
        sum[c] += e;
        count[c] += 1;
    }
    if count.contains(&0) {
        return Err(Error::DegenerateClustering("all rows fell in one cluster".into()));
    }
    let cluster_energy = [sum[0] / count[0] as f64, sum[1] / count[1] as f64];
    let signal_cluster = usize::from(cluster_energy[1] > cluster_energy[0]);
    Ok(SensingResult {
        is_signal: cluster.iter().map(|&c| c == signal_cluster).collect(),
        energies,
        cluster_energy,
        signal_cluster,
        gmm,
    })
}

// ---------------------------------------------------------------------------
// Parameter inference

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceSource {
    Supervised,
    Unsupervised,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub n_subcarriers: usize,
    pub delta_f: f64,
    /// Estimated occupancy, length `n_subcarriers`.
    pub occupancy: Vec<u8>,
    /// Complex-symbol modulation detected, when the method can tell.
    pub complex: Option<bool>,
    pub source: InferenceSource,
}

impl ParamEstimate {
    pub fn oracle(params: &TransmissionParams) -> Self {
        Self {
            n_subcarriers: params.n_subcarriers,
            delta_f: params.delta_f,
            occupancy: params.pattern.occupancy().to_vec(),
            complex: Some(params.modulation.is_complex()),
            source: InferenceSource::Oracle,
        }
    }

    /// `N` and `Δf` both match the truth.
    pub fn matches_grid(&self, params: &TransmissionParams) -> bool {
        self.n_subcarriers == params.n_subcarriers && (self.delta_f - params.delta_f).abs() <= 1e-6 * params.delta_f
    }

    /// Fraction of wrong occupancy entries; both vectors are zero-padded to
    /// the longer length.
    pub fn occupancy_error(&self, truth: &[u8]) -> f64 {
        let len = truth.len().max(self.occupancy.len());
        let wrong = (0..len)
            .filter(|&i| truth.get(i).copied().unwrap_or(0) != self.occupancy.get(i).copied().unwrap_or(0))
            .count();
        wrong as f64 / len.max(1) as f64
    }
}

/// Anything that turns observed rows into parameter estimates. `truth` is
/// only consulted by the oracle.
pub trait ParamInference: Sync {
    fn infer(&self, x: ArrayView2<f64>, truth: &[&TransmissionParams]) -> Result<Vec<ParamEstimate>>;
}

/// Knows the transmitter's parameters exactly.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleInference;

impl ParamInference for OracleInference {
    fn infer(&self, _x: ArrayView2<f64>, truth: &[&TransmissionParams]) -> Result<Vec<ParamEstimate>> {
        Ok(truth.iter().map(|p| ParamEstimate::oracle(p)).collect())
    }
}

fn snap<T: Copy>(value: f64, grid: &[T], to_f64: impl Fn(T) -> f64) -> T {
    *grid
        .iter()
        .min_by(|a, b| (to_f64(**a) - value).abs().total_cmp(&(to_f64(**b) - value).abs()))
        .expect("non-empty grid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub upper_hidden: Vec<usize>,
    pub lower_hidden: Vec<usize>,
    pub upper_train: TrainConfig,
    pub lower_train: TrainConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        let train = TrainConfig {
            lr: 1e-4,
            batch_size: 100,
            steps: 5000,
            optimizer: crate::nn::OptimizerKind::Adam,
            seed: 0,
        };
        Self {
            upper_hidden: vec![200, 400, 200, 50],
            lower_hidden: vec![350, 600, 400, 200],
            upper_train: train.clone(),
            lower_train: train,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedTrace {
    pub upper_loss: Vec<f64>,
    pub lower_loss: Vec<f64>,
}

/// Upper DNN regressing `[N, Δf]` (scaled by the grid maxima) and lower DNN
/// with a sigmoid head estimating the padded occupancy vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedAdversary {
    pub standardizer: Standardizer,
    pub upper: Mlp,
    pub lower: Mlp,
    pub n_grid: Vec<usize>,
    pub delta_f_grid: Vec<f64>,
    pub n_max: usize,
}

#[derive(Serialize, Deserialize)]
struct SupervisedMeta {
    standardizer: Standardizer,
    n_grid: Vec<usize>,
    delta_f_grid: Vec<f64>,
    n_max: usize,
}

/// Generating grids of `N` and `Δf` over a dataset's signal sources.
pub fn parameter_grids(config: &DatasetConfig) -> (Vec<usize>, Vec<f64>) {
    let mut ns = Vec::new();
    let mut dfs: Vec<f64> = Vec::new();
    for s in &config.sources {
        if let Source::Signal {
            n_subcarriers,
            delta_f_grid,
            ..
        } = s
        {
            ns.push(*n_subcarriers);
            dfs.extend(delta_f_grid);
        }
    }
    ns.sort_unstable();
    ns.dedup();
    dfs.sort_by(f64::total_cmp);
    dfs.dedup();
    (ns, dfs)
}

impl SupervisedAdversary {
    pub fn train(ds: &Dataset, cfg: &SupervisedConfig) -> Result<(Self, SupervisedTrace)> {
        let LabelSchema::Occupancy { n_max } = ds.manifest.config.labels else {
            return Err(Error::invalid("supervised training needs occupancy labels"));
        };
        let Labels::Occupancy { width, values } = &ds.labels else {
            return Err(Error::invalid("dataset carries no occupancy labels"));
        };
        let (n_grid, delta_f_grid) = parameter_grids(&ds.manifest.config);
        if n_grid.is_empty() {
            return Err(Error::EmptyInput("signal sources"));
        }
        let n_scale = *n_grid.last().unwrap() as f64;
        let df_scale = *delta_f_grid.last().unwrap();
        let fit_rows: Vec<usize> = (0..ds.rows().min(20_000)).collect();
        let standardizer = Standardizer::fit(ds.batch(&fit_rows).view());
        let dim = ds.dim();
        let mut rng = stream_rng(derive_seed(cfg.upper_train.seed, 0xD11), 0);
        let mut widths = vec![dim];
        widths.extend(&cfg.upper_hidden);
        widths.push(2);
        let mut upper = Mlp::new(&widths, Activation::Relu, Activation::Linear, &mut rng)?;
        let mut widths = vec![dim];
        widths.extend(&cfg.lower_hidden);
        widths.push(n_max);
        let mut lower = Mlp::new(&widths, Activation::Relu, Activation::Sigmoid, &mut rng)?;

        let inputs = |idx: &[usize]| {
            let mut x = ds.batch(idx);
            standardizer.apply(&mut x);
            x
        };
        let upper_loss = train_with(&mut upper, ds.rows(), Loss::SquaredError, &cfg.upper_train, |idx| {
            let y = Array2::from_shape_fn((idx.len(), 2), |(r, c)| {
                let v = values[idx[r] * width + n_max + c] as f64;
                if c == 0 {
                    v / n_scale
                } else {
                    v / df_scale
                }
            });
            (inputs(idx), y)
        })?;
        let lower_loss = train_with(&mut lower, ds.rows(), Loss::SquaredError, &cfg.lower_train, |idx| {
            let y = Array2::from_shape_fn((idx.len(), n_max), |(r, c)| values[idx[r] * width + c] as f64);
            (inputs(idx), y)
        })?;
        Ok((
            Self {
                standardizer,
                upper,
                lower,
                n_grid,
                delta_f_grid,
                n_max,
            },
            SupervisedTrace { upper_loss, lower_loss },
        ))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<ParamEstimate>> {
        let mut xs = x.to_owned();
        self.standardizer.apply(&mut xs);
        let up = self.upper.predict(xs.view())?;
        let lo = self.lower.predict(xs.view())?;
        let n_scale = *self.n_grid.last().unwrap() as f64;
        let df_scale = *self.delta_f_grid.last().unwrap();
        (0..x.nrows())
            .map(|r| {
                let n = snap(up[[r, 0]] * n_scale, &self.n_grid, |v| v as f64);
                let delta_f = snap(up[[r, 1]] * df_scale, &self.delta_f_grid, |v| v);
                let probs: Vec<f64> = lo.row(r).iter().take(n).copied().collect();
                Ok(ParamEstimate {
                    n_subcarriers: n,
                    delta_f,
                    occupancy: hard_threshold(&probs)?,
                    complex: None,
                    source: InferenceSource::Supervised,
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = SupervisedMeta {
            standardizer: self.standardizer.clone(),
            n_grid: self.n_grid.clone(),
            delta_f_grid: self.delta_f_grid.clone(),
            n_max: self.n_max,
        };
        save_checkpoint(
            path,
            serde_json::to_value(meta)?,
            &[("upper", &self.upper), ("lower", &self.lower)],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, nets) = load_checkpoint(path)?;
        let meta: SupervisedMeta = serde_json::from_value(meta)?;
        let mut upper = None;
        let mut lower = None;
        for (name, net) in nets {
            match name.as_str() {
                "upper" => upper = Some(net),
                "lower" => lower = Some(net),
                _ => {}
            }
        }
        let missing = |what: &str| Error::Malformed {
            path: path.into(),
            reason: format!("missing {what} network"),
        };
        Ok(Self {
            standardizer: meta.standardizer,
            upper: upper.ok_or_else(|| missing("upper"))?,
            lower: lower.ok_or_else(|| missing("lower"))?,
            n_grid: meta.n_grid,
            delta_f_grid: meta.delta_f_grid,
            n_max: meta.n_max,
        })
    }
}

impl ParamInference for SupervisedAdversary {
    fn infer(&self, x: ArrayView2<f64>, _truth: &[&TransmissionParams]) -> Result<Vec<ParamEstimate>> {
        self.predict(x)
    }
}

/// Threshold on `scores` maximizing balanced accuracy of `score > t`
/// against `labels`; midpoints between consecutive sorted scores are tried.
pub fn cv_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        // One class only: put the threshold outside the observed range.
        let ext = if pos == 0 {
            scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            scores.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0
        };
        return if ext.is_finite() { ext } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Threshold below everything: all predicted positive.
    let (mut tp, mut tn) = (pos, 0usize);
    let bal = |tp: usize, tn: usize| 0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64);
    let mut best = (bal(tp, tn), scores[order[0]] - 1e-9);
    for (i, &k) in order.iter().enumerate() {
        if labels[k] {
            tp -= 1;
        } else {
            tn += 1;
        }
        let next = order.get(i + 1).map(|&j| scores[j]);
        if next == Some(scores[k]) {
            continue;
        }
        let t = next.map_or(scores[k] + 1e-9, |nx| 0.5 * (scores[k] + nx));
        let b = bal(tp, tn);
        if b > best.0 {
            best = (b, t);
        }
    }
    best.1
}

/// VAE-based adversary: each subcarrier is read from its mapped latent(s)
/// and declared active when the latent magnitude exceeds a per-subcarrier
/// threshold chosen by cross-validation.
#[derive(Clone, Debug)]
pub struct UnsupervisedAdversary {
    pub vae: VaeModel,
    /// Latent indices per subcarrier (one for real symbols, two for complex).
    pub latents: Vec<Vec<usize>>,
    pub thresholds: Vec<f64>,
    /// `N̂`: informative latents per latents-per-subcarrier.
    pub n_estimate: usize,
    pub delta_f: f64,
    pub complex: bool,
}

impl UnsupervisedAdversary {
    /// Every one of the `n_subcarriers` subcarriers must be mapped to at
    /// least one latent. Thresholds are fitted on the labeled `validation`
    /// rows.
    pub fn fit(
        vae: VaeModel,
        map: &LatentMap,
        n_subcarriers: usize,
        delta_f: f64,
        validation: &Dataset,
    ) -> Result<Self> {
        let per = map.latents_per_subcarrier().max(1);
        let complex = per >= 2;
        let latents: Vec<Vec<usize>> = (0..n_subcarriers).map(|n| map.latents_for(n)).collect();
        if let Some(n) = latents.iter().position(|l| l.is_empty()) {
            return Err(Error::UnmappedSubcarrier(n));
        }
        let n_estimate = map.informative_count() / per;
        let z = encode_chunked(&vae, validation.to_array().view())?;
        let mut thresholds = Vec::with_capacity(n_subcarriers);
        for (n, lat) in latents.iter().enumerate() {
            let scores: Vec<f64> = z.rows().into_iter().map(|r| latent_magnitude(r.as_slice().unwrap(), lat)).collect();
            let labels: Vec<bool> = (0..validation.rows())
                .map(|i| validation.occupancy(i).map(|u| u[n] > 0.5).unwrap_or(false))
                .collect();
            thresholds.push(cv_threshold(&scores, &labels));
        }
        Ok(Self {
            vae,
            latents,
            thresholds,
            n_estimate,
            delta_f,
            complex,
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<ParamEstimate>> {
        let z = encode_chunked(&self.vae, x)?;
        Ok(z.rows()
            .into_iter()
            .map(|r| {
                let r = r.as_slice().unwrap();
                let mut occupancy: Vec<u8> = self
                    .latents
                    .iter()
                    .zip(&self.thresholds)
                    .map(|(lat, &t)| u8::from(latent_magnitude(r, lat) > t))
                    .collect();
                occupancy.resize(self.n_estimate, 0);
                ParamEstimate {
                    n_subcarriers: self.n_estimate,
                    delta_f: self.delta_f,
                    occupancy,
                    complex: Some(self.complex),
                    source: InferenceSource::Unsupervised,
                }
            })
            .collect())
    }
}

fn latent_magnitude(z: &[f64], latents: &[usize]) -> f64 {
    latents.iter().map(|&j| z[j] * z[j]).sum::<f64>().sqrt()
}

impl ParamInference for UnsupervisedAdversary {
    fn infer(&self, x: ArrayView2<f64>, _truth: &[&TransmissionParams]) -> Result<Vec<ParamEstimate>> {
        self.predict(x)
    }
}

// ---------------------------------------------------------------------------
// BER evaluation

/// One Monte-Carlo evaluation: transmitter frames are observed over the
/// `observation` link, parameters are inferred from the observation, and a
/// frame built from the estimate crosses the `link` channel to the receiver
/// at each `E_b/N_0` of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkScenario {
    /// Transmitter distribution and observation link (TA for spoofing, TR
    /// for the legitimate receiver). `rows` is ignored.
    pub observation: DatasetConfig,
    /// Channel between the sender of the decoded frame and the receiver.
    pub link: ChannelKind,
    pub eb_n0_db: Vec<f64>,
    pub frames: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub eb_n0_db: f64,
    pub ber: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bits: u64,
}

impl BerPoint {
    fn new(eb_n0_db: f64, errors: f64, bits: u64) -> Self {
        let ber = if bits == 0 { 0.0 } else { errors / bits as f64 };
        let h = proportion_ci(ber, bits as f64);
        Self {
            eb_n0_db,
            ber,
            ci_low: (ber - h).max(0.0),
            ci_high: (ber + h).min(1.0),
            bits,
        }
    }

    /// Standard error of the estimate.
    pub fn sigma(&self) -> f64 {
        (self.ber * (1.0 - self.ber) / (self.bits as f64).max(1.0)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpoofReport {
    pub ber: Vec<BerPoint>,
    /// Same frames and noise with the true parameters.
    pub baseline: Vec<BerPoint>,
    pub occupancy_error: f64,
    /// Fraction of frames whose `N` or `Δf` estimate was wrong.
    pub param_failure_rate: f64,
    pub frames: usize,
}

impl SpoofReport {
    pub fn mean_ber(&self) -> f64 {
        self.ber.iter().map(|p| p.ber).sum::<f64>() / self.ber.len().max(1) as f64
    }
}

/// Expected bit errors and bit count of one frame sent with `estimate` and
/// decoded by a receiver that knows `truth`.
pub fn frame_errors(
    truth: &TransmissionParams,
    estimate: &ParamEstimate,
    eb_n0_db: f64,
    link: &ChannelKind,
    seed: u64,
) -> Result<(f64, u64)> {
    let modulation = truth.modulation;
    let b = modulation.bits_per_symbol();
    let u = truth.pattern.occupancy();
    let bits = (truth.active_count() * b) as u64;
    if !estimate.matches_grid(truth) {
        return Ok((0.5 * bits as f64, bits));
    }
    let n = truth.n_subcarriers;
    let mut rng = stream_rng(seed, 0);
    // Unit-energy symbols on every subcarrier the sender believes active.
    let sent: Vec<usize> = (0..n).filter(|&i| estimate.occupancy.get(i) == Some(&1)).collect();
    let payload = random_bits(sent.len() * b, &mut rng);
    let symbols = modulation.modulate(&payload)?;
    let mut amps = vec![Complex64::new(0.0, 0.0); n];
    for (&i, &s) in sent.iter().zip(&symbols) {
        amps[i] = s;
    }
    let t_s = truth.critical_t_s();
    let frame = synthesize_amplitudes(&amps, truth.delta_f, n, t_s)?;
    // E_b = 1 / b per subcarrier; the DFT spreads N0 over N bins.
    let n0 = n as f64 / (b as f64 * db_to_lin(eb_n0_db));
    let (rx, gain) = ChannelSpec::new(link.clone(), n0)?.apply(&frame, &mut rng)?;
    let spec = SpectrumAnalyzer::new(n).spectrum(&rx.samples);
    let mut errors = 0.0;
    for i in (0..n).filter(|&i| u[i] == 1) {
        match sent.iter().position(|&k| k == i) {
            Some(pos) => {
                let y = spec[i] / gain;
                let decided = modulation.demodulate(&[y]);
                errors += decided
                    .iter()
                    .zip(&payload[pos * b..(pos + 1) * b])
                    .filter(|(a, b)| a != b)
                    .count() as f64;
            }
            None => errors += 0.5 * b as f64,
        }
    }
    Ok((errors, bits))
}

const EVAL_CHUNK: usize = 2000;

/// Spoofed-frame BER at the receiver over the scenario's sweep, with the
/// oracle-parameter baseline on the same frames and noise.
pub fn spoof_ber_eval<I: ParamInference + ?Sized>(scenario: &LinkScenario, adversary: &I) -> Result<SpoofReport> {
    if scenario.eb_n0_db.is_empty() {
        return Err(Error::EmptyInput("Eb/N0 sweep"));
    }
    if scenario.frames == 0 {
        return Err(Error::EmptyInput("frames"));
    }
    if !matches!(scenario.link, ChannelKind::Awgn | ChannelKind::RayleighFlat) {
        return Err(Error::invalid("the decoding link must be AWGN or flat Rayleigh"));
    }
    let obs = &scenario.observation;
    if obs.sources.iter().any(|s| matches!(s, Source::Noise)) {
        return Err(Error::invalid("BER scenarios need signal-only sources"));
    }
    let (n0, _) = noise_level(obs, scenario.seed)?;
    let points = scenario.eb_n0_db.len();
    let mut err = vec![0.0; points];
    let mut base_err = vec![0.0; points];
    let mut bits = vec![0u64; points];
    let mut occ_err = 0.0;
    let mut failures = 0usize;
    for start in (0..scenario.frames).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(scenario.frames);
        let rows = (start..end)
            .into_par_iter()
            .map(|r| generate_row(obs, n0, scenario.seed, r as u64))
            .collect::<Result<Vec<_>>>()?;
        let dim = obs.dim();
        let mut x = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&r.x));
        }
        let truth: Vec<&TransmissionParams> = rows.iter().map(|r| r.params.as_ref().expect("signal row")).collect();
        let est = adversary.infer(x.view(), &truth)?;
        let per_frame = (0..rows.len())
            .into_par_iter()
            .map(|i| {
                let frame_seed = derive_seed(scenario.seed ^ 0xB17, (start + i) as u64);
                let oracle = ParamEstimate::oracle(truth[i]);
                scenario
                    .eb_n0_db
                    .iter()
                    .enumerate()
                    .map(|(k, &eb)| {
                        let seed = derive_seed(frame_seed, k as u64);
                        let (e, nb) = frame_errors(truth[i], &est[i], eb, &scenario.link, seed)?;
                        let (be, _) = frame_errors(truth[i], &oracle, eb, &scenario.link, seed)?;
                        Ok((e, be, nb))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, frame) in per_frame.iter().enumerate() {
            for (k, &(e, be, nb)) in frame.iter().enumerate() {
                err[k] += e;
                base_err[k] += be;
                bits[k] += nb;
            }
            occ_err += est[i].occupancy_error(truth[i].pattern.occupancy());
            failures += usize::from(!est[i].matches_grid(truth[i]));
        }
    }
    let curve = |e: &[f64]| {
        scenario
            .eb_n0_db
            .iter()
            .enumerate()
            .map(|(k, &eb)| BerPoint::new(eb, e[k], bits[k]))
            .collect()
    };
    Ok(SpoofReport {
        ber: curve(&err),
        baseline: curve(&base_err),
        occupancy_error: occ_err / scenario.frames as f64,
        param_failure_rate: failures as f64 / scenario.frames as f64,
        frames: scenario.frames,
    })
}

/// Legitimate transmitter-to-receiver reliability: the receiver infers the
/// parameters from its own observation (the scenario's observation link is
/// the TR link) and decodes the transmitter's frame.
pub fn rx_reliability_eval<I: ParamInference + ?Sized>(scenario: &LinkScenario, receiver: &I) -> Result<SpoofReport> {
    spoof_ber_eval(scenario, receiver)
}

/// Per-frame occupancy error rate of `inference` on labeled rows.
pub fn occupancy_error_rate<I: ParamInference + ?Sized>(inference: &I, ds: &Dataset) -> Result<f64> {
    let LabelSchema::Occupancy { n_max } = ds.manifest.config.labels else {
        return Err(Error::invalid("occupancy labels required"));
    };
    let mut total = 0.0;
    for start in (0..ds.rows()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.rows())).collect();
        let x = ds.batch(&idx);
        let est = inference.infer(x.view(), &[])?;
        for (e, &i) in est.iter().zip(&idx) {
            let lab = ds.occupancy(i).expect("occupancy labels");
            let n = lab[n_max] as usize;
            let u: Vec<u8> = lab[..n].iter().map(|&v| u8::from(v > 0.5)).collect();
            total += e.occupancy_error(&u);
        }
    }
    Ok(total / ds.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{Modulation, PatternFamily, SubcarrierPattern};
    use rand::Rng;

    fn bpsk_params(u: Vec<u8>, delta_f: f64) -> TransmissionParams {
        let n = u.len();
        TransmissionParams::new(
            delta_f,
            SubcarrierPattern::from_occupancy(u).unwrap(),
            vec![1.0; n],
            Modulation::Bpsk,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn q_function_reference_values() {
        assert!((q_function(0.0) - 0.5).abs() < 1e-15);
        // Q(1.96) = 0.024997895...
        assert!((q_function(1.96) - 0.024_997_895).abs() < 1e-8);
        assert!((bpsk_awgn_ber(0.0) - 0.078_649_6).abs() < 1e-6);
        assert!((bpsk_awgn_ber(4.0) - 0.012_500_1).abs() < 1e-6);
        assert!((bpsk_awgn_ber(8.0) - 1.909_1e-4).abs() < 1e-7);
    }

    #[test]
    fn gmm_recovers_two_blobs() {
        let mut rng = stream_rng(1, 0);
        let mut z = Array2::zeros((400, 2));
        for i in 0..400 {
            let c = if i % 2 == 0 { -3.0 } else { 3.0 };
            z[[i, 0]] = c + crate::rng::standard_normal(&mut rng);
            z[[i, 1]] = crate::rng::standard_normal(&mut rng);
        }
        let g = DiagonalGmm::fit(z.view(), 100, 1e-10).unwrap();
        let p = g.predict(z.view());
        let agree = (0..400).filter(|&i| p[i] == p[0] && i % 2 == 0 || p[i] != p[0] && i % 2 == 1).count();
        assert!(agree >= 395, "{agree}");
        assert!((g.weights[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn gmm_rejects_tiny_input() {
        let z = Array2::zeros((2, 3));
        assert!(matches!(DiagonalGmm::fit(z.view(), 10, 1e-6), Err(Error::DegenerateClustering(_))));
    }

    #[test]
    fn energy_histograms_separate_disjoint_supports() {
        let e: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 + 0.01 * i as f64 } else { 10.0 + 0.01 * i as f64 }).collect();
        let s: Vec<bool> = (0..100).map(|i| i >= 50).collect();
        let h = EnergyHistograms::new(&e, &s, 20);
        assert!(h.modes_separated());
        let mixed = EnergyHistograms::new(&e, &vec![true; 100], 20);
        assert!(!mixed.modes_separated());
    }

    #[test]
    fn cv_threshold_maximizes_balanced_accuracy() {
        let scores = [0.1, 0.2, 0.3, 0.9, 1.0, 1.1];
        let labels = [false, false, false, true, true, true];
        let t = cv_threshold(&scores, &labels);
        assert!(t > 0.3 && t < 0.9, "{t}");
        // Imbalanced: one positive among many negatives still separated.
        let scores = [0.0, 0.1, 0.2, 0.3, 0.4, 5.0];
        let labels = [false, false, false, false, false, true];
        let t = cv_threshold(&scores, &labels);
        assert!(t > 0.4 && t < 5.0);
    }

    #[test]
    fn oracle_estimate_has_no_occupancy_error() {
        let p = bpsk_params(vec![1, 0, 1, 1], 15e3);
        let e = ParamEstimate::oracle(&p);
        assert_eq!(e.occupancy_error(p.pattern.occupancy()), 0.0);
        assert!(e.matches_grid(&p));
    }

    #[test]
    fn wrong_grid_counts_whole_frame_at_half() {
        let p = bpsk_params(vec![1, 1, 0, 1], 15e3);
        let mut e = ParamEstimate::oracle(&p);
        e.delta_f = 30e3;
        let (err, bits) = frame_errors(&p, &e, 10.0, &ChannelKind::Awgn, 1).unwrap();
        assert_eq!(bits, 3);
        assert_eq!(err, 1.5);
    }

    #[test]
    fn dropped_subcarrier_contributes_half_its_bits() {
        // At very high Eb/N0 the only errors are bookkeeping ones.
        let p = bpsk_params(vec![1, 1, 0, 1, 1, 0, 1, 1], 15e3);
        let mut e = ParamEstimate::oracle(&p);
        e.occupancy[3] = 0;
        e.occupancy[2] = 1; // extra subcarrier: ignored
        let (err, bits) = frame_errors(&p, &e, 60.0, &ChannelKind::Awgn, 2).unwrap();
        assert_eq!(bits, 6);
        assert_eq!(err, 0.5);
        let q = TransmissionParams::new(
            15e3,
            p.pattern.clone(),
            vec![1.0; 8],
            Modulation::Qam16,
            0.0,
        )
        .unwrap();
        let mut e = ParamEstimate::oracle(&q);
        e.occupancy[0] = 0;
        let (err, bits) = frame_errors(&q, &e, 60.0, &ChannelKind::RayleighFlat, 3).unwrap();
        assert_eq!(bits, 24);
        assert_eq!(err, 2.0);
    }

    #[test]
    fn oracle_frames_match_bpsk_theory() {
        let mut rng = stream_rng(5, 0);
        let eb = 2.0;
        let mut errors = 0.0;
        let mut bits = 0u64;
        for f in 0..3000 {
            let p = TransmissionParams::random(16, 15e3, &PatternFamily::Random { prob: 0.5 }, Modulation::Bpsk, &mut rng)
                .unwrap();
            let (e, b) = frame_errors(&p, &ParamEstimate::oracle(&p), eb, &ChannelKind::Awgn, f).unwrap();
            errors += e;
            bits += b;
        }
        let ber = errors / bits as f64;
        let theory = bpsk_awgn_ber(eb);
        let sigma = (theory * (1.0 - theory) / bits as f64).sqrt();
        assert!((ber - theory).abs() < 4.0 * sigma, "{ber} vs {theory}");
    }

    #[test]
    fn spoof_eval_with_oracle_equals_baseline() {
        let obs = DatasetConfig {
            sources: vec![Source::signal(8, 15e3, PatternFamily::Random { prob: 0.5 }, Modulation::Bpsk)],
            n1: 16,
            t_s: 1.0 / (16.0 * 15e3),
            snr_db: 10.0,
            channel: ChannelKind::Awgn,
            labels: LabelSchema::Occupancy { n_max: 8 },
            rows: 1,
        };
        let sc = LinkScenario {
            observation: obs,
            link: ChannelKind::Awgn,
            eb_n0_db: vec![0.0, 4.0],
            frames: 500,
            seed: 9,
        };
        let r = spoof_ber_eval(&sc, &OracleInference).unwrap();
        assert_eq!(r.ber, r.baseline);
        assert_eq!(r.param_failure_rate, 0.0);
        assert_eq!(r.occupancy_error, 0.0);
        assert!(r.ber[0].ber > r.ber[1].ber);
        let bad = LinkScenario {
            eb_n0_db: vec![],
            ..sc
        };
        assert!(spoof_ber_eval(&bad, &OracleInference).is_err());
    }

    /// Always guesses a fixed wrong spacing.
    struct WrongSpacing;

    impl ParamInference for WrongSpacing {
        fn infer(&self, _x: ArrayView2<f64>, truth: &[&TransmissionParams]) -> Result<Vec<ParamEstimate>> {
            Ok(truth
                .iter()
                .map(|p| ParamEstimate {
                    delta_f: 2.0 * p.delta_f,
                    ..ParamEstimate::oracle(p)
                })
                .collect())
        }
    }

    #[test]
    fn failed_grid_inference_gives_half_ber() {
        let obs = DatasetConfig {
            sources: vec![Source::signal(8, 15e3, PatternFamily::Ofdm, Modulation::Bpsk)],
            n1: 16,
            t_s: 1.0 / (16.0 * 15e3),
            snr_db: 10.0,
            channel: ChannelKind::Awgn,
            labels: LabelSchema::None,
            rows: 1,
        };
        let sc = LinkScenario {
            observation: obs,
            link: ChannelKind::RayleighFlat,
            eb_n0_db: vec![5.0],
            frames: 50,
            seed: 1,
        };
        let r = spoof_ber_eval(&sc, &WrongSpacing).unwrap();
        assert_eq!(r.ber[0].ber, 0.5);
        assert_eq!(r.param_failure_rate, 1.0);
    }

    #[test]
    fn snapping_picks_nearest_grid_value() {
        assert_eq!(snap(31.2, &[16usize, 32], |v| v as f64), 32);
        assert_eq!(snap(37e3, &[15e3, 30e3, 45e3, 60e3], |v| v), 30e3);
        let mut rng = stream_rng(3, 0);
        for _ in 0..100 {
            let v: f64 = rng.random_range(0.0..100.0);
            let s = snap(v, &[10.0, 20.0, 50.0], |x| x);
            assert!([10.0, 20.0, 50.0].iter().all(|g| (g - v).abs() >= (s - v).abs()));
        }
    }
}
