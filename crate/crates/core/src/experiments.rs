//! Named experiment recipes shared by the command-line runner and the
//! acceptance tests. Each recipe exists in a `desk` profile sized for a
//! single CPU core and a `paper` profile with full-scale sizes; the two
//! differ only in row counts, step budgets and Monte-Carlo frame counts.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    occupancy_error_rate, sense_spectrum, spoof_ber_eval, EnergyHistograms, LinkScenario, OracleInference,
    SpoofReport, SupervisedAdversary, SupervisedConfig, SupervisedTrace, UnsupervisedAdversary,
};
use crate::channel::ChannelKind;
use crate::cyclo::{
    ambiguity_set, caf_peaks, estimate_caf, interleaved_record, peak_spacing, InterleavedCase,
    InterleavedRecordConfig, AMBIGUOUS_CASES,
};
use crate::dataset::{build, Dataset, DatasetConfig, LabelSchema, Source};
use crate::error::{Error, Result};
use crate::metrics::{latent_map, traversal_metric, BinGeometry, LatentMap, TraversalConfig, TraversalReport};
use crate::nn::{
    argmax, evaluate_loss, one_hot, train, Activation, Loss, Mlp, OptimizerKind, Standardizer, TrainConfig,
};
use crate::rng::{derive_seed, stream_rng};
use crate::vae::{
    train_variant_with_warmup, NegativeSampling, TrainTrace, VaeArchitecture, VaeModel, Variant,
};
use crate::waveform::{Modulation, PatternFamily};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::invalid(format!("unknown profile {other:?} (desk | paper)"))),
        }
    }
}

/// NB-IoT subcarrier spacings in Hz.
pub const NBIOT_DELTA_F: [f64; 4] = [15e3, 30e3, 45e3, 60e3];

/// Sampling interval covering `n` subcarriers at the largest NB-IoT spacing
/// with integer-microsecond multipath taps.
pub fn nbiot_t_s(n: usize) -> f64 {
    if n <= 16 {
        1e-6
    } else {
        0.5e-6
    }
}

/// Dataset of single NC-OFDM symbols on the NB-IoT spacing grid.
pub fn nbiot_dataset(
    n: usize,
    family: PatternFamily,
    modulation: Modulation,
    snr_db: f64,
    n1: usize,
    rows: usize,
) -> DatasetConfig {
    DatasetConfig {
        sources: vec![Source::Signal {
            n_subcarriers: n,
            delta_f_grid: NBIOT_DELTA_F.to_vec(),
            family,
            modulation,
        }],
        n1,
        t_s: nbiot_t_s(n),
        snr_db,
        channel: ChannelKind::Awgn,
        labels: LabelSchema::Occupancy { n_max: n },
        rows,
    }
}

// ---------------------------------------------------------------------------
// CAF ambiguity

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CafCaseOutcome {
    pub case: InterleavedCase,
    pub lags: Vec<i64>,
    pub magnitudes: Vec<f64>,
    pub peaks: Vec<i64>,
    /// Median peak gap in seconds.
    pub spacing_s: Option<f64>,
    pub candidates: Vec<InterleavedCase>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CafConfig {
    pub record: InterleavedRecordConfig,
    pub max_lag: i64,
    pub peak_threshold: f64,
    pub seed: u64,
}

impl Default for CafConfig {
    fn default() -> Self {
        Self {
            record: InterleavedRecordConfig::default(),
            max_lag: 400,
            peak_threshold: 0.3,
            seed: 1,
        }
    }
}

/// CAF at zero cyclic frequency of one interleaved case.
pub fn caf_case(case: InterleavedCase, cfg: &CafConfig) -> Result<CafCaseOutcome> {
    let record = interleaved_record(case, &cfg.record, cfg.seed)?;
    let grid = estimate_caf(&record.samples, 0.0, -cfg.max_lag, cfg.max_lag, cfg.record.t_s)?;
    let peaks = caf_peaks(&grid, cfg.peak_threshold)?;
    let spacing_s = peak_spacing(&peaks).map(|s| s * cfg.record.t_s);
    let candidates = ambiguity_set(&peaks, cfg.record.t_s, &AMBIGUOUS_CASES, cfg.record.t_s)?;
    Ok(CafCaseOutcome {
        case,
        magnitudes: grid.magnitudes(),
        lags: grid.lags,
        peaks,
        spacing_s,
        candidates,
    })
}

pub fn caf_all_cases(cfg: &CafConfig) -> Result<Vec<CafCaseOutcome>> {
    AMBIGUOUS_CASES.par_iter().map(|&c| caf_case(c, cfg)).collect()
}

/// Peak sets agree when they have equal length and every pair of
/// corresponding lags differs by at most `tol` bins.
pub fn peak_sets_match(a: &[i64], b: &[i64], tol: i64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

// ---------------------------------------------------------------------------
// Interleaved-case classifier

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub train_rows: usize,
    pub test_rows: usize,
    pub snr_db: f64,
    /// Complex samples per row (input width is twice this).
    pub n1: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(profile: Profile, seed: u64) -> Self {
        let (train_rows, steps) = match profile {
            Profile::Desk => (50_000, 2000),
            Profile::Paper => (500_000, 2000),
        };
        Self {
            train_rows,
            test_rows: 10_000,
            snr_db: 5.0,
            n1: 75,
            // SGD at 5e-4 applied to the batch-summed loss; the trainer
            // averages over the batch, so the step is scaled by its size.
            train: TrainConfig {
                lr: 5e-4 * 500.0,
                batch_size: 500,
                steps,
                optimizer: OptimizerKind::Sgd,
                seed,
            },
            seed,
        }
    }

    /// Three classes, one per ambiguous interleaved case.
    pub fn dataset(&self, rows: usize) -> DatasetConfig {
        DatasetConfig {
            sources: AMBIGUOUS_CASES
                .iter()
                .map(|c| Source::signal(64, 1.0 / c.t_u, PatternFamily::Interleaved { q: c.q }, Modulation::Bpsk))
                .collect(),
            n1: self.n1,
            t_s: 1e-6,
            snr_db: self.snr_db,
            channel: ChannelKind::Awgn,
            labels: LabelSchema::Class,
            rows,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierOutcome {
    pub hidden: Vec<usize>,
    pub loss_trace: Vec<f64>,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierComparison {
    pub shallow: ClassifierOutcome,
    pub deep: ClassifierOutcome,
}

/// Trains the one-hidden-layer (50) and three-hidden-layer (500, 250, 50)
/// classifiers on identical data and batches.
pub fn run_interleaved_classifier(cfg: &ClassifierConfig) -> Result<ClassifierComparison> {
    let train_ds = build(&cfg.dataset(cfg.train_rows), cfg.seed)?;
    let test_ds = build(&cfg.dataset(cfg.test_rows), derive_seed(cfg.seed, 0x7E57))?;
    let prep = |ds: &Dataset, std: &Standardizer| {
        let mut x = ds.to_array();
        std.apply(&mut x);
        let labels: Vec<usize> = (0..ds.rows()).map(|i| ds.class(i).unwrap_or(0) as usize).collect();
        (x, labels)
    };
    let std = Standardizer::fit(train_ds.to_array().view());
    let (xtr, ytr) = prep(&train_ds, &std);
    let (xte, yte) = prep(&test_ds, &std);
    let ytr1 = one_hot(&ytr, 3);
    let yte1 = one_hot(&yte, 3);
    let run = |hidden: &[usize]| -> Result<ClassifierOutcome> {
        let mut widths = vec![xtr.ncols()];
        widths.extend(hidden);
        widths.push(3);
        let mut rng = stream_rng(derive_seed(cfg.seed, 0xC1A55), 0);
        let mut net = Mlp::new(&widths, Activation::Relu, Activation::Linear, &mut rng)?;
        let loss_trace = train(&mut net, xtr.view(), ytr1.view(), Loss::SoftmaxCrossEntropy, &cfg.train)?;
        let test_loss = evaluate_loss(&net, xte.view(), yte1.view(), Loss::SoftmaxCrossEntropy)?;
        let out = net.predict(xte.view())?;
        let hits = out
            .rows()
            .into_iter()
            .zip(&yte)
            .filter(|(r, &y)| argmax(r.as_slice().unwrap()) == y)
            .count();
        Ok(ClassifierOutcome {
            hidden: hidden.to_vec(),
            loss_trace,
            test_loss,
            test_accuracy: hits as f64 / yte.len() as f64,
        })
    };
    Ok(ClassifierComparison {
        shallow: run(&[50])?,
        deep: run(&[500, 250, 50])?,
    })
}

// ---------------------------------------------------------------------------
// Baseline BER

/// Oracle-parameter BPSK transmissions over AWGN, random occupancy, N = 16.
pub fn baseline_scenario(eb_n0_db: &[f64], frames: usize, seed: u64) -> LinkScenario {
    LinkScenario {
        observation: nbiot_dataset(16, PatternFamily::Random { prob: 0.5 }, Modulation::Bpsk, 10.0, 80, 1),
        link: ChannelKind::Awgn,
        eb_n0_db: eb_n0_db.to_vec(),
        frames,
        seed,
    }
}

pub fn run_baseline_ber(eb_n0_db: &[f64], frames: usize, seed: u64) -> Result<SpoofReport> {
    spoof_ber_eval(&baseline_scenario(eb_n0_db, frames, seed), &OracleInference)
}

// ---------------------------------------------------------------------------
// Latent structure

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentExperiment {
    pub data: DatasetConfig,
    pub arch: VaeArchitecture,
    pub variant: Variant,
    pub negatives: NegativeSampling,
    pub eta: f64,
    pub train: TrainConfig,
    pub warmup_steps: usize,
    /// Rows used for traversals.
    pub eval_rows: usize,
    pub traversal_c: f64,
    pub traversal_k: usize,
    pub epsilon: f64,
    pub seed: u64,
}

/// SNR of the latent-structure datasets.
pub const LATENT_SNR_DB: f64 = 20.0;

fn vae_train_config(profile: Profile, seed: u64) -> (TrainConfig, usize) {
    let steps = match profile {
        Profile::Desk => 3000,
        Profile::Paper => 50_000,
    };
    (
        TrainConfig {
            lr: 5e-4,
            batch_size: 100,
            steps,
            optimizer: OptimizerKind::Adam,
            seed,
        },
        steps / 2,
    )
}

fn vae_hidden() -> Vec<usize> {
    vec![200, 400, 600, 400, 200]
}

impl LatentExperiment {
    fn new(data: DatasetConfig, nz: usize, variant: Variant, profile: Profile, seed: u64) -> Self {
        let (train, warmup_steps) = vae_train_config(profile, seed);
        Self {
            arch: VaeArchitecture {
                input_dim: data.dim(),
                hidden: vae_hidden(),
                nz,
                discriminator_hidden: vec![64, 64, 64],
            },
            data,
            variant,
            negatives: NegativeSampling::Prior,
            eta: 1.0,
            train,
            warmup_steps,
            eval_rows: 500,
            traversal_c: 3.0,
            traversal_k: 40,
            epsilon: 0.5,
            seed,
        }
    }

    /// Three fixed occupancy patterns over N = 8 subcarriers, n1 = 16,
    /// N_z = 16, FactorVAE with gamma = 5.
    pub fn structured(profile: Profile, seed: u64) -> Self {
        let rows = match profile {
            Profile::Desk => 100_000,
            Profile::Paper => 500_000,
        };
        let data = DatasetConfig {
            sources: vec![Source::signal(
                8,
                15e3,
                PatternFamily::three_case_structured(),
                Modulation::Bpsk,
            )],
            n1: 16,
            t_s: 1.0 / (16.0 * 15e3),
            snr_db: LATENT_SNR_DB,
            channel: ChannelKind::Awgn,
            labels: LabelSchema::Occupancy { n_max: 8 },
            rows,
        };
        Self::new(data, 16, Variant::Factor { gamma: 5.0 }, profile, seed)
    }

    /// Random occupancy over N = 16 subcarriers, n1 = 32. BPSK uses
    /// N_z = 20; complex symbols need two latents per subcarrier, so the
    /// 16-QAM variant uses N_z = 40.
    pub fn random(profile: Profile, modulation: Modulation, variant: Variant, seed: u64) -> Self {
        let rows = match profile {
            Profile::Desk => 100_000,
            Profile::Paper => 500_000,
        };
        let data = DatasetConfig {
            sources: vec![Source::signal(16, 15e3, PatternFamily::Random { prob: 0.5 }, modulation)],
            n1: 32,
            t_s: 1.0 / (32.0 * 15e3),
            snr_db: LATENT_SNR_DB,
            channel: ChannelKind::Awgn,
            labels: LabelSchema::Occupancy { n_max: 16 },
            rows,
        };
        let nz = if modulation.is_complex() { 40 } else { 20 };
        Self::new(data, nz, variant, profile, seed)
    }

    pub fn geometry(&self) -> Result<BinGeometry> {
        match self.data.sources.first() {
            Some(Source::Signal {
                n_subcarriers,
                delta_f_grid,
                ..
            }) if delta_f_grid.len() == 1 => Ok(BinGeometry {
                n_subcarriers: *n_subcarriers,
                delta_f: delta_f_grid[0],
                t_s: self.data.t_s,
            }),
            _ => Err(Error::invalid("latent experiments need one signal source with a fixed spacing")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LatentOutcome {
    pub model: VaeModel,
    pub trace: TrainTrace,
    pub map: LatentMap,
    /// Mean element-wise `|x - x_hat|` on the traversal rows.
    pub recon_error: f64,
    /// Traversal scores (corrected mode) at epsilon 0.5 and 1.
    pub traversal: Vec<(f64, TraversalReport)>,
    /// Subcarriers active in at least one training row.
    pub active_union: Vec<usize>,
    pub dataset: Dataset,
}

pub fn train_latent_model(exp: &LatentExperiment, ds: &Dataset) -> Result<(VaeModel, TrainTrace)> {
    let mut rng = stream_rng(derive_seed(exp.seed, 0x7AE), 0);
    let mut model = VaeModel::new(&exp.arch, exp.variant, exp.eta, exp.negatives, &mut rng)?;
    let trace = train_variant_with_warmup(&mut model, ds.rows(), &exp.train, exp.warmup_steps, |idx| ds.batch(idx))?;
    Ok((model, trace))
}

/// Subcarrier indices active in at least one row of an occupancy-labeled set.
pub fn active_union(ds: &Dataset) -> Vec<usize> {
    let LabelSchema::Occupancy { n_max } = ds.manifest.config.labels else {
        return Vec::new();
    };
    let mut seen = vec![false; n_max];
    for i in 0..ds.rows() {
        if let Some(u) = ds.occupancy(i) {
            for (s, &v) in seen.iter_mut().zip(u) {
                *s |= v > 0.5;
            }
        }
    }
    (0..n_max).filter(|&n| seen[n]).collect()
}

pub fn run_latent(exp: &LatentExperiment) -> Result<LatentOutcome> {
    let ds = build(&exp.data, exp.seed)?;
    let (model, trace) = train_latent_model(exp, &ds)?;
    evaluate_latent(exp, model, trace, ds)
}

pub fn evaluate_latent(exp: &LatentExperiment, model: VaeModel, trace: TrainTrace, ds: Dataset) -> Result<LatentOutcome> {
    let eval_idx: Vec<usize> = (0..exp.eval_rows.min(ds.rows())).collect();
    let x = ds.batch(&eval_idx);
    let map = latent_map(
        &model,
        x.view(),
        exp.geometry()?,
        exp.traversal_c,
        exp.traversal_k,
        exp.epsilon,
    )?;
    let recon = model.reconstruct(x.view())?;
    let recon_error = (&recon - &x).mapv(f64::abs).mean().unwrap_or(0.0);
    let mut traversal = Vec::new();
    for eps in [0.5, 1.0] {
        let mut cfg = TraversalConfig::new(eps);
        cfg.c = exp.traversal_c;
        cfg.k = exp.traversal_k;
        match traversal_metric(&model, x.view(), &cfg) {
            Ok(r) => traversal.push((eps, r)),
            Err(Error::NoInformativeLatents) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(LatentOutcome {
        model,
        trace,
        map,
        recon_error,
        traversal,
        active_union: active_union(&ds),
        dataset: ds,
    })
}

// ---------------------------------------------------------------------------
// Spectrum sensing

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensingExperiment {
    pub data: DatasetConfig,
    pub arch: VaeArchitecture,
    pub train: TrainConfig,
    pub warmup_steps: usize,
    pub histogram_bins: usize,
    pub seed: u64,
}

impl SensingExperiment {
    /// Equal mix of pure noise and random-occupancy N = 16 NB-IoT symbols.
    pub fn new(profile: Profile, snr_db: f64, seed: u64) -> Self {
        let (rows, steps) = match profile {
            Profile::Desk => (50_000, 3000),
            Profile::Paper => (50_000, 20_000),
        };
        let mut data = nbiot_dataset(16, PatternFamily::Random { prob: 0.5 }, Modulation::Bpsk, snr_db, 80, rows);
        data.sources.push(Source::Noise);
        data.labels = LabelSchema::Class;
        Self {
            arch: VaeArchitecture {
                input_dim: data.dim(),
                hidden: vec![200, 400, 200],
                nz: 20,
                discriminator_hidden: Vec::new(),
            },
            data,
            train: TrainConfig {
                lr: 5e-4,
                batch_size: 100,
                steps,
                optimizer: OptimizerKind::Adam,
                seed,
            },
            warmup_steps: steps / 2,
            histogram_bins: 50,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensingOutcome {
    pub accuracy: f64,
    pub histograms: EnergyHistograms,
    pub modes_separated: bool,
    pub cluster_energy: [f64; 2],
}

pub fn run_sensing(exp: &SensingExperiment) -> Result<SensingOutcome> {
    let ds = build(&exp.data, exp.seed)?;
    let mut rng = stream_rng(derive_seed(exp.seed, 0x5E45), 0);
    let mut model = VaeModel::new(&exp.arch, Variant::Plain, 1.0, NegativeSampling::Prior, &mut rng)?;
    train_variant_with_warmup(&mut model, ds.rows(), &exp.train, exp.warmup_steps, |idx| ds.batch(idx))?;
    let x = ds.to_array();
    let result = sense_spectrum(&model, x.view())?;
    // Source 0 is the signal, source 1 the noise.
    let truth: Vec<bool> = (0..ds.rows()).map(|i| ds.class(i) == Some(0)).collect();
    let histograms = result.histograms(exp.histogram_bins);
    Ok(SensingOutcome {
        accuracy: result.accuracy(&truth),
        modes_separated: histograms.modes_separated(),
        histograms,
        cluster_energy: result.cluster_energy,
    })
}

// ---------------------------------------------------------------------------
// Supervised spoofing

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpoofExperiment {
    /// Adversary training set (TA-link observations with labels).
    pub train_data: DatasetConfig,
    pub test_rows: usize,
    pub supervised: SupervisedConfig,
    pub scenario: LinkScenario,
    pub seed: u64,
}

/// Default `E_b/N_0` sweep of the adversary-to-receiver link.
pub const AR_SWEEP_DB: [f64; 5] = [0.0, 3.0, 6.0, 9.0, 12.0];

impl SpoofExperiment {
    /// Supervised adversary against random/structured NB-IoT transmissions
    /// with `n` subcarriers observed at `spoofing_snr_db`.
    pub fn supervised(
        profile: Profile,
        n: usize,
        family: PatternFamily,
        modulation: Modulation,
        spoofing_snr_db: f64,
        seed: u64,
    ) -> Self {
        let (rows, steps, frames) = match profile {
            Profile::Desk => (60_000, 3000, 4000),
            Profile::Paper => (2_000_000, 200_000, 250_000),
        };
        let n1 = if n <= 16 { 80 } else { 100 };
        let train_data = nbiot_dataset(n, family, modulation, spoofing_snr_db, n1, rows);
        let mut supervised = SupervisedConfig::default();
        for (cfg, tag) in [(&mut supervised.upper_train, 1u64), (&mut supervised.lower_train, 2)] {
            cfg.steps = steps;
            cfg.lr = 5e-4;
            cfg.seed = derive_seed(seed, tag);
        }
        let scenario = LinkScenario {
            observation: DatasetConfig {
                rows: 1,
                ..train_data.clone()
            },
            link: ChannelKind::Awgn,
            eb_n0_db: AR_SWEEP_DB.to_vec(),
            frames,
            seed: derive_seed(seed, 0x5C3),
        };
        Self {
            train_data,
            test_rows: 10_000,
            supervised,
            scenario,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpoofOutcome {
    pub adversary: SupervisedAdversary,
    pub trace: SupervisedTrace,
    /// Occupancy mean error on a held-out labeled set.
    pub test_occupancy_error: f64,
    pub report: SpoofReport,
}

pub fn train_supervised(exp: &SpoofExperiment) -> Result<(SupervisedAdversary, SupervisedTrace)> {
    let ds = build(&exp.train_data, exp.seed)?;
    SupervisedAdversary::train(&ds, &exp.supervised)
}

pub fn run_spoof(exp: &SpoofExperiment) -> Result<SpoofOutcome> {
    let (adversary, trace) = train_supervised(exp)?;
    let test = build(
        &DatasetConfig {
            rows: exp.test_rows,
            ..exp.train_data.clone()
        },
        derive_seed(exp.seed, 0x7E57),
    )?;
    let test_occupancy_error = occupancy_error_rate(&adversary, &test)?;
    let report = spoof_ber_eval(&exp.scenario, &adversary)?;
    Ok(SpoofOutcome {
        adversary,
        trace,
        test_occupancy_error,
        report,
    })
}

/// Unsupervised spoofing: FactorVAE latent map plus cross-validated
/// thresholds, evaluated on the same scenario shape as the supervised path.
pub fn run_unsupervised_spoof(
    latent: &LatentExperiment,
    scenario: &LinkScenario,
) -> Result<(UnsupervisedAdversary, SpoofReport)> {
    let out = run_latent(latent)?;
    let geo = latent.geometry()?;
    let validation = out.dataset.select(&(0..5000.min(out.dataset.rows())).collect::<Vec<_>>());
    let adversary = UnsupervisedAdversary::fit(out.model, &out.map, geo.n_subcarriers, geo.delta_f, &validation)?;
    let report = spoof_ber_eval(scenario, &adversary)?;
    Ok((adversary, report))
}

// ---------------------------------------------------------------------------
// Statistics helpers

/// Welch's one-sided t-test that `a` has a smaller mean than `b`; returns
/// the p-value.
pub fn welch_less(a: &[f64], b: &[f64]) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma) / a.len() as f64, var(b, mb) / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        return if ma < mb { 0.0 } else { 1.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0)).max(f64::MIN_POSITIVE);
    match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => dist.cdf(t),
        Err(_) => 1.0,
    }
}

/// Row-major `(rows x cols)` copy of selected dataset rows.
pub fn rows_array(ds: &Dataset, count: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..count.min(ds.rows())).collect();
    ds.batch(&idx)
}

/// Mean of each column.
pub fn column_means(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_detects_clear_ordering() {
        let a = [0.10, 0.11, 0.09, 0.10, 0.12];
        let b = [0.20, 0.21, 0.19, 0.22, 0.20];
        assert!(welch_less(&a, &b) < 1e-4);
        assert!(welch_less(&b, &a) > 0.99);
        assert_eq!(welch_less(&[0.0; 5], &[1.0; 5]), 0.0);
        let p = welch_less(&[0.0; 5], &[0.1, 0.2, 0.1, 0.3, 0.2]);
        assert!(p < 0.01, "{p}");
    }

    #[test]
    fn peak_set_tolerance() {
        assert!(peak_sets_match(&[-64, 0, 64], &[-65, 0, 63], 1));
        assert!(!peak_sets_match(&[-64, 0, 64], &[-66, 0, 64], 1));
        assert!(!peak_sets_match(&[0, 64], &[0], 1));
    }

    #[test]
    fn profiles_only_change_sizes() {
        let d = SpoofExperiment::supervised(Profile::Desk, 32, PatternFamily::Pattern1, Modulation::Qam16, 5.0, 1);
        let p = SpoofExperiment::supervised(Profile::Paper, 32, PatternFamily::Pattern1, Modulation::Qam16, 5.0, 1);
        assert_eq!(d.supervised.upper_hidden, p.supervised.upper_hidden);
        assert_eq!(d.train_data.sources, p.train_data.sources);
        assert!(d.train_data.rows < p.train_data.rows);
        assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
        assert!("laptop".parse::<Profile>().is_err());
    }

    #[test]
    fn nbiot_sampling_covers_the_band() {
        for n in [16, 32] {
            let cfg = nbiot_dataset(n, PatternFamily::Ofdm, Modulation::Bpsk, 5.0, 80, 10);
            cfg.validate().unwrap();
        }
    }
}
