//! Disentanglement measurement for latent-variable models of NC-OFDM frames.
//!
//! * [`empirical_variance`] — pairwise-difference variance estimator.
//! * [`higgins_metric`] / [`kim_metric`] — factor-classification scores
//!   driven by a ground-truth [`FactorSampler`].
//! * [`traversal_metric`] / [`latent_map`] — latent traversals scored by
//!   which DFT bins of the decoded frame move by more than `epsilon`.

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::complex_noise;
use crate::error::{Error, Result};
use crate::nn::{argmax, one_hot, Activation, Loss, Mlp, OptimizerKind, Standardizer, TrainConfig};
use crate::rng::{derive_seed, stream_rng};
use crate::vae::VaeModel;
use crate::waveform::{subcarrier_bin, synthesize_amplitudes, vectorize, Modulation, SpectrumAnalyzer};

/// Maps data rows to latent means.
pub trait LatentEncoder: Sync {
    fn latent_dim(&self) -> usize;
    fn encode_mean(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// Maps latent rows to reconstruction means.
pub trait LatentDecoder: Sync {
    fn decode_mean(&self, z: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl LatentEncoder for VaeModel {
    fn latent_dim(&self) -> usize {
        self.nz
    }

    fn encode_mean(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        VaeModel::encode_mean(self, x)
    }
}

impl LatentDecoder for VaeModel {
    fn decode_mean(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        VaeModel::decode_mean(self, z)
    }
}

/// `(1 / (2 h (h - 1))) sum_{i,j} (w_i - w_j)^2`, evaluated literally.
pub fn empirical_variance(w: &[f64]) -> Result<f64> {
    let h = w.len();
    if h < 2 {
        return Err(Error::invalid(format!("empirical variance needs h >= 2, got {h}")));
    }
    let mut acc = 0.0;
    for &a in w {
        for &b in w {
            acc += (a - b) * (a - b);
        }
    }
    Ok(acc / (2.0 * h as f64 * (h as f64 - 1.0)))
}

/// Ground-truth generative factors of single-symbol NC-OFDM frames: the
/// signed complex amplitude `u p s` of every subcarrier, one real factor per
/// subcarrier for BPSK and a real/imaginary pair for complex modulations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorSampler {
    pub n_subcarriers: usize,
    pub delta_f: f64,
    pub n1: usize,
    pub t_s: f64,
    pub modulation: Modulation,
    /// Activation probability of each subcarrier.
    pub prob: f64,
    pub n0: f64,
}

impl FactorSampler {
    pub fn num_factors(&self) -> usize {
        if self.modulation.is_complex() {
            2 * self.n_subcarriers
        } else {
            self.n_subcarriers
        }
    }

    fn sample_amplitude<R: Rng + ?Sized>(&self, rng: &mut R) -> Complex64 {
        if rng.random::<f64>() >= self.prob {
            return Complex64::new(0.0, 0.0);
        }
        let p = rng.random_range(1.0..=2.0);
        let b = self.modulation.bits_per_symbol();
        let bits: Vec<u8> = (0..b).map(|_| u8::from(rng.random::<bool>())).collect();
        self.modulation.modulate(&bits).expect("whole symbol")[0] * p
    }

    pub fn sample_factors<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let amps: Vec<Complex64> = (0..self.n_subcarriers).map(|_| self.sample_amplitude(rng)).collect();
        self.to_factors(&amps)
    }

    fn to_factors(&self, amps: &[Complex64]) -> Vec<f64> {
        if self.modulation.is_complex() {
            amps.iter().flat_map(|a| [a.re, a.im]).collect()
        } else {
            amps.iter().map(|a| a.re).collect()
        }
    }

    fn to_amplitudes(&self, factors: &[f64]) -> Vec<Complex64> {
        if self.modulation.is_complex() {
            factors.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
        } else {
            factors.iter().map(|&r| Complex64::new(r, 0.0)).collect()
        }
    }

    /// Draws factors with factor `l` pinned to `value`.
    pub fn sample_with_fixed<R: Rng + ?Sized>(&self, l: usize, value: f64, rng: &mut R) -> Vec<f64> {
        let mut f = self.sample_factors(rng);
        f[l] = value;
        f
    }

    /// Noisy vectorized frame for the given factors.
    pub fn render<R: Rng + ?Sized>(&self, factors: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let amps = self.to_amplitudes(factors);
        let mut frame = synthesize_amplitudes(&amps, self.delta_f, self.n1, self.t_s)?;
        if self.n0 > 0.0 {
            for s in &mut frame.samples {
                *s += complex_noise(self.n0, rng);
            }
        }
        Ok(vectorize(&frame).0)
    }
}

/// Classifier score plus its per-factor breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorScore {
    /// Test accuracy x 100.
    pub score: f64,
    pub per_factor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorMetricConfig {
    /// Samples per vote.
    pub l: usize,
    /// Votes per factor for training the classifier.
    pub train_votes: usize,
    /// Votes per factor for testing it.
    pub test_votes: usize,
    pub seed: u64,
}

impl Default for FactorMetricConfig {
    fn default() -> Self {
        Self {
            l: 64,
            train_votes: 50,
            test_votes: 50,
            seed: 0,
        }
    }
}

fn encode_rows<E: LatentEncoder + ?Sized>(enc: &E, rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let x = Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| Error::invalid(e.to_string()))?;
    enc.encode_mean(x.view())
}

/// Mean `|z(x^i) - z(x^0)|` over `L` samples sharing factor `l` with `x^0`.
fn higgins_feature<E: LatentEncoder + ?Sized>(
    enc: &E,
    sampler: &FactorSampler,
    l: usize,
    cfg_l: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, 0);
    let base = sampler.sample_factors(&mut rng);
    let value = base[l];
    let mut rows = vec![sampler.render(&base, &mut rng)?];
    for _ in 0..cfg_l {
        let f = sampler.sample_with_fixed(l, value, &mut rng);
        rows.push(sampler.render(&f, &mut rng)?);
    }
    let z = encode_rows(enc, &rows)?;
    let z0 = z.row(0).to_owned();
    let mut feat = vec![0.0; z.ncols()];
    for r in 1..z.nrows() {
        for (f, (a, b)) in feat.iter_mut().zip(z.row(r).iter().zip(z0.iter())) {
            *f += (a - b).abs() / cfg_l as f64;
        }
    }
    Ok(feat)
}

fn per_factor_accuracy(pred: &[usize], truth: &[usize], f: usize) -> (f64, Vec<f64>) {
    let mut hit = vec![0usize; f];
    let mut tot = vec![0usize; f];
    for (&p, &t) in pred.iter().zip(truth) {
        tot[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let overall = 100.0 * hit.iter().sum::<usize>() as f64 / truth.len().max(1) as f64;
    let per = hit
        .iter()
        .zip(&tot)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { 100.0 * h as f64 / t as f64 })
        .collect();
    (overall, per)
}

/// Linear-classifier disentanglement score: a softmax regression trained by
/// gradient descent predicts which factor was held fixed from the mean
/// absolute latent difference of a vote.
pub fn higgins_metric<E: LatentEncoder + ?Sized>(
    enc: &E,
    sampler: &FactorSampler,
    cfg: &FactorMetricConfig,
) -> Result<FactorScore> {
    let f = sampler.num_factors();
    if f < 2 {
        return Err(Error::invalid("at least two generative factors are required"));
    }
    let votes = |count: usize, tag: u64| -> Result<(Array2<f64>, Vec<usize>)> {
        let jobs: Vec<(usize, usize)> = (0..f).flat_map(|l| (0..count).map(move |v| (l, v))).collect();
        let feats = jobs
            .par_iter()
            .map(|&(l, v)| {
                let seed = derive_seed(cfg.seed, tag ^ ((l as u64) << 32) ^ v as u64);
                higgins_feature(enc, sampler, l, cfg.l, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = feats[0].len();
        let x = Array2::from_shape_vec((jobs.len(), dim), feats.concat())
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok((x, jobs.iter().map(|j| j.0).collect()))
    };
    let (mut xtr, ytr) = votes(cfg.train_votes, 0x7A1)?;
    let (mut xte, yte) = votes(cfg.test_votes, 0x7E5)?;
    let std = Standardizer::fit(xtr.view());
    std.apply(&mut xtr);
    std.apply(&mut xte);
    let mut rng = stream_rng(cfg.seed, 0xC1A5);
    let mut clf = Mlp::new(&[xtr.ncols(), f], Activation::Linear, Activation::Linear, &mut rng)?;
    let tc = TrainConfig {
        lr: 0.05,
        batch_size: xtr.nrows(),
        steps: 500,
        optimizer: OptimizerKind::Adam,
        seed: cfg.seed,
    };
    crate::nn::train(&mut clf, xtr.view(), one_hot(&ytr, f).view(), Loss::SoftmaxCrossEntropy, &tc)?;
    let out = clf.predict(xte.view())?;
    let pred: Vec<usize> = out.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())).collect();
    let (score, per_factor) = per_factor_accuracy(&pred, &yte, f);
    Ok(FactorScore { score, per_factor })
}

/// Majority-vote disentanglement score: latents are scaled by their global
/// standard deviation, collapsed latents (std < 0.05) are dropped, and each
/// vote is the latent with the lowest empirical variance among `L` samples
/// sharing one fixed factor.
pub fn kim_metric<E: LatentEncoder + ?Sized>(
    enc: &E,
    sampler: &FactorSampler,
    cfg: &FactorMetricConfig,
) -> Result<FactorScore> {
    let f = sampler.num_factors();
    if f < 2 {
        return Err(Error::invalid("at least two generative factors are required"));
    }
    let nz = enc.latent_dim();
    // Global scale from an unconstrained reference set.
    let mut rng = stream_rng(derive_seed(cfg.seed, 0x5CA1E), 0);
    let reference: Vec<Vec<f64>> = (0..2000)
        .map(|_| {
            let fac = sampler.sample_factors(&mut rng);
            sampler.render(&fac, &mut rng)
        })
        .collect::<Result<_>>()?;
    let zref = encode_rows(enc, &reference)?;
    let scale = zref.std_axis(Axis(0), 1.0);
    let kept: Vec<usize> = (0..nz).filter(|&j| scale[j] >= 0.05).collect();
    if kept.is_empty() {
        return Err(Error::NoInformativeLatents);
    }
    let votes = |count: usize, tag: u64| -> Result<Vec<(usize, usize)>> {
        let jobs: Vec<(usize, usize)> = (0..f).flat_map(|l| (0..count).map(move |v| (l, v))).collect();
        jobs.par_iter()
            .map(|&(l, v)| {
                let mut rng = stream_rng(derive_seed(cfg.seed, tag ^ ((l as u64) << 32) ^ v as u64), 0);
                let value = sampler.sample_factors(&mut rng)[l];
                let rows: Vec<Vec<f64>> = (0..cfg.l)
                    .map(|_| {
                        let fac = sampler.sample_with_fixed(l, value, &mut rng);
                        sampler.render(&fac, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                let z = encode_rows(enc, &rows)?;
                let mut best = (kept[0], f64::INFINITY);
                for &j in &kept {
                    let col: Vec<f64> = z.column(j).iter().map(|v| v / scale[j]).collect();
                    let var = empirical_variance(&col)?;
                    if var < best.1 {
                        best = (j, var);
                    }
                }
                Ok((best.0, l))
            })
            .collect()
    };
    let train = votes(cfg.train_votes, 0x7A1)?;
    let test = votes(cfg.test_votes, 0x7E5)?;
    // counts[latent][factor]
    let mut counts = vec![vec![0usize; f]; nz];
    for &(j, l) in &train {
        counts[j][l] += 1;
    }
    let label: Vec<usize> = counts
        .iter()
        .map(|c| {
            c.iter()
                .enumerate()
                .max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i)))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect();
    let pred: Vec<usize> = test.iter().map(|&(j, _)| label[j]).collect();
    let truth: Vec<usize> = test.iter().map(|&(_, l)| l).collect();
    let (score, per_factor) = per_factor_accuracy(&pred, &truth, f);
    Ok(FactorScore { score, per_factor })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Entangled latents contribute 0; the sum is averaged over samples.
    Corrected,
    /// The running per-sample score is reset to 0 whenever an entangled
    /// latent is met, so the result depends on latent order.
    Faithful,
}

/// What a traversed reconstruction is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraversalReference {
    /// The data point itself.
    Input,
    /// The un-traversed reconstruction of the data point.
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalConfig {
    /// Traversal limit: latent values span `[-C, C]`.
    pub c: f64,
    /// Number of traversal steps; `K + 1` points are decoded.
    pub k: usize,
    pub epsilon: f64,
    pub mode: ScoringMode,
    pub reference: TraversalReference,
}

impl TraversalConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            c: 3.0,
            k: 40,
            epsilon,
            mode: ScoringMode::Corrected,
            reference: TraversalReference::Input,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentVerdict {
    Disentangled,
    Entangled,
    Uninformative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalReport {
    /// Score in `[0, 100]`.
    pub s0: f64,
    /// Informative latents (majority verdict over samples).
    pub informative: usize,
    pub verdicts: Vec<LatentVerdict>,
    /// Affected DFT bins per latent (flagged in at least half of the samples).
    pub bins: Vec<Vec<usize>>,
}

/// Per-sample traversal outcome: for each latent, how many traversal points
/// flagged each bin.
struct SampleTraversal {
    /// `flags[j][b]`: bin `b` exceeded epsilon at some traversal point of latent `j`.
    flags: Vec<Vec<bool>>,
    /// Bins flagged by the un-traversed reconstruction itself.
    baseline: Vec<bool>,
}

fn traverse_sample<M: LatentEncoder + LatentDecoder + ?Sized>(
    model: &M,
    x: &[f64],
    cfg: &TraversalConfig,
    fft: &SpectrumAnalyzer,
) -> Result<SampleTraversal> {
    let nz = model.latent_dim();
    let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
    let z = model.encode_mean(xb.view())?;
    let recon = model.decode_mean(z.view())?;
    let x_spec = fft.spectrum_of_vector(x);
    let recon_spec = fft.spectrum_of_vector(recon.row(0).as_slice().unwrap());
    let reference = match cfg.reference {
        TraversalReference::Input => &x_spec,
        TraversalReference::Reconstruction => &recon_spec,
    };
    let baseline = recon_spec
        .iter()
        .zip(&x_spec)
        .map(|(a, b)| (a - b).norm() > cfg.epsilon)
        .collect();
    let steps = cfg.k + 1;
    let mut zs = Array2::zeros((nz * steps, nz));
    for j in 0..nz {
        for k in 0..steps {
            let mut row = zs.row_mut(j * steps + k);
            row.assign(&z.row(0));
            row[j] = -cfg.c + 2.0 * cfg.c * k as f64 / cfg.k.max(1) as f64;
        }
    }
    let decoded = model.decode_mean(zs.view())?;
    let mut flags = vec![vec![false; fft.len()]; nz];
    for j in 0..nz {
        for k in 0..steps {
            let spec = fft.spectrum_of_vector(decoded.row(j * steps + k).as_slice().unwrap());
            for (b, (a, r)) in spec.iter().zip(reference.iter()).enumerate() {
                if (a - r).norm() > cfg.epsilon {
                    flags[j][b] = true;
                }
            }
        }
    }
    Ok(SampleTraversal { flags, baseline })
}

fn verdict(count: usize) -> LatentVerdict {
    match count {
        0 => LatentVerdict::Uninformative,
        1 => LatentVerdict::Disentangled,
        _ => LatentVerdict::Entangled,
    }
}

/// Latent-traversal disentanglement score over the rows of `x`.
pub fn traversal_metric<M: LatentEncoder + LatentDecoder + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    cfg: &TraversalConfig,
) -> Result<TraversalReport> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("traversal dataset"));
    }
    if x.ncols() % 2 != 0 {
        return Err(Error::invalid("sample vectors must have even length"));
    }
    let fft = SpectrumAnalyzer::new(x.ncols() / 2);
    let nz = model.latent_dim();
    let samples: Vec<SampleTraversal> = (0..x.nrows())
        .into_par_iter()
        .map(|i| traverse_sample(model, x.row(i).as_slice().unwrap(), cfg, &fft))
        .collect::<Result<_>>()?;
    let mut s1 = 0.0;
    let mut tally = vec![[0usize; 3]; nz];
    let mut bin_hits = vec![vec![0usize; fft.len()]; nz];
    for s in &samples {
        let mut s2 = 0.0;
        let mut informative = 0usize;
        let mut disentangled = 0usize;
        for j in 0..nz {
            let k = s.flags[j].iter().filter(|&&f| f).count();
            let v = verdict(k);
            tally[j][v as usize] += 1;
            for (h, &f) in bin_hits[j].iter_mut().zip(&s.flags[j]) {
                *h += usize::from(f);
            }
            match v {
                LatentVerdict::Disentangled => {
                    s2 += 100.0;
                    informative += 1;
                    disentangled += 1;
                }
                LatentVerdict::Entangled => {
                    if cfg.mode == ScoringMode::Faithful {
                        s2 = 0.0;
                    }
                    informative += 1;
                }
                LatentVerdict::Uninformative => {}
            }
        }
        if informative == 0 {
            return Err(Error::NoInformativeLatents);
        }
        debug_assert!(cfg.mode == ScoringMode::Faithful || s2 == 100.0 * disentangled as f64);
        s1 += s2 / informative as f64;
    }
    let l = samples.len();
    let verdicts: Vec<LatentVerdict> = tally
        .iter()
        .map(|t| {
            let order = [
                LatentVerdict::Disentangled,
                LatentVerdict::Entangled,
                LatentVerdict::Uninformative,
            ];
            *order.iter().max_by_key(|v| (t[**v as usize], 3 - **v as usize)).unwrap()
        })
        .collect();
    let bins = bin_hits
        .iter()
        .map(|h| (0..h.len()).filter(|&b| 2 * h[b] >= l && h[b] > 0).collect())
        .collect();
    Ok(TraversalReport {
        s0: s1 / l as f64,
        informative: verdicts.iter().filter(|v| **v != LatentVerdict::Uninformative).count(),
        verdicts,
        bins,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMap {
    /// Affected DFT bins per latent.
    pub bins: Vec<Vec<usize>>,
    /// Affected subcarriers per latent.
    pub subcarriers: Vec<Vec<usize>>,
    pub informative: Vec<bool>,
    /// Fraction of (sample, bin) pairs where the plain reconstruction
    /// already differs from the input by more than epsilon.
    pub baseline_flag_rate: f64,
    /// False when the model does not reconstruct its inputs, in which case
    /// the map carries no information.
    pub reliable: bool,
}

impl LatentMap {
    pub fn informative_count(&self) -> usize {
        self.informative.iter().filter(|&&b| b).count()
    }

    /// Union of affected subcarriers over informative latents.
    pub fn covered_subcarriers(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .subcarriers
            .iter()
            .zip(&self.informative)
            .filter(|(_, &i)| i)
            .flat_map(|(s, _)| s.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Latents mapped to subcarrier `n`.
    pub fn latents_for(&self, n: usize) -> Vec<usize> {
        (0..self.subcarriers.len())
            .filter(|&j| self.informative[j] && self.subcarriers[j].contains(&n))
            .collect()
    }

    /// Number of informative latents per covered subcarrier (1 for real
    /// symbols, 2 for complex), by majority.
    pub fn latents_per_subcarrier(&self) -> usize {
        let covered = self.covered_subcarriers();
        if covered.is_empty() {
            return 0;
        }
        let mut counts: Vec<usize> = covered.iter().map(|&n| self.latents_for(n).len()).collect();
        counts.sort_unstable();
        counts[counts.len() / 2]
    }

    /// True when every informative latent affects exactly one subcarrier and
    /// every covered subcarrier is affected by exactly one latent.
    pub fn is_bijective(&self) -> bool {
        let one_each = self
            .subcarriers
            .iter()
            .zip(&self.informative)
            .filter(|(_, &i)| i)
            .all(|(s, _)| s.len() == 1);
        one_each && self.covered_subcarriers().iter().all(|&n| self.latents_for(n).len() == 1)
    }
}

/// Geometry needed to translate DFT bins into subcarrier indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGeometry {
    pub n_subcarriers: usize,
    pub delta_f: f64,
    pub t_s: f64,
}

/// Per-latent affected bins and subcarriers. A bin belongs to latent `j`
/// when it is flagged in at least half of the samples.
pub fn latent_map<M: LatentEncoder + LatentDecoder + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    geometry: BinGeometry,
    c: f64,
    k: usize,
    epsilon: f64,
) -> Result<LatentMap> {
    let cfg = TraversalConfig {
        c,
        k,
        epsilon,
        mode: ScoringMode::Corrected,
        reference: TraversalReference::Reconstruction,
    };
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("latent map dataset"));
    }
    let n1 = x.ncols() / 2;
    let fft = SpectrumAnalyzer::new(n1);
    let samples: Vec<SampleTraversal> = (0..x.nrows())
        .into_par_iter()
        .map(|i| traverse_sample(model, x.row(i).as_slice().unwrap(), &cfg, &fft))
        .collect::<Result<_>>()?;
    let nz = model.latent_dim();
    let l = samples.len();
    let mut hits = vec![vec![0usize; n1]; nz];
    let mut baseline = 0usize;
    for s in &samples {
        for j in 0..nz {
            for (h, &f) in hits[j].iter_mut().zip(&s.flags[j]) {
                *h += usize::from(f);
            }
        }
        baseline += s.baseline.iter().filter(|&&b| b).count();
    }
    let bin_to_sub: Vec<Option<usize>> = {
        let mut m = vec![None; n1];
        for n in 0..geometry.n_subcarriers {
            if let Some(b) = subcarrier_bin(n, geometry.delta_f, n1, geometry.t_s) {
                m[b] = Some(n);
            }
        }
        m
    };
    let bins: Vec<Vec<usize>> = hits
        .iter()
        .map(|h| (0..n1).filter(|&b| h[b] > 0 && 2 * h[b] >= l).collect())
        .collect();
    let subcarriers = bins
        .iter()
        .map(|bs| {
            let mut s: Vec<usize> = bs.iter().filter_map(|&b| bin_to_sub[b]).collect();
            s.dedup();
            s
        })
        .collect();
    let informative = bins.iter().map(|b| !b.is_empty()).collect();
    let baseline_flag_rate = baseline as f64 / (l * n1) as f64;
    Ok(LatentMap {
        bins,
        subcarriers,
        informative,
        baseline_flag_rate,
        reliable: baseline_flag_rate <= 0.1,
    })
}

/// Linear spectral codec used as a known-answer model: latent `j` scales the
/// tones on `bins[j]`, and encoding reads back the real part of the first
/// bin of each latent.
#[derive(Clone, Debug)]
pub struct SpectralCodec {
    pub n1: usize,
    pub bins: Vec<Vec<usize>>,
}

impl SpectralCodec {
    fn tone(&self, b: usize, k: usize) -> Complex64 {
        Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * (b * k % self.n1) as f64 / self.n1 as f64)
    }
}

impl LatentEncoder for SpectralCodec {
    fn latent_dim(&self) -> usize {
        self.bins.len()
    }

    fn encode_mean(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let fft = SpectrumAnalyzer::new(self.n1);
        let mut z = Array2::zeros((x.nrows(), self.bins.len()));
        for (r, row) in x.rows().into_iter().enumerate() {
            let spec = fft.spectrum_of_vector(row.as_slice().unwrap());
            for (j, bs) in self.bins.iter().enumerate() {
                z[[r, j]] = bs.first().map(|&b| spec[b].re).unwrap_or(0.0);
            }
        }
        Ok(z)
    }
}

impl LatentDecoder for SpectralCodec {
    fn decode_mean(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n1 = self.n1;
        let mut out = Array2::zeros((z.nrows(), 2 * n1));
        for (r, zr) in z.rows().into_iter().enumerate() {
            for k in 0..n1 {
                let mut s = Complex64::new(0.0, 0.0);
                for (j, bs) in self.bins.iter().enumerate() {
                    for &b in bs {
                        s += self.tone(b, k) * zr[j];
                    }
                }
                out[[r, k]] = s.re;
                out[[r, n1 + k]] = s.im;
            }
        }
        Ok(out)
    }
}

/// Encoder wrapper returning the true generative factors of frames produced
/// by a noiseless [`FactorSampler`] (reads the DFT bins back).
#[derive(Clone, Debug)]
pub struct OracleEncoder {
    pub sampler: FactorSampler,
}

impl LatentEncoder for OracleEncoder {
    fn latent_dim(&self) -> usize {
        self.sampler.num_factors()
    }

    fn encode_mean(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let s = &self.sampler;
        let fft = SpectrumAnalyzer::new(s.n1);
        let mut z = Array2::zeros((x.nrows(), s.num_factors()));
        for (r, row) in x.rows().into_iter().enumerate() {
            let spec = fft.spectrum_of_vector(row.as_slice().unwrap());
            let amps: Vec<Complex64> = (0..s.n_subcarriers)
                .map(|n| {
                    subcarrier_bin(n, s.delta_f, s.n1, s.t_s)
                        .map(|b| spec[b])
                        .unwrap_or_default()
                })
                .collect();
            for (j, v) in s.to_factors(&amps).into_iter().enumerate() {
                z[[r, j]] = v;
            }
        }
        Ok(z)
    }
}

/// Encoder emitting i.i.d. standard-normal noise, independent of the input.
#[derive(Clone, Debug)]
pub struct NoiseEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl LatentEncoder for NoiseEncoder {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn encode_mean(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        // Seed from the input bits so repeated calls are deterministic.
        let h = x.iter().fold(self.seed, |acc, v| acc.rotate_left(5) ^ v.to_bits());
        let mut rng = stream_rng(h, 0);
        Ok(Array2::from_shape_simple_fn((x.nrows(), self.dim), || {
            crate::rng::standard_normal(&mut rng)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampler(n0: f64) -> FactorSampler {
        FactorSampler {
            n_subcarriers: 8,
            delta_f: 15e3,
            n1: 16,
            t_s: 1.0 / (16.0 * 15e3),
            modulation: Modulation::Bpsk,
            prob: 0.5,
            n0,
        }
    }

    #[test]
    fn empirical_variance_identities() {
        // brute force: pairs (1,2),(1,3),(2,3) twice each: 2 (1 + 4 + 1) = 12; 12 / (2 * 3 * 2)
        assert!((empirical_variance(&[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(empirical_variance(&[4.2; 7]).unwrap(), 0.0);
        assert!(empirical_variance(&[1.0]).is_err());
        let mut rng = stream_rng(1, 0);
        for h in 2..40 {
            let w: Vec<f64> = (0..h).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mean = w.iter().sum::<f64>() / h as f64;
            let unbiased = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (h - 1) as f64;
            assert!((empirical_variance(&w).unwrap() - unbiased).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_encoder_reads_factors() {
        let s = sampler(0.0);
        let mut rng = stream_rng(2, 0);
        let f = s.sample_factors(&mut rng);
        let x = s.render(&f, &mut rng).unwrap();
        let z = OracleEncoder { sampler: s }
            .encode_mean(Array2::from_shape_vec((1, x.len()), x).unwrap().view())
            .unwrap();
        for (a, b) in z.row(0).iter().zip(&f) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn higgins_and_kim_on_oracle_and_noise() {
        let s = sampler(0.0);
        let cfg = FactorMetricConfig {
            l: 32,
            train_votes: 30,
            test_votes: 30,
            seed: 3,
        };
        let oracle = OracleEncoder { sampler: s.clone() };
        assert_eq!(higgins_metric(&oracle, &s, &cfg).unwrap().score, 100.0);
        assert_eq!(kim_metric(&oracle, &s, &cfg).unwrap().score, 100.0);

        let noise = NoiseEncoder { dim: 8, seed: 4 };
        let chance = 100.0 / 8.0;
        let cfg = FactorMetricConfig {
            train_votes: 100,
            test_votes: 100,
            ..cfg
        };
        let h = higgins_metric(&noise, &s, &cfg).unwrap().score;
        let k = kim_metric(&noise, &s, &cfg).unwrap().score;
        assert!((h - chance).abs() <= 5.0, "higgins {h}");
        assert!((k - chance).abs() <= 5.0, "kim {k}");
    }

    /// Oracle encoder whose first two outputs are swapped on a random half
    /// of the samples.
    struct SwappingEncoder(OracleEncoder);

    impl LatentEncoder for SwappingEncoder {
        fn latent_dim(&self) -> usize {
            self.0.latent_dim()
        }
        fn encode_mean(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
            let mut z = self.0.encode_mean(x)?;
            let h = x.iter().fold(0u64, |acc, v| acc.rotate_left(7) ^ v.to_bits());
            let mut rng = stream_rng(h, 0);
            for mut row in z.rows_mut() {
                if rng.random::<bool>() {
                    row.swap(0, 1);
                }
            }
            Ok(z)
        }
    }

    #[test]
    fn kim_swapped_latents_fall_to_chance() {
        let s = sampler(0.0);
        let enc = SwappingEncoder(OracleEncoder { sampler: s.clone() });
        let cfg = FactorMetricConfig {
            l: 32,
            train_votes: 60,
            test_votes: 60,
            seed: 5,
        };
        let r = kim_metric(&enc, &s, &cfg).unwrap();
        // the swapped pair is not identified; the rest still are
        assert!(r.per_factor[0] + r.per_factor[1] <= 100.0 + 20.0, "{:?}", r.per_factor);
        for l in 2..8 {
            assert_eq!(r.per_factor[l], 100.0);
        }
    }

    fn traversal_data(codec: &SpectralCodec, rows: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 0);
        let z = Array2::from_shape_simple_fn((rows, codec.bins.len()), || rng.random_range(-1.0..1.0));
        codec.decode_mean(z.view()).unwrap()
    }

    #[test]
    fn traversal_scores_disentangled_and_mixed_decoders() {
        let clean = SpectralCodec {
            n1: 16,
            bins: vec![vec![1], vec![3], vec![5], vec![], vec![9]],
        };
        let x = traversal_data(&clean, 20, 1);
        let r = traversal_metric(&clean, x.view(), &TraversalConfig::new(0.5)).unwrap();
        assert_eq!(r.s0, 100.0);
        assert_eq!(r.informative, 4);
        assert_eq!(r.verdicts[3], LatentVerdict::Uninformative);
        assert_eq!(r.bins[2], vec![5]);

        let mixed = SpectralCodec {
            n1: 16,
            bins: vec![vec![1, 2], vec![3, 4], vec![5], vec![7, 8]],
        };
        let x = traversal_data(&mixed, 20, 2);
        let r = traversal_metric(&mixed, x.view(), &TraversalConfig::new(0.5)).unwrap();
        assert!(r.s0 < 50.0, "{}", r.s0);
        assert!((r.s0 - 25.0).abs() < 1e-9);
        assert_eq!(r.verdicts[0], LatentVerdict::Entangled);
    }

    #[test]
    fn faithful_mode_depends_on_latent_order() {
        let a = SpectralCodec {
            n1: 16,
            bins: vec![vec![1, 2], vec![3], vec![5]],
        };
        let b = SpectralCodec {
            n1: 16,
            bins: vec![vec![3], vec![5], vec![1, 2]],
        };
        let x = traversal_data(&a, 10, 3);
        let mut cfg = TraversalConfig::new(0.5);
        let ca = traversal_metric(&a, x.view(), &cfg).unwrap().s0;
        let cb = traversal_metric(&b, x.view(), &cfg).unwrap().s0;
        assert!((ca - cb).abs() < 1e-9, "corrected mode is permutation invariant");
        cfg.mode = ScoringMode::Faithful;
        let fa = traversal_metric(&a, x.view(), &cfg).unwrap().s0;
        let fb = traversal_metric(&b, x.view(), &cfg).unwrap().s0;
        // a: entangled first, later latents still add; b: reset at the end
        assert!((fa - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(fb, 0.0);
    }

    #[test]
    fn no_informative_latents_is_an_error() {
        let dead = SpectralCodec {
            n1: 8,
            bins: vec![vec![], vec![]],
        };
        let x = Array2::zeros((3, 16));
        assert!(matches!(
            traversal_metric(&dead, x.view(), &TraversalConfig::new(0.5)),
            Err(Error::NoInformativeLatents)
        ));
    }

    #[test]
    fn looser_epsilon_never_scores_lower_on_codecs() {
        let mixed = SpectralCodec {
            n1: 16,
            bins: vec![vec![1], vec![2, 3], vec![4]],
        };
        let x = traversal_data(&mixed, 10, 4);
        let tight = traversal_metric(&mixed, x.view(), &TraversalConfig::new(0.5)).unwrap();
        let loose = traversal_metric(&mixed, x.view(), &TraversalConfig::new(1.0)).unwrap();
        assert!(loose.s0 >= tight.s0);
    }

    #[test]
    fn latent_map_translates_bins() {
        // n1 = 16 at T_u / 16: subcarrier n sits on bin n.
        let codec = SpectralCodec {
            n1: 16,
            bins: vec![vec![2], vec![], vec![6], vec![4]],
        };
        let x = traversal_data(&codec, 10, 5);
        let geo = BinGeometry {
            n_subcarriers: 8,
            delta_f: 15e3,
            t_s: 1.0 / (16.0 * 15e3),
        };
        let m = latent_map(&codec, x.view(), geo, 3.0, 40, 0.5).unwrap();
        assert_eq!(m.informative, vec![true, false, true, true]);
        assert_eq!(m.subcarriers, vec![vec![2], vec![], vec![6], vec![4]]);
        assert!(m.is_bijective());
        assert!(m.reliable);
        assert_eq!(m.covered_subcarriers(), vec![2, 4, 6]);
        assert_eq!(m.latents_per_subcarrier(), 1);
    }
}
