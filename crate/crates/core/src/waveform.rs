//! NC-OFDM / OFDM baseband symbol generation.
//!
//! A single CP-free symbol sampled at `k T_s` is
//! `s(k T_s) = sum_n u(n) p(n) s_n exp(j 2 pi n df k T_s)`, with subcarrier
//! `n` centred at `n * df` (zero-based). Multi-symbol records with the cyclic
//! extension to `T_o = T_u + T_cp` are produced by [`synthesize_slots`].

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Concrete layout of the active subcarriers of one symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PatternKind {
    /// Every subcarrier active.
    Ofdm,
    /// Active subcarriers `offset, offset + q, offset + 2q, ...`.
    Interleaved { q: usize, offset: usize },
    /// One contiguous block of `c` active subcarriers starting at `offset`;
    /// outside the block, active subcarriers are separated by `q` inactive ones.
    Pattern1 { q: usize, c: usize, offset: usize },
    /// Two blocks of length `c` at `offsets`; the three remaining regions are
    /// interleaved with `q1`, `q2`, `q3` inactive subcarriers between actives.
    Pattern2 {
        c: usize,
        q1: usize,
        q2: usize,
        q3: usize,
        offsets: [usize; 2],
    },
    /// Each subcarrier active independently with probability `prob`.
    Random { prob: f64 },
    /// Fixed active index set.
    Explicit { active: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubcarrierPattern {
    u: Vec<u8>,
    kind: PatternKind,
}

impl SubcarrierPattern {
    /// Builds a pattern from an explicit occupancy vector.
    pub fn from_occupancy(u: Vec<u8>) -> Result<Self> {
        if u.iter().any(|&b| b > 1) {
            return Err(Error::invalid("occupancy entries must be 0 or 1"));
        }
        if u.iter().all(|&b| b == 0) {
            return Err(Error::NoActiveSubcarriers);
        }
        let active = u
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            u,
            kind: PatternKind::Explicit { active },
        })
    }

    pub fn generate<R: Rng + ?Sized>(kind: &PatternKind, n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("pattern needs at least one subcarrier"));
        }
        let mut u = vec![0u8; n];
        match *kind {
            PatternKind::Ofdm => u.fill(1),
            PatternKind::Interleaved { q, offset } => {
                if q == 0 || offset >= n {
                    return Err(Error::invalid(format!(
                        "interleaved pattern needs q >= 1 and offset < N (q={q}, offset={offset}, N={n})"
                    )));
                }
                for i in (offset..n).step_by(q) {
                    u[i] = 1;
                }
            }
            PatternKind::Pattern1 { q, c, offset } => {
                if q == 0 || c == 0 || offset + c > n {
                    return Err(Error::invalid(format!(
                        "pattern 1 block overflows the band (q={q}, c={c}, offset={offset}, N={n})"
                    )));
                }
                u[offset..offset + c].fill(1);
                mark_left(&mut u, offset, q);
                mark_right(&mut u, offset + c, n, q);
            }
            PatternKind::Pattern2 {
                c,
                q1,
                q2,
                q3,
                offsets: [o1, o2],
            } => {
                if c == 0 || q1 == 0 || q2 == 0 || q3 == 0 || o1 + c > o2 || o2 + c > n {
                    return Err(Error::invalid(format!(
                        "pattern 2 blocks overlap or overflow the band (c={c}, offsets=[{o1},{o2}], N={n})"
                    )));
                }
                u[o1..o1 + c].fill(1);
                u[o2..o2 + c].fill(1);
                mark_left(&mut u, o1, q1);
                mark_right(&mut u, o1 + c, o2, q2);
                mark_right(&mut u, o2 + c, n, q3);
            }
            PatternKind::Random { prob } => {
                if !(prob > 0.0 && prob <= 1.0) {
                    return Err(Error::invalid(format!("activation probability {prob} outside (0, 1]")));
                }
                // Conditioned on at least one active subcarrier.
                for _ in 0..100_000 {
                    for b in u.iter_mut() {
                        *b = u8::from(rng.random::<f64>() < prob);
                    }
                    if u.contains(&1) {
                        break;
                    }
                }
            }
            PatternKind::Explicit { ref active } => {
                for &i in active {
                    if i >= n {
                        return Err(Error::invalid(format!("active index {i} outside N={n}")));
                    }
                    u[i] = 1;
                }
            }
        }
        if !u.contains(&1) {
            return Err(Error::NoActiveSubcarriers);
        }
        Ok(Self {
            u,
            kind: kind.clone(),
        })
    }

    pub fn occupancy(&self) -> &[u8] {
        &self.u
    }

    pub fn kind(&self) -> &PatternKind {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.u.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_active(&self, n: usize) -> bool {
        self.u.get(n).copied() == Some(1)
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.u
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

// Actives to the left of `end`, each separated by `q` inactive subcarriers.
fn mark_left(u: &mut [u8], end: usize, q: usize) {
    let mut i = end as isize - (q as isize + 1);
    while i >= 0 {
        u[i as usize] = 1;
        i -= q as isize + 1;
    }
}

// Actives in `[start, end)`, the first one `q` inactive subcarriers after `start - 1`.
fn mark_right(u: &mut [u8], start: usize, end: usize, q: usize) {
    let mut i = start + q;
    while i < end {
        u[i] = 1;
        i += q + 1;
    }
}

/// Deterministic pattern construction from a seed.
pub fn make_pattern(kind: &PatternKind, n: usize, seed: u64) -> Result<SubcarrierPattern> {
    let mut rng = stream_rng(seed, 0);
    SubcarrierPattern::generate(kind, n, &mut rng)
}

/// A distribution over pattern kinds, used when every symbol draws its own
/// occupancy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PatternFamily {
    Ofdm,
    Interleaved {
        q: usize,
    },
    /// `q` in `[1, 6]`, `c` in `[4, 43]` (clamped to `N - 1`), random block position.
    Pattern1,
    /// `c` in `[3, 15]` (clamped so both blocks fit), `q1, q2, q3` in `[1, 8]`.
    Pattern2,
    Random {
        prob: f64,
    },
    /// Uniform choice among fixed active-index sets.
    Structured {
        patterns: Vec<Vec<usize>>,
    },
}

impl PatternFamily {
    /// Three allocations over `N = 8` covering five distinct subcarriers.
    pub fn three_case_structured() -> Self {
        PatternFamily::Structured {
            patterns: vec![vec![1, 3, 6], vec![1, 4, 7], vec![3, 7]],
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PatternFamily::Ofdm => "ofdm",
            PatternFamily::Interleaved { .. } => "interleaved",
            PatternFamily::Pattern1 => "pattern1",
            PatternFamily::Pattern2 => "pattern2",
            PatternFamily::Random { .. } => "random",
            PatternFamily::Structured { .. } => "structured",
        }
    }

    pub fn sample_kind<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<PatternKind> {
        Ok(match self {
            PatternFamily::Ofdm => PatternKind::Ofdm,
            PatternFamily::Interleaved { q } => PatternKind::Interleaved { q: *q, offset: 0 },
            PatternFamily::Pattern1 => {
                let c_max = 43.min(n.saturating_sub(1));
                if c_max < 4 {
                    return Err(Error::invalid(format!("pattern 1 needs N >= 5, got {n}")));
                }
                let q = rng.random_range(1..=6);
                let c = rng.random_range(4..=c_max);
                let offset = rng.random_range(0..=n - c);
                PatternKind::Pattern1 { q, c, offset }
            }
            PatternFamily::Pattern2 => {
                let c_max = 15.min(n / 2);
                if c_max < 3 {
                    return Err(Error::invalid(format!("pattern 2 needs N >= 6, got {n}")));
                }
                let c = rng.random_range(3..=c_max);
                let q1 = rng.random_range(1..=8);
                let q2 = rng.random_range(1..=8);
                let q3 = rng.random_range(1..=8);
                let o1 = rng.random_range(0..=n - 2 * c);
                let o2 = rng.random_range(o1 + c..=n - c);
                PatternKind::Pattern2 {
                    c,
                    q1,
                    q2,
                    q3,
                    offsets: [o1, o2],
                }
            }
            PatternFamily::Random { prob } => PatternKind::Random { prob: *prob },
            PatternFamily::Structured { patterns } => {
                if patterns.is_empty() {
                    return Err(Error::invalid("structured family has no patterns"));
                }
                let i = rng.random_range(0..patterns.len());
                PatternKind::Explicit {
                    active: patterns[i].clone(),
                }
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SubcarrierPattern> {
        let kind = self.sample_kind(n, rng)?;
        SubcarrierPattern::generate(&kind, n, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    Bpsk,
    Qam16,
}

const QAM16_SCALE: f64 = 0.316_227_766_016_837_94; // 1 / sqrt(10)

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qam16 => 4,
        }
    }

    /// Whether symbols carry an imaginary component.
    pub fn is_complex(self) -> bool {
        matches!(self, Modulation::Qam16)
    }

    /// Maps bits to unit-average-energy symbols. BPSK: 0 -> -1, 1 -> +1.
    /// 16-QAM: Gray-coded, first bit pair on I, second on Q.
    pub fn modulate(self, bits: &[u8]) -> Result<Vec<Complex64>> {
        let b = self.bits_per_symbol();
        if bits.len() % b != 0 {
            return Err(Error::invalid(format!(
                "{} bits is not a multiple of {b} bits per symbol",
                bits.len()
            )));
        }
        if bits.iter().any(|&x| x > 1) {
            return Err(Error::invalid("bits must be 0 or 1"));
        }
        Ok(match self {
            Modulation::Bpsk => bits
                .iter()
                .map(|&x| Complex64::new(if x == 1 { 1.0 } else { -1.0 }, 0.0))
                .collect(),
            Modulation::Qam16 => bits
                .chunks_exact(4)
                .map(|c| {
                    Complex64::new(gray_level(c[0], c[1]), gray_level(c[2], c[3])) * QAM16_SCALE
                })
                .collect(),
        })
    }

    /// Minimum-distance hard decisions.
    pub fn demodulate(self, symbols: &[Complex64]) -> Vec<u8> {
        match self {
            Modulation::Bpsk => symbols.iter().map(|s| u8::from(s.re > 0.0)).collect(),
            Modulation::Qam16 => {
                let mut bits = Vec::with_capacity(symbols.len() * 4);
                for s in symbols {
                    let (b0, b1) = gray_bits(s.re / QAM16_SCALE);
                    let (b2, b3) = gray_bits(s.im / QAM16_SCALE);
                    bits.extend_from_slice(&[b0, b1, b2, b3]);
                }
                bits
            }
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modulation::Bpsk => write!(f, "bpsk"),
            Modulation::Qam16 => write!(f, "qam16"),
        }
    }
}

fn gray_level(b0: u8, b1: u8) -> f64 {
    match (b0, b1) {
        (0, 0) => -3.0,
        (0, 1) => -1.0,
        (1, 1) => 1.0,
        _ => 3.0,
    }
}

fn gray_bits(level: f64) -> (u8, u8) {
    if level < -2.0 {
        (0, 0)
    } else if level < 0.0 {
        (0, 1)
    } else if level < 2.0 {
        (1, 1)
    } else {
        (1, 0)
    }
}

pub fn random_bits<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<u8> {
    (0..count).map(|_| u8::from(rng.random::<bool>())).collect()
}

/// Everything that defines one NC-OFDM symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmissionParams {
    pub n_subcarriers: usize,
    /// Subcarrier spacing in Hz, `1 / T_u`.
    pub delta_f: f64,
    pub pattern: SubcarrierPattern,
    /// Per-subcarrier power factors in `[1, 2]`.
    pub powers: Vec<f64>,
    pub modulation: Modulation,
    /// Cyclic-prefix duration in seconds.
    pub t_cp: f64,
}

impl TransmissionParams {
    pub fn new(
        delta_f: f64,
        pattern: SubcarrierPattern,
        powers: Vec<f64>,
        modulation: Modulation,
        t_cp: f64,
    ) -> Result<Self> {
        let n = pattern.len();
        if !(delta_f > 0.0 && delta_f.is_finite()) {
            return Err(Error::invalid(format!("subcarrier spacing {delta_f} must be positive")));
        }
        if powers.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                actual: powers.len(),
            });
        }
        if let Some(p) = powers.iter().find(|p| !(1.0..=2.0).contains(*p)) {
            return Err(Error::invalid(format!("power factor {p} outside [1, 2]")));
        }
        if !(t_cp >= 0.0) {
            return Err(Error::invalid("cyclic prefix duration must be non-negative"));
        }
        Ok(Self {
            n_subcarriers: n,
            delta_f,
            pattern,
            powers,
            modulation,
            t_cp,
        })
    }

    /// Draws a pattern from `family` and powers uniformly from `[1, 2]`.
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        delta_f: f64,
        family: &PatternFamily,
        modulation: Modulation,
        rng: &mut R,
    ) -> Result<Self> {
        let pattern = family.sample(n, rng)?;
        let powers = (0..n).map(|_| rng.random_range(1.0..=2.0)).collect();
        Self::new(delta_f, pattern, powers, modulation, 0.0)
    }

    pub fn t_u(&self) -> f64 {
        1.0 / self.delta_f
    }

    pub fn t_o(&self) -> f64 {
        self.t_u() + self.t_cp
    }

    pub fn active_count(&self) -> usize {
        self.pattern.active_count()
    }

    pub fn bits_per_frame(&self) -> usize {
        self.active_count() * self.modulation.bits_per_symbol()
    }

    /// Sampling interval `T_u / N` at which the subcarriers land on DFT bins.
    pub fn critical_t_s(&self) -> f64 {
        self.t_u() / self.n_subcarriers as f64
    }

    /// Per-active-subcarrier complex amplitude `p(n) s_n`, in active-index order.
    pub fn amplitudes(&self, symbols: &[Complex64]) -> Result<Vec<(usize, Complex64)>> {
        let active = self.pattern.active_indices();
        if symbols.len() != active.len() {
            return Err(Error::ShapeMismatch {
                expected: active.len(),
                actual: symbols.len(),
            });
        }
        Ok(active
            .into_iter()
            .zip(symbols)
            .map(|(n, &s)| (n, s * self.powers[n]))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexFrame {
    pub samples: Vec<Complex64>,
    pub t_s: f64,
}

impl ComplexFrame {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    /// `E_s = ||s||^2 / n_1`.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }
}

fn check_sampling(n_subcarriers: usize, delta_f: f64, n1: usize, t_s: f64) -> Result<()> {
    if n1 == 0 {
        return Err(Error::invalid("frame needs at least one sample"));
    }
    if !(t_s > 0.0 && t_s.is_finite()) {
        return Err(Error::invalid(format!("sampling interval {t_s} must be positive")));
    }
    let band = n_subcarriers as f64 * delta_f;
    if 1.0 / t_s < band * (1.0 - 1e-9) {
        return Err(Error::invalid(format!(
            "sampling rate {} Hz below the occupied band {band} Hz",
            1.0 / t_s
        )));
    }
    Ok(())
}

/// Samples one CP-free symbol at `k T_s`, `k = 0..n1`.
pub fn synthesize(
    params: &TransmissionParams,
    symbols: &[Complex64],
    n1: usize,
    t_s: f64,
) -> Result<ComplexFrame> {
    check_sampling(params.n_subcarriers, params.delta_f, n1, t_s)?;
    let amplitudes = params.amplitudes(symbols)?;
    let tones: Vec<(Complex64, f64)> = amplitudes
        .into_iter()
        .map(|(n, a)| (a, n as f64 * params.delta_f * t_s))
        .collect();
    let samples = (0..n1)
        .map(|k| {
            tones
                .iter()
                .map(|&(a, cycles)| a * phasor(cycles * k as f64))
                .sum()
        })
        .collect();
    Ok(ComplexFrame { samples, t_s })
}

/// Synthesizes directly from per-subcarrier complex amplitudes (zero means
/// inactive), bypassing pattern bookkeeping.
pub fn synthesize_amplitudes(
    amplitudes: &[Complex64],
    delta_f: f64,
    n1: usize,
    t_s: f64,
) -> Result<ComplexFrame> {
    check_sampling(amplitudes.len(), delta_f, n1, t_s)?;
    let tones: Vec<(Complex64, f64)> = amplitudes
        .iter()
        .enumerate()
        .filter(|(_, a)| a.norm_sqr() > 0.0)
        .map(|(n, &a)| (a, n as f64 * delta_f * t_s))
        .collect();
    let samples = (0..n1)
        .map(|k| {
            tones
                .iter()
                .map(|&(a, cycles)| a * phasor(cycles * k as f64))
                .sum()
        })
        .collect();
    Ok(ComplexFrame { samples, t_s })
}

/// One symbol slot of a multi-symbol record.
#[derive(Clone, Debug)]
pub struct Slot {
    pub params: TransmissionParams,
    pub symbols: Vec<Complex64>,
}

/// Multi-symbol record: slot `m` occupies `[sum_{i<m} T_o(i), ... + T_o(m))` and
/// carries `sum_n u p s exp(j 2 pi f_n (t - t_m))`, so the last `T_cp` of each
/// slot repeats its first `T_cp`.
pub fn synthesize_slots(slots: &[Slot], t_s: f64, n_samples: usize) -> Result<ComplexFrame> {
    if slots.is_empty() {
        return Err(Error::EmptyInput("symbol slots"));
    }
    for slot in slots {
        check_sampling(slot.params.n_subcarriers, slot.params.delta_f, 1, t_s)?;
    }
    let mut samples = Vec::with_capacity(n_samples);
    let mut slot_idx = 0;
    let mut slot_start = 0.0;
    let mut tones = slot_tones(&slots[0])?;
    for k in 0..n_samples {
        let t = k as f64 * t_s;
        while slot_idx < slots.len() && t >= slot_start + slots[slot_idx].params.t_o() - 1e-12 * t_s {
            slot_start += slots[slot_idx].params.t_o();
            slot_idx += 1;
            if slot_idx < slots.len() {
                tones = slot_tones(&slots[slot_idx])?;
            }
        }
        if slot_idx >= slots.len() {
            break;
        }
        let tau = t - slot_start;
        samples.push(tones.iter().map(|&(a, f)| a * phasor(f * tau)).sum());
    }
    Ok(ComplexFrame { samples, t_s })
}

fn slot_tones(slot: &Slot) -> Result<Vec<(Complex64, f64)>> {
    Ok(slot
        .params
        .amplitudes(&slot.symbols)?
        .into_iter()
        .map(|(n, a)| (a, n as f64 * slot.params.delta_f))
        .collect())
}

/// `exp(j 2 pi cycles)` with the integer part removed first.
fn phasor(cycles: f64) -> Complex64 {
    let frac = cycles - cycles.floor();
    Complex64::from_polar(1.0, 2.0 * PI * frac)
}

/// Real feature vector `[Re s(0..n1), Im s(0..n1)]` of length `2 n1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleVector(pub Vec<f64>);

impl SampleVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn vectorize(frame: &ComplexFrame) -> SampleVector {
    let mut x = Vec::with_capacity(2 * frame.len());
    x.extend(frame.samples.iter().map(|s| s.re));
    x.extend(frame.samples.iter().map(|s| s.im));
    SampleVector(x)
}

pub fn devectorize(x: &[f64], t_s: f64) -> Result<ComplexFrame> {
    if x.len() % 2 != 0 {
        return Err(Error::invalid(format!("sample vector length {} is odd", x.len())));
    }
    let n1 = x.len() / 2;
    let samples = (0..n1).map(|k| Complex64::new(x[k], x[n1 + k])).collect();
    Ok(ComplexFrame { samples, t_s })
}

/// Normalized DFT (`X[b] = (1/n1) sum_k x[k] exp(-j 2 pi b k / n1)`), so a
/// subcarrier landing on bin `b` reads back its amplitude `p s`.
#[derive(Clone)]
pub struct SpectrumAnalyzer {
    n1: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectrumAnalyzer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectrumAnalyzer").field("n1", &self.n1).finish()
    }
}

impl SpectrumAnalyzer {
    pub fn new(n1: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n1);
        Self { n1, fft }
    }

    pub fn len(&self) -> usize {
        self.n1
    }

    pub fn is_empty(&self) -> bool {
        self.n1 == 0
    }

    pub fn spectrum(&self, samples: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(samples.len(), self.n1, "spectrum length mismatch");
        let mut buf = samples.to_vec();
        self.fft.process(&mut buf);
        let scale = 1.0 / self.n1 as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
        buf
    }

    /// Spectrum of a vectorized `[Re, Im]` sample.
    pub fn spectrum_of_vector(&self, x: &[f64]) -> Vec<Complex64> {
        assert_eq!(x.len(), 2 * self.n1, "sample vector length mismatch");
        let mut buf: Vec<Complex64> = (0..self.n1)
            .map(|k| Complex64::new(x[k], x[self.n1 + k]))
            .collect();
        self.fft.process(&mut buf);
        let scale = 1.0 / self.n1 as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
        buf
    }
}

/// DFT bin hit by subcarrier `n` when `n1` samples are taken at `t_s`, if the
/// frame spans an integer number of that subcarrier's cycles.
pub fn subcarrier_bin(n: usize, delta_f: f64, n1: usize, t_s: f64) -> Option<usize> {
    let b = n as f64 * delta_f * n1 as f64 * t_s;
    let r = b.round();
    ((b - r).abs() < 1e-6).then(|| (r as usize) % n1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|b| {
                x.iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let ang = -2.0 * PI * (b * k) as f64 / n as f64;
                        v * Complex64::from_polar(1.0, ang)
                    })
                    .sum::<Complex64>()
                    / n as f64
            })
            .collect()
    }

    #[test]
    fn ofdm_pattern_is_all_ones() {
        let p = make_pattern(&PatternKind::Ofdm, 8, 0).unwrap();
        assert_eq!(p.occupancy(), &[1u8; 8]);
    }

    #[test]
    fn interleaved_q5_on_64() {
        let p = make_pattern(&PatternKind::Interleaved { q: 5, offset: 0 }, 64, 0).unwrap();
        let expected: Vec<usize> = (0..64).step_by(5).collect();
        assert_eq!(p.active_indices(), expected);
        assert_eq!(p.active_count(), 13);
        assert_eq!(*expected.last().unwrap(), 60);
    }

    #[test]
    fn random_pattern_mean_active_count() {
        let kind = PatternKind::Random { prob: 0.5 };
        let total: usize = (1..=10_000u64)
            .map(|seed| make_pattern(&kind, 16, seed).unwrap().active_count())
            .sum();
        let mean = total as f64 / 10_000.0;
        assert!((mean - 8.0).abs() < 0.2, "mean N_a = {mean}");
    }

    #[test]
    fn patterns_are_seed_deterministic() {
        let kind = PatternKind::Random { prob: 0.5 };
        assert_eq!(make_pattern(&kind, 32, 99).unwrap(), make_pattern(&kind, 32, 99).unwrap());
        let mut a = stream_rng(5, 1);
        let mut b = stream_rng(5, 1);
        for _ in 0..50 {
            assert_eq!(
                PatternFamily::Pattern2.sample(44, &mut a).unwrap(),
                PatternFamily::Pattern2.sample(44, &mut b).unwrap()
            );
        }
    }

    #[test]
    fn pattern1_spacing_and_block() {
        let p = make_pattern(&PatternKind::Pattern1 { q: 2, c: 4, offset: 7 }, 20, 0).unwrap();
        // left of block: 7-3=4, 1; block 7..11; right: 10+3=13, 16, 19
        assert_eq!(p.active_indices(), vec![1, 4, 7, 8, 9, 10, 13, 16, 19]);
    }

    #[test]
    fn pattern2_layout() {
        let kind = PatternKind::Pattern2 {
            c: 3,
            q1: 1,
            q2: 2,
            q3: 4,
            offsets: [4, 12],
        };
        let p = make_pattern(&kind, 24, 0).unwrap();
        assert_eq!(
            p.active_indices(),
            vec![0, 2, 4, 5, 6, 9, 12, 13, 14, 19]
        );
    }

    #[test]
    fn overflowing_blocks_are_rejected() {
        let kind = PatternKind::Pattern1 { q: 1, c: 10, offset: 5 };
        assert!(make_pattern(&kind, 12, 0).is_err());
        let kind = PatternKind::Pattern2 {
            c: 4,
            q1: 1,
            q2: 1,
            q3: 1,
            offsets: [0, 2],
        };
        assert!(make_pattern(&kind, 12, 0).is_err());
        assert!(matches!(
            SubcarrierPattern::from_occupancy(vec![0, 0, 0]),
            Err(Error::NoActiveSubcarriers)
        ));
    }

    #[test]
    fn sampled_families_fit_the_band() {
        let mut rng = stream_rng(3, 0);
        for n in [6usize, 16, 32, 44, 64] {
            for family in [PatternFamily::Pattern1, PatternFamily::Pattern2] {
                for _ in 0..200 {
                    let p = family.sample(n, &mut rng).unwrap();
                    assert_eq!(p.len(), n);
                    assert!(p.active_count() >= 1);
                }
            }
        }
    }

    #[test]
    fn bpsk_mapping_and_roundtrip() {
        let s = Modulation::Bpsk.modulate(&[0, 1]).unwrap();
        assert_eq!(s, vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)]);
        let mut rng = stream_rng(1, 0);
        let bits = random_bits(256, &mut rng);
        let syms = Modulation::Bpsk.modulate(&bits).unwrap();
        assert_eq!(Modulation::Bpsk.demodulate(&syms), bits);
    }

    #[test]
    fn qam16_gray_constellation() {
        let s = Modulation::Qam16.modulate(&[0, 0, 0, 0]).unwrap();
        let expected = Complex64::new(-3.0, -3.0) / 10f64.sqrt();
        assert!((s[0] - expected).norm() < 1e-15);

        // Enumerate all 16 points: unit average energy, neighbours differ by one bit.
        let mut energy = 0.0;
        let mut points = Vec::new();
        for v in 0u8..16 {
            let bits = [(v >> 3) & 1, (v >> 2) & 1, (v >> 1) & 1, v & 1];
            let s = Modulation::Qam16.modulate(&bits).unwrap()[0];
            energy += s.norm_sqr();
            points.push((bits, s));
            assert_eq!(Modulation::Qam16.demodulate(&[s]), bits.to_vec());
        }
        assert!((energy / 16.0 - 1.0).abs() < 1e-12);
        let d_min = 2.0 / 10f64.sqrt();
        for (bi, si) in &points {
            for (bj, sj) in &points {
                if ((si - sj).norm() - d_min).abs() < 1e-9 {
                    let diff = bi.iter().zip(bj).filter(|(a, b)| a != b).count();
                    assert_eq!(diff, 1);
                }
            }
        }
    }

    #[test]
    fn modulate_rejects_partial_symbols() {
        assert!(Modulation::Qam16.modulate(&[0, 1, 1]).is_err());
    }

    fn params(u: Vec<u8>, powers: Vec<f64>) -> TransmissionParams {
        let pattern = SubcarrierPattern::from_occupancy(u).unwrap();
        TransmissionParams::new(15e3, pattern, powers, Modulation::Bpsk, 0.0).unwrap()
    }

    #[test]
    fn single_subcarrier_is_a_tone() {
        let mut u = vec![0u8; 8];
        u[3] = 1;
        let p = params(u, vec![1.0; 8]);
        let t_s = p.critical_t_s();
        let frame = synthesize(&p, &[Complex64::new(1.0, 0.0)], 8, t_s).unwrap();
        for (k, s) in frame.samples.iter().enumerate() {
            let expected = Complex64::from_polar(1.0, 2.0 * PI * 3.0 * 15e3 * k as f64 * t_s);
            assert!((s - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn symbol_count_must_match_active_count() {
        let p = params(vec![1, 0, 1, 0], vec![1.0; 4]);
        let err = synthesize(&p, &[Complex64::new(1.0, 0.0)], 4, p.critical_t_s());
        assert!(matches!(err, Err(Error::ShapeMismatch { expected: 2, actual: 1 })));
    }

    #[test]
    fn undersampling_is_rejected() {
        let p = params(vec![1, 1, 1, 1], vec![1.0; 4]);
        let syms = vec![Complex64::new(1.0, 0.0); 4];
        assert!(synthesize(&p, &syms, 4, 2.0 * p.critical_t_s()).is_err());
    }

    #[test]
    fn critical_sampling_dft_recovers_amplitudes() {
        let mut rng = stream_rng(11, 0);
        for n in [4usize, 8, 16] {
            let p = TransmissionParams::random(
                n,
                30e3,
                &PatternFamily::Random { prob: 0.5 },
                Modulation::Qam16,
                &mut rng,
            )
            .unwrap();
            let bits = random_bits(p.bits_per_frame(), &mut rng);
            let syms = p.modulation.modulate(&bits).unwrap();
            let frame = synthesize(&p, &syms, n, p.critical_t_s()).unwrap();
            let bins = naive_dft(&frame.samples);
            let amps = p.amplitudes(&syms).unwrap();
            let mut expected = vec![Complex64::new(0.0, 0.0); n];
            for (i, a) in amps {
                expected[i] = a;
            }
            for b in 0..n {
                assert!((bins[b] - expected[b]).norm() < 1e-9, "bin {b}");
                // nonzero support == active set
                assert_eq!(bins[b].norm() > 1e-9, p.pattern.is_active(b));
            }
            // the FFT-based analyzer agrees with the naive DFT
            let fast = SpectrumAnalyzer::new(n).spectrum(&frame.samples);
            for b in 0..n {
                assert!((fast[b] - bins[b]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn energy_matches_parseval_under_critical_sampling() {
        let mut rng = stream_rng(12, 0);
        for _ in 0..20 {
            let p = TransmissionParams::random(
                16,
                15e3,
                &PatternFamily::Random { prob: 0.5 },
                Modulation::Qam16,
                &mut rng,
            )
            .unwrap();
            let bits = random_bits(p.bits_per_frame(), &mut rng);
            let syms = p.modulation.modulate(&bits).unwrap();
            let n1 = 32;
            let frame = synthesize(&p, &syms, n1, p.t_u() / n1 as f64).unwrap();
            let expected: f64 = p
                .amplitudes(&syms)
                .unwrap()
                .iter()
                .map(|(_, a)| a.norm_sqr())
                .sum::<f64>()
                * n1 as f64;
            assert!((frame.energy() - expected).abs() / expected < 1e-9);
        }
    }

    #[test]
    fn vectorize_layout() {
        let frame = ComplexFrame {
            samples: vec![Complex64::new(1.0, 2.0), Complex64::new(3.0, 4.0)],
            t_s: 1.0,
        };
        assert_eq!(vectorize(&frame).0, vec![1.0, 3.0, 2.0, 4.0]);
        let real = ComplexFrame {
            samples: vec![Complex64::new(1.0, 0.0), Complex64::new(-2.0, 0.0)],
            t_s: 1.0,
        };
        assert!(vectorize(&real).0[2..].iter().all(|&v| v == 0.0));
        assert_eq!(devectorize(&vectorize(&frame).0, 1.0).unwrap(), frame);
    }

    #[test]
    fn slots_repeat_the_cyclic_extension() {
        let pattern = make_pattern(&PatternKind::Interleaved { q: 4, offset: 0 }, 16, 0).unwrap();
        let params = TransmissionParams::new(1e3, pattern, vec![1.0; 16], Modulation::Bpsk, 0.25e-3)
            .unwrap();
        let syms = vec![Complex64::new(1.0, 0.0); 4];
        let slot = Slot {
            params: params.clone(),
            symbols: syms,
        };
        let t_s = 1.0 / 64e3; // 64 samples per T_u, 80 per T_o
        let frame = synthesize_slots(&[slot.clone(), slot], t_s, 160).unwrap();
        assert_eq!(frame.len(), 160);
        for k in 0..16 {
            assert!((frame.samples[k] - frame.samples[k + 64]).norm() < 1e-9);
        }
        assert!((frame.samples[0] - frame.samples[80]).norm() < 1e-9);
    }

    #[test]
    fn bin_mapping() {
        assert_eq!(subcarrier_bin(5, 15e3, 32, 1.0 / (32.0 * 15e3)), Some(5));
        assert_eq!(subcarrier_bin(5, 15e3, 64, 1.0 / (32.0 * 15e3)), Some(10));
        assert_eq!(subcarrier_bin(1, 15e3, 10, 1.0 / (32.0 * 15e3)), None);
    }
}
