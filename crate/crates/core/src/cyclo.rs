//! Cyclic autocorrelation estimation and the interleaved-subcarrier ambiguity.
//!
//! The estimator is
//! `R(alpha, tau T_s) = (1/M) sum_n r[n] conj(r[n - tau]) exp(-j 2 pi alpha n T_s)`
//! with `r` zero outside the record.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_awgn, db_to_lin};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::waveform::{
    make_pattern, random_bits, synthesize_slots, ComplexFrame, Modulation, PatternKind, Slot,
    TransmissionParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CafGrid {
    pub alpha: f64,
    pub lags: Vec<i64>,
    pub values: Vec<Complex64>,
    pub t_s: f64,
    /// Number of record samples.
    pub m: usize,
}

impl CafGrid {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    pub fn value_at(&self, lag: i64) -> Option<Complex64> {
        let first = *self.lags.first()?;
        let i = usize::try_from(lag - first).ok()?;
        self.values.get(i).copied()
    }
}

/// Evaluates the estimator on every integer lag in `lag_min..=lag_max`.
pub fn estimate_caf(
    samples: &[Complex64],
    alpha: f64,
    lag_min: i64,
    lag_max: i64,
    t_s: f64,
) -> Result<CafGrid> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("CAF record"));
    }
    if lag_min > lag_max {
        return Err(Error::invalid(format!("empty lag range {lag_min}..={lag_max}")));
    }
    let m = samples.len();
    if lag_min.unsigned_abs().max(lag_max.unsigned_abs()) as usize >= m {
        return Err(Error::invalid(format!(
            "record of {m} samples is shorter than the largest lag"
        )));
    }
    // Modulate once so each lag is a plain correlation.
    let rotated: Vec<Complex64> = if alpha == 0.0 {
        samples.to_vec()
    } else {
        samples
            .iter()
            .enumerate()
            .map(|(n, &r)| {
                let cycles = alpha * n as f64 * t_s;
                r * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * cycles.fract())
            })
            .collect()
    };
    let lags: Vec<i64> = (lag_min..=lag_max).collect();
    let values = lags
        .par_iter()
        .map(|&tau| {
            let (start, end) = if tau >= 0 {
                (tau as usize, m)
            } else {
                (0, (m as i64 + tau) as usize)
            };
            let sum: Complex64 = (start..end)
                .map(|n| rotated[n] * samples[(n as i64 - tau) as usize].conj())
                .sum();
            sum / m as f64
        })
        .collect();
    Ok(CafGrid {
        alpha,
        lags,
        values,
        t_s,
        m,
    })
}

/// Lags whose magnitude is a strict maximum over its two neighbours and
/// exceeds `threshold_frac * max |R|`. Grid endpoints are never peaks.
pub fn caf_peaks(grid: &CafGrid, threshold_frac: f64) -> Result<Vec<i64>> {
    let mag = grid.magnitudes();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::invalid("CAF grid is identically zero"));
    }
    let floor = threshold_frac * max;
    Ok((1..mag.len().saturating_sub(1))
        .filter(|&i| mag[i] > mag[i - 1] && mag[i] > mag[i + 1] && mag[i] > floor)
        .map(|i| grid.lags[i])
        .collect())
}

/// Median gap between consecutive peak lags.
pub fn peak_spacing(peaks: &[i64]) -> Option<f64> {
    let mut gaps: Vec<i64> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable();
    let mid = gaps.len() / 2;
    Some(if gaps.len() % 2 == 1 {
        gaps[mid] as f64
    } else {
        (gaps[mid - 1] + gaps[mid]) as f64 / 2.0
    })
}

/// A candidate interleaved configuration: spacing `q` and useful duration `t_u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterleavedCase {
    pub t_u: f64,
    pub q: usize,
}

/// The three interleaved configurations with a common `T_u / q = 64 us`.
pub const AMBIGUOUS_CASES: [InterleavedCase; 3] = [
    InterleavedCase { t_u: 320e-6, q: 5 },
    InterleavedCase { t_u: 256e-6, q: 4 },
    InterleavedCase { t_u: 192e-6, q: 3 },
];

/// Candidates whose `T_u / q` matches the fundamental peak spacing within
/// `tol_s` seconds.
pub fn ambiguity_set(
    peak_lags: &[i64],
    t_s: f64,
    candidates: &[InterleavedCase],
    tol_s: f64,
) -> Result<Vec<InterleavedCase>> {
    if peak_lags.is_empty() {
        return Err(Error::EmptyInput("peak lags"));
    }
    let Some(spacing) = peak_spacing(peak_lags) else {
        return Ok(Vec::new());
    };
    let spacing_s = spacing * t_s;
    Ok(candidates
        .iter()
        .copied()
        .filter(|c| (c.t_u / c.q as f64 - spacing_s).abs() <= tol_s)
        .collect())
}

/// Settings for an interleaved multi-symbol record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterleavedRecordConfig {
    pub n_subcarriers: usize,
    /// Total symbol duration including the cyclic prefix.
    pub t_o: f64,
    pub t_s: f64,
    pub samples: usize,
    pub snr_db: f64,
}

impl Default for InterleavedRecordConfig {
    fn default() -> Self {
        Self {
            n_subcarriers: 64,
            t_o: 384e-6,
            t_s: 1e-6,
            samples: 100_000,
            snr_db: 5.0,
        }
    }
}

/// Noisy BPSK record of consecutive interleaved symbols with random powers.
/// The noise level is set from the record's measured power.
pub fn interleaved_record(
    case: InterleavedCase,
    cfg: &InterleavedRecordConfig,
    seed: u64,
) -> Result<ComplexFrame> {
    if cfg.t_o < case.t_u {
        return Err(Error::invalid("symbol duration shorter than T_u"));
    }
    let mut rng = stream_rng(seed, 1);
    let pattern = make_pattern(
        &PatternKind::Interleaved {
            q: case.q,
            offset: 0,
        },
        cfg.n_subcarriers,
        seed,
    )?;
    let n_slots = (cfg.samples as f64 * cfg.t_s / cfg.t_o).ceil() as usize + 1;
    let slots = (0..n_slots)
        .map(|_| {
            let powers = (0..cfg.n_subcarriers)
                .map(|_| rng.random_range(1.0..=2.0))
                .collect();
            let params = TransmissionParams::new(
                1.0 / case.t_u,
                pattern.clone(),
                powers,
                Modulation::Bpsk,
                cfg.t_o - case.t_u,
            )?;
            let bits = random_bits(params.bits_per_frame(), &mut rng);
            let symbols = Modulation::Bpsk.modulate(&bits)?;
            Ok(Slot { params, symbols })
        })
        .collect::<Result<Vec<_>>>()?;
    let clean = synthesize_slots(&slots, cfg.t_s, cfg.samples)?;
    let n0 = clean.power() / db_to_lin(cfg.snr_db);
    apply_awgn(&clean, n0, &mut rng)
}
