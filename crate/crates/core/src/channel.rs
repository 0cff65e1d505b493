//! Channel models and SNR bookkeeping.
//!
//! Noise convention: complex samples receive `CN(0, N0)` noise, i.e. variance
//! `N0 / 2` on each real dimension.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::waveform::{ComplexFrame, TransmissionParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    /// Tapped delay line; delays in seconds, quantized to the sampling grid.
    Multipath {
        amplitudes: Vec<f64>,
        delays_s: Vec<f64>,
    },
    RayleighFlat,
}

impl ChannelKind {
    /// Three-tap profile with amplitudes `[1, 0.8, 0.6]` at `[0, 2, 4]` us.
    pub fn three_tap() -> Self {
        ChannelKind::Multipath {
            amplitudes: vec![1.0, 0.8, 0.6],
            delays_s: vec![0.0, 2e-6, 4e-6],
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Multipath { .. } => "multipath",
            ChannelKind::RayleighFlat => "rayleigh_flat",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ChannelKind::Multipath {
            amplitudes,
            delays_s,
        } = self
        {
            if amplitudes.len() != delays_s.len() {
                return Err(Error::ShapeMismatch {
                    expected: amplitudes.len(),
                    actual: delays_s.len(),
                });
            }
            if amplitudes.is_empty() {
                return Err(Error::EmptyInput("multipath taps"));
            }
            if delays_s.iter().any(|d| !(*d >= 0.0)) {
                return Err(Error::invalid("multipath delays must be non-negative"));
            }
            if delays_s.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::invalid("multipath delays must be sorted"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub n0: f64,
}

impl ChannelSpec {
    pub fn new(kind: ChannelKind, n0: f64) -> Result<Self> {
        kind.validate()?;
        if !(n0 > 0.0 && n0.is_finite()) {
            return Err(Error::invalid(format!("N0 = {n0} must be positive")));
        }
        Ok(Self { kind, n0 })
    }

    /// Applies the fading/dispersion stage and then additive noise. Returns
    /// the flat gain seen by the frame (1 for non-Rayleigh channels), which a
    /// receiver with perfect CSI divides out.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        frame: &ComplexFrame,
        rng: &mut R,
    ) -> Result<(ComplexFrame, Complex64)> {
        let (faded, gain) = match &self.kind {
            ChannelKind::Awgn => (frame.clone(), Complex64::new(1.0, 0.0)),
            ChannelKind::Multipath {
                amplitudes,
                delays_s,
            } => (
                apply_multipath(frame, amplitudes, delays_s, frame.t_s)?,
                Complex64::new(1.0, 0.0),
            ),
            ChannelKind::RayleighFlat => apply_rayleigh_flat(frame, rng),
        };
        Ok((apply_awgn(&faded, self.n0, rng)?, gain))
    }
}

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn lin_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// One `CN(0, n0)` draw.
pub fn complex_noise<R: Rng + ?Sized>(n0: f64, rng: &mut R) -> Complex64 {
    let s = (n0 / 2.0).sqrt();
    Complex64::new(s * standard_normal(rng), s * standard_normal(rng))
}

/// Adds `CN(0, n0)` noise to every sample. `n0 == 0` is the noiseless limit.
pub fn apply_awgn<R: Rng + ?Sized>(
    frame: &ComplexFrame,
    n0: f64,
    rng: &mut R,
) -> Result<ComplexFrame> {
    if !(n0 >= 0.0 && n0.is_finite()) {
        return Err(Error::invalid(format!("N0 = {n0} must be non-negative")));
    }
    let samples = frame
        .samples
        .iter()
        .map(|&s| s + complex_noise(n0, rng))
        .collect();
    Ok(ComplexFrame {
        samples,
        t_s: frame.t_s,
    })
}

/// Discrete convolution with the tap vector, truncated to the input length.
pub fn apply_multipath(
    frame: &ComplexFrame,
    amplitudes: &[f64],
    delays_s: &[f64],
    t_s: f64,
) -> Result<ComplexFrame> {
    ChannelKind::Multipath {
        amplitudes: amplitudes.to_vec(),
        delays_s: delays_s.to_vec(),
    }
    .validate()?;
    let taps: Vec<(usize, f64)> = delays_s
        .iter()
        .zip(amplitudes)
        .map(|(&d, &a)| {
            let k = d / t_s;
            let r = k.round();
            if (k - r).abs() > 1e-6 {
                Err(Error::UnrepresentableDelay { delay_s: d, t_s })
            } else {
                Ok((r as usize, a))
            }
        })
        .collect::<Result<_>>()?;
    let n = frame.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for &(d, a) in &taps {
        for k in d..n {
            out[k] += frame.samples[k - d] * a;
        }
    }
    Ok(ComplexFrame {
        samples: out,
        t_s: frame.t_s,
    })
}

/// Multiplies the frame by a single gain `h ~ CN(0, 1)`.
pub fn apply_rayleigh_flat<R: Rng + ?Sized>(
    frame: &ComplexFrame,
    rng: &mut R,
) -> (ComplexFrame, Complex64) {
    let h = complex_noise(1.0, rng);
    let samples = frame.samples.iter().map(|&s| s * h).collect();
    (
        ComplexFrame {
            samples,
            t_s: frame.t_s,
        },
        h,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub e_s: f64,
    pub snr: f64,
    /// Rate factor `N_a b / N`.
    pub q: f64,
    pub eb_n0: f64,
}

pub fn rate_factor(params: &TransmissionParams) -> f64 {
    params.bits_per_frame() as f64 / params.n_subcarriers as f64
}

pub fn link_budget(params: &TransmissionParams, frame: &ComplexFrame, n0: f64) -> Result<LinkBudget> {
    if !(n0 > 0.0) {
        return Err(Error::invalid(format!("N0 = {n0} must be positive")));
    }
    let e_s = frame.power();
    let q = rate_factor(params);
    let snr = e_s / n0;
    Ok(LinkBudget {
        e_s,
        snr,
        q,
        eb_n0: snr / q,
    })
}
