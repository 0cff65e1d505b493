//! Variational autoencoders over vectorized frames.
//!
//! The encoder emits `[mu, log sigma^2]` of a diagonal Gaussian posterior and
//! the decoder emits `[mu_x, l_x]` with output variance `exp(l_x) + 1e-4`.
//! Training maximizes a per-variant objective built on
//! `ELBO = -KL(q(z|x) || N(0, I)) + eta * log p(x|z)` with one
//! reparameterized sample per datum; gradients are derived by hand and
//! chained through [`Mlp::backward`].

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    load_checkpoint, save_checkpoint, sigmoid, Activation, BatchSampler, Gradients, Loss, Mlp,
    Optimizer, OptimizerKind, TrainConfig,
};
use crate::rng::{derive_seed, standard_normal, stream_rng};

const LOGVAR_MIN: f64 = -14.0;
const LOGVAR_MAX: f64 = 10.0;
const DECODER_VAR_FLOOR: f64 = 1e-4;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Beta { beta: f64 },
    Dip { lambda_d: f64, lambda_od: f64 },
    Factor { gamma: f64 },
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Plain => "vae".into(),
            Variant::Beta { beta } => format!("beta-vae(beta={beta})"),
            Variant::Dip {
                lambda_d,
                lambda_od,
            } => format!("dip-vae(lambda_d={lambda_d},lambda_od={lambda_od})"),
            Variant::Factor { gamma } => format!("factor-vae(gamma={gamma})"),
        }
    }

    fn kl_weight(&self) -> f64 {
        match self {
            Variant::Beta { beta } => *beta,
            _ => 1.0,
        }
    }
}

/// Where the FactorVAE discriminator's "not q(z)" samples come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Draws from the standard-normal prior.
    Prior,
    /// Each latent coordinate independently permuted across the batch.
    PermutedMarginals,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub nz: usize,
    pub variant: Variant,
    /// Weight on the reconstruction term; 1 gives the plain ELBO.
    pub eta: f64,
    /// FactorVAE density-ratio discriminator, emitting one logit.
    pub discriminator: Option<Mlp>,
    pub negatives: NegativeSampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub nz: usize,
    pub discriminator_hidden: Vec<usize>,
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(
        arch: &VaeArchitecture,
        variant: Variant,
        eta: f64,
        negatives: NegativeSampling,
        rng: &mut R,
    ) -> Result<Self> {
        if arch.nz == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if !(eta >= 0.0 && eta <= 1.0) {
            return Err(Error::invalid(format!("eta = {eta} outside [0, 1]")));
        }
        let mut enc = vec![arch.input_dim];
        enc.extend(&arch.hidden);
        enc.push(2 * arch.nz);
        let mut dec = vec![arch.nz];
        dec.extend(arch.hidden.iter().rev());
        dec.push(2 * arch.input_dim);
        let mut encoder = Mlp::new(&enc, Activation::Relu, Activation::Linear, rng)?;
        let mut decoder = Mlp::new(&dec, Activation::Relu, Activation::Linear, rng)?;
        // Both variance heads start at log-variance 0: a random head can emit
        // variances near the floor, whose huge first gradients kill most
        // ReLUs before the means learn anything.
        zero_log_variance_head(&mut encoder, arch.nz);
        zero_log_variance_head(&mut decoder, arch.input_dim);
        let discriminator = match variant {
            Variant::Factor { .. } => {
                let mut w = vec![arch.nz];
                w.extend(&arch.discriminator_hidden);
                w.push(1);
                Some(Mlp::new(&w, Activation::Relu, Activation::Linear, rng)?)
            }
            _ => None,
        };
        Ok(Self {
            encoder,
            decoder,
            nz: arch.nz,
            variant,
            eta,
            discriminator,
            negatives,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Posterior mean and log-variance for each row.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.encoder.predict(x)?;
        let mu = out.slice(s![.., ..self.nz]).to_owned();
        let lv = out
            .slice(s![.., self.nz..])
            .mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok((mu, lv))
    }

    pub fn encode_mean(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.encode(x)?.0)
    }

    /// Decoder mean and variance for each latent row.
    pub fn decode(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.decoder.predict(z)?;
        let d = self.input_dim();
        let mu = out.slice(s![.., ..d]).to_owned();
        let var = out
            .slice(s![.., d..])
            .mapv(|l| l.clamp(LOGVAR_MIN, LOGVAR_MAX).exp() + DECODER_VAR_FLOOR);
        Ok((mu, var))
    }

    pub fn decode_mean(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.decode(z)?.0)
    }

    /// Encode-then-decode through the posterior means.
    pub fn reconstruct(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mu = self.encode_mean(x)?;
        self.decode_mean(mu.view())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "vae",
            "nz": self.nz,
            "variant": self.variant,
            "eta": self.eta,
            "negatives": self.negatives,
        });
        let mut nets = vec![("encoder", &self.encoder), ("decoder", &self.decoder)];
        if let Some(d) = &self.discriminator {
            nets.push(("discriminator", d));
        }
        save_checkpoint(path, meta, &nets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, nets) = load_checkpoint(path)?;
        let malformed = |reason: &str| Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        };
        if meta["kind"] != "vae" {
            return Err(malformed("not a VAE checkpoint"));
        }
        let nz = meta["nz"].as_u64().ok_or_else(|| malformed("missing nz"))? as usize;
        let variant: Variant = serde_json::from_value(meta["variant"].clone())?;
        let negatives: NegativeSampling = serde_json::from_value(meta["negatives"].clone())?;
        let eta = meta["eta"].as_f64().ok_or_else(|| malformed("missing eta"))?;
        let mut encoder = None;
        let mut decoder = None;
        let mut discriminator = None;
        for (name, m) in nets {
            match name.as_str() {
                "encoder" => encoder = Some(m),
                "decoder" => decoder = Some(m),
                "discriminator" => discriminator = Some(m),
                _ => return Err(malformed("unexpected network")),
            }
        }
        Ok(Self {
            encoder: encoder.ok_or_else(|| malformed("missing encoder"))?,
            decoder: decoder.ok_or_else(|| malformed("missing decoder"))?,
            nz,
            variant,
            eta,
            discriminator,
            negatives,
        })
    }
}

fn zero_log_variance_head(net: &mut Mlp, split: usize) {
    let last = net.layers.last_mut().expect("at least one layer");
    last.weights.slice_mut(s![.., split..]).fill(0.0);
    last.bias.slice_mut(s![split..]).fill(0.0);
}

/// `KL(N(mu, diag var) || N(0, I)) = 1/2 sum(mu^2 + var - 1 - ln var)`.
pub fn kl_to_standard_normal(mu: &[f64], var: &[f64]) -> Result<f64> {
    if mu.len() != var.len() {
        return Err(Error::ShapeMismatch {
            expected: mu.len(),
            actual: var.len(),
        });
    }
    if var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("posterior variance must be positive"));
    }
    Ok(0.5
        * mu
            .iter()
            .zip(var)
            .map(|(&m, &v)| m * m + v - 1.0 - v.ln())
            .sum::<f64>())
}

/// Diagonal Gaussian log-density `log N(x; mu, diag var)`.
pub fn gaussian_log_density(x: ArrayView1<f64>, mu: ArrayView1<f64>, var: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(x).and(mu).and(var).for_each(|&x, &m, &v| {
        acc += LN_2PI + v.ln() + (x - m) * (x - m) / v;
    });
    -0.5 * acc
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `-kl + eta * recon`.
    pub total: f64,
    pub kl: f64,
    /// Single-sample `log p(x | z)`.
    pub recon: f64,
}

/// ELBO of one datum for a given standard-normal draw `eps`.
pub fn elbo(model: &VaeModel, x: &[f64], eps: &[f64]) -> Result<ElboTerms> {
    let xb = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let eb = Array2::from_shape_vec((1, eps.len()), eps.to_vec())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let terms = batch_terms(model, xb.view(), eb.view())?;
    Ok(terms[0])
}

/// Per-row ELBO terms for a batch with explicit noise.
pub fn batch_terms(model: &VaeModel, x: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<Vec<ElboTerms>> {
    if eps.dim() != (x.nrows(), model.nz) {
        return Err(Error::ShapeMismatch {
            expected: x.nrows() * model.nz,
            actual: eps.len(),
        });
    }
    let (mu, lv) = model.encode(x)?;
    let var = lv.mapv(f64::exp);
    let z = &mu + &(&var.mapv(f64::sqrt) * &eps);
    let (mx, vx) = model.decode(z.view())?;
    let mut out = Vec::with_capacity(x.nrows());
    for b in 0..x.nrows() {
        let kl = kl_to_standard_normal(
            mu.row(b).as_slice().unwrap(),
            var.row(b).as_slice().unwrap(),
        )?;
        let recon = gaussian_log_density(x.row(b), mx.row(b), vx.row(b));
        let total = -kl + model.eta * recon;
        if !total.is_finite() {
            return Err(Error::NonFinite("ELBO"));
        }
        out.push(ElboTerms { total, kl, recon });
    }
    Ok(out)
}

/// Scalar training loss components for one batch (all batch means except
/// the penalties, which are batch statistics).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss: f64,
    pub kl: f64,
    pub recon: f64,
    pub penalty: f64,
}

/// Gradients of the loss (negative objective) for encoder and decoder.
#[derive(Clone, Debug)]
pub struct VaeGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
    /// Latent samples used, for the discriminator update.
    pub z: Array2<f64>,
}

/// DIP moment penalty `l_od sum_{i!=j} C_ij^2 + l_d sum_i (C_ii - 1)^2` of the
/// batch covariance of `mu`, and its gradient with respect to `mu`.
pub fn dip_penalty(mu: ArrayView2<f64>, lambda_d: f64, lambda_od: f64) -> (f64, Array2<f64>) {
    let b = mu.nrows() as f64;
    let mean = mu.mean_axis(Axis(0)).unwrap();
    let c = &mu - &mean;
    let cov = c.t().dot(&c) / b;
    let k = cov.nrows();
    let mut value = 0.0;
    let mut g = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            if i == j {
                let d = cov[[i, i]] - 1.0;
                value += lambda_d * d * d;
                g[[i, i]] = 2.0 * lambda_d * d;
            } else {
                value += lambda_od * cov[[i, j]] * cov[[i, j]];
                g[[i, j]] = 2.0 * lambda_od * cov[[i, j]];
            }
        }
    }
    // d/dmu_b = (2 / B) G c_b; the centering term sums to zero.
    let grad = c.dot(&g) * (2.0 / b);
    (value, grad)
}

/// Loss and exact gradients for a batch with explicit noise `eps`. The loss
/// is `mean_b(w_kl KL_b - eta recon_b) + penalty`, where the penalty is the
/// DIP moment penalty or `gamma * mean_b logit D(z_b)` for FactorVAE (with
/// the discriminator held fixed).
pub fn loss_and_gradients(
    model: &VaeModel,
    x: ArrayView2<f64>,
    eps: ArrayView2<f64>,
) -> Result<(LossTerms, VaeGradients)> {
    scaled_loss_and_gradients(model, x, eps, 1.0)
}

/// As [`loss_and_gradients`] with the KL term and the penalty multiplied by
/// `reg_scale` (used for warm-up).
fn scaled_loss_and_gradients(
    model: &VaeModel,
    x: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    reg_scale: f64,
) -> Result<(LossTerms, VaeGradients)> {
    let bsz = x.nrows();
    if eps.dim() != (bsz, model.nz) {
        return Err(Error::ShapeMismatch {
            expected: bsz * model.nz,
            actual: eps.len(),
        });
    }
    let b = bsz as f64;
    let nz = model.nz;
    let d = model.input_dim();
    let enc_cache = model.encoder.forward(x)?;
    let enc_out = enc_cache.output();
    let mu = enc_out.slice(s![.., ..nz]).to_owned();
    let lv_raw = enc_out.slice(s![.., nz..]);
    let lv = lv_raw.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
    let var = lv.mapv(f64::exp);
    let sd = lv.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&sd * &eps);

    let dec_cache = model.decoder.forward(z.view())?;
    let dec_out = dec_cache.output();
    let mx = dec_out.slice(s![.., ..d]);
    let lx_raw = dec_out.slice(s![.., d..]);

    let w_kl = reg_scale * model.variant.kl_weight();
    let eta = model.eta;

    // Reconstruction term and its gradient with respect to the decoder output.
    let mut recon = 0.0;
    let mut d_dec = Array2::zeros(dec_out.raw_dim());
    for r in 0..bsz {
        for i in 0..d {
            let l = lx_raw[[r, i]];
            let lc = l.clamp(LOGVAR_MIN, LOGVAR_MAX);
            let e = lc.exp();
            let v = e + DECODER_VAR_FLOOR;
            let diff = x[[r, i]] - mx[[r, i]];
            recon += -0.5 * (LN_2PI + v.ln() + diff * diff / v);
            d_dec[[r, i]] = -eta * diff / v / b;
            if l == lc {
                d_dec[[r, d + i]] = eta * 0.5 * (1.0 / v - diff * diff / (v * v)) * e / b;
            }
        }
    }
    recon /= b;
    let kl = 0.5
        * Zip::from(&mu)
            .and(&var)
            .and(&lv)
            .fold(0.0, |acc, &m, &v, &l| acc + m * m + v - 1.0 - l)
        / b;

    let (dec_grads, mut dz) = model.decoder.backward(&dec_cache, d_dec.view());

    let mut d_mu = mu.mapv(|m| w_kl * m / b);
    let mut d_lv = var.mapv(|v| w_kl * 0.5 * (v - 1.0) / b);
    let mut penalty = 0.0;
    match model.variant {
        Variant::Dip {
            lambda_d,
            lambda_od,
        } => {
            let (p, g) = dip_penalty(mu.view(), reg_scale * lambda_d, reg_scale * lambda_od);
            penalty = p;
            d_mu += &g;
        }
        Variant::Factor { gamma } => {
            let disc = model
                .discriminator
                .as_ref()
                .ok_or_else(|| Error::invalid("FactorVAE model has no discriminator"))?;
            let cache = disc.forward(z.view())?;
            let gamma = reg_scale * gamma;
            penalty = gamma * cache.output().sum() / b;
            let ones = Array2::from_elem((bsz, 1), gamma / b);
            let (_, dz_disc) = disc.backward(&cache, ones.view());
            dz += &dz_disc;
        }
        _ => {}
    }
    d_mu += &dz;
    d_lv += &(&dz * &eps * &sd * 0.5);
    // Zero the gradient where the log-variance was clamped.
    Zip::from(&mut d_lv).and(&lv_raw).for_each(|g, &l| {
        if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&l) {
            *g = 0.0
        }
    });
    let mut d_enc = Array2::zeros(enc_out.raw_dim());
    d_enc.slice_mut(s![.., ..nz]).assign(&d_mu);
    d_enc.slice_mut(s![.., nz..]).assign(&d_lv);
    let (enc_grads, _) = model.encoder.backward(&enc_cache, d_enc.view());

    let loss = w_kl * kl - eta * recon + penalty;
    if !loss.is_finite() {
        return Err(Error::NonFinite("VAE loss"));
    }
    Ok((
        LossTerms {
            loss,
            kl,
            recon,
            penalty,
        },
        VaeGradients {
            encoder: enc_grads,
            decoder: dec_grads,
            z,
        },
    ))
}

/// Scalar loss only (for finite-difference checks).
pub fn loss_value(model: &VaeModel, x: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<f64> {
    Ok(loss_and_gradients(model, x, eps)?.0.loss)
}

/// Density-ratio estimate `mean_b log(D / (1 - D))`, i.e. the mean logit.
pub fn density_ratio_kl(discriminator: &Mlp, z: ArrayView2<f64>) -> Result<f64> {
    let logits = discriminator.predict(z)?;
    Ok(logits.mean().unwrap_or(0.0))
}

fn negative_samples<R: Rng + ?Sized>(
    mode: NegativeSampling,
    z: &Array2<f64>,
    rng: &mut R,
) -> Array2<f64> {
    match mode {
        NegativeSampling::Prior => Array2::from_shape_simple_fn(z.raw_dim(), || standard_normal(rng)),
        NegativeSampling::PermutedMarginals => {
            let mut out = z.clone();
            let mut idx: Vec<usize> = (0..z.nrows()).collect();
            for j in 0..z.ncols() {
                idx.shuffle(rng);
                for (r, &src) in idx.iter().enumerate() {
                    out[[r, j]] = z[[src, j]];
                }
            }
            out
        }
    }
}

/// One BCE step of the discriminator: `z ~ q(z)` labelled 1, negatives 0.
fn discriminator_step<R: Rng + ?Sized>(
    disc: &mut Mlp,
    opt: &mut Optimizer,
    z: &Array2<f64>,
    mode: NegativeSampling,
    rng: &mut R,
) -> Result<f64> {
    let neg = negative_samples(mode, z, rng);
    let inputs = ndarray::concatenate(Axis(0), &[z.view(), neg.view()])
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut target = Array2::zeros((inputs.nrows(), 1));
    target.slice_mut(s![..z.nrows(), ..]).fill(1.0);
    let cache = disc.forward(inputs.view())?;
    let (value, g) = Loss::BceWithLogits.evaluate(cache.output().view(), target.view())?;
    let (grads, _) = disc.backward(&cache, g.view());
    opt.step(disc, &grads);
    Ok(value)
}

/// Discriminator accuracy on fresh positives/negatives, for diagnostics.
pub fn discriminator_accuracy(model: &VaeModel, x: ArrayView2<f64>, seed: u64) -> Result<f64> {
    let Some(disc) = &model.discriminator else {
        return Err(Error::invalid("model has no discriminator"));
    };
    let mut rng = stream_rng(seed, 0);
    let (mu, lv) = model.encode(x)?;
    let z = &mu + &(lv.mapv(|l| (0.5 * l).exp()) * Array2::from_shape_simple_fn(mu.raw_dim(), || standard_normal(&mut rng)));
    let neg = negative_samples(model.negatives, &z, &mut rng);
    let pos_ok = disc.predict(z.view())?.iter().filter(|&&l| sigmoid(l) > 0.5).count();
    let neg_ok = disc.predict(neg.view())?.iter().filter(|&&l| sigmoid(l) <= 0.5).count();
    Ok((pos_ok + neg_ok) as f64 / (2 * z.nrows()) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub loss: Vec<f64>,
    pub kl: Vec<f64>,
    pub recon: Vec<f64>,
    pub penalty: Vec<f64>,
    pub discriminator_loss: Vec<f64>,
}

/// Mini-batch training of any variant. FactorVAE alternates one VAE step
/// and one discriminator step per batch. `batch_fn` returns the inputs for a
/// set of row indices.
pub fn train_variant<F>(model: &mut VaeModel, rows: usize, cfg: &TrainConfig, batch_fn: F) -> Result<TrainTrace>
where
    F: FnMut(&[usize]) -> Array2<f64>,
{
    train_variant_with_warmup(model, rows, cfg, 0, batch_fn)
}

/// [`train_variant`] with the KL term and the variant penalty ramped
/// linearly from 0 to full weight over the first `warmup_steps` steps.
/// Without the ramp, the learned decoder variance can absorb the
/// near-Gaussian OFDM samples before the encoder carries any information
/// (posterior collapse).
pub fn train_variant_with_warmup<F>(
    model: &mut VaeModel,
    rows: usize,
    cfg: &TrainConfig,
    warmup_steps: usize,
    mut batch_fn: F,
) -> Result<TrainTrace>
where
    F: FnMut(&[usize]) -> Array2<f64>,
{
    cfg.validate()?;
    if rows == 0 {
        return Err(Error::EmptyInput("training rows"));
    }
    let mut sampler = BatchSampler::new(rows, cfg.batch_size, cfg.seed);
    let mut rng = stream_rng(derive_seed(cfg.seed, 0xE95), 0);
    let mut enc_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut dec_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut disc_opt = Optimizer::new(OptimizerKind::Adam, cfg.lr);
    let mut trace = TrainTrace::default();
    for step in 0..cfg.steps {
        let x = batch_fn(sampler.next_batch());
        let eps = Array2::from_shape_simple_fn((x.nrows(), model.nz), || standard_normal(&mut rng));
        let reg_scale = if step < warmup_steps {
            step as f64 / warmup_steps as f64
        } else {
            1.0
        };
        let (terms, grads) = scaled_loss_and_gradients(model, x.view(), eps.view(), reg_scale)
            .map_err(|_| Error::Divergence { what: "VAE loss", step })?;
        if !grads.encoder.is_finite() || !grads.decoder.is_finite() {
            return Err(Error::Divergence {
                what: "VAE gradient",
                step,
            });
        }
        enc_opt.step(&mut model.encoder, &grads.encoder);
        dec_opt.step(&mut model.decoder, &grads.decoder);
        if let Some(disc) = model.discriminator.as_mut() {
            let dl = discriminator_step(disc, &mut disc_opt, &grads.z, model.negatives, &mut rng)
                .map_err(|_| Error::Divergence {
                    what: "discriminator loss",
                    step,
                })?;
            trace.discriminator_loss.push(dl);
        }
        if step % 1000 == 0 {
            log::info!(
                "{} step {step}: loss {:.3} kl {:.3} recon {:.3}",
                model.variant.label(),
                terms.loss,
                terms.kl,
                terms.recon
            );
        }
        trace.loss.push(terms.loss);
        trace.kl.push(terms.kl);
        trace.recon.push(terms.recon);
        trace.penalty.push(terms.penalty);
    }
    Ok(trace)
}

/// Importance-sampled `log p(x)` with the encoder posterior as proposal.
pub fn log_evidence<R: Rng + ?Sized>(
    model: &VaeModel,
    x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let xb = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let (mu, lv) = model.encode(xb.view())?;
    let mu = mu.row(0).to_owned();
    let var = lv.row(0).mapv(f64::exp);
    let eps = Array2::from_shape_simple_fn((samples, model.nz), || standard_normal(rng));
    let z = &eps * &var.mapv(f64::sqrt) + &mu;
    let (mx, vx) = model.decode(z.view())?;
    let ones = Array1::ones(model.nz);
    let zeros = Array1::zeros(model.nz);
    let logw: Vec<f64> = (0..samples)
        .map(|k| {
            let lik = gaussian_log_density(xb.row(0), mx.row(k), vx.row(k));
            let prior = gaussian_log_density(z.row(k), zeros.view(), ones.view());
            let q = gaussian_log_density(z.row(k), mu.view(), var.view());
            lik + prior - q
        })
        .collect();
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + (logw.iter().map(|w| (w - m).exp()).sum::<f64>() / samples as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::worst_rel_error;
    use crate::nn::Dense;
    use std::f64::consts::PI;

    fn arch(input: usize, nz: usize) -> VaeArchitecture {
        VaeArchitecture {
            input_dim: input,
            hidden: vec![7, 6],
            nz,
            discriminator_hidden: vec![5, 5],
        }
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_to_standard_normal(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!((kl_to_standard_normal(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_to_standard_normal(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn kl_matches_quadrature() {
        let mut rng = stream_rng(1, 0);
        for _ in 0..20 {
            let m: f64 = 2.0 * standard_normal(&mut rng);
            let v: f64 = (standard_normal(&mut rng)).exp();
            // integral of q log(q/p) by the trapezoid rule over +-12 sd
            let sd = v.sqrt();
            let n = 200_000;
            let lo = m - 12.0 * sd;
            let h = 24.0 * sd / n as f64;
            let mut acc = 0.0;
            for k in 0..=n {
                let x = lo + k as f64 * h;
                let lq = -0.5 * ((2.0 * PI * v).ln() + (x - m).powi(2) / v);
                let lp = -0.5 * ((2.0 * PI).ln() + x * x);
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                acc += w * lq.exp() * (lq - lp);
            }
            let quad = acc * h;
            let closed = kl_to_standard_normal(&[m], &[v]).unwrap();
            assert!((quad - closed).abs() < 1e-6, "{quad} vs {closed}");
        }
    }

    fn model(variant: Variant, seed: u64) -> VaeModel {
        let mut rng = stream_rng(seed, 0);
        VaeModel::new(&arch(6, 3), variant, 0.7, NegativeSampling::Prior, &mut rng).unwrap()
    }

    #[test]
    fn eta_zero_gives_negative_kl_and_eta_is_linear() {
        let mut rng = stream_rng(2, 0);
        let mut m = model(Variant::Plain, 3);
        let x: Vec<f64> = (0..6).map(|_| standard_normal(&mut rng)).collect();
        let eps: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
        m.eta = 0.0;
        let t0 = elbo(&m, &x, &eps).unwrap();
        assert_eq!(t0.total, -t0.kl);
        m.eta = 0.9;
        let t1 = elbo(&m, &x, &eps).unwrap();
        m.eta = 0.3;
        let t2 = elbo(&m, &x, &eps).unwrap();
        assert!(((t1.total - t2.total) - 0.6 * t1.recon).abs() < 1e-9);
        assert!(t1.kl >= 0.0);
    }

    #[test]
    fn perfect_autoencoder_recon_is_density_peak() {
        // Decoder mean == x exactly via identity layers; encoder passes x
        // through with tiny posterior variance.
        let d = 2;
        let enc = Mlp::from_layers(vec![Dense {
            weights: ndarray::array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
            bias: ndarray::array![0.0, 0.0, -14.0, -14.0],
            activation: Activation::Linear,
        }])
        .unwrap();
        let dec = Mlp::from_layers(vec![Dense {
            weights: ndarray::array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
            bias: ndarray::array![0.0, 0.0, -14.0, -14.0],
            activation: Activation::Linear,
        }])
        .unwrap();
        let m = VaeModel {
            encoder: enc,
            decoder: dec,
            nz: d,
            variant: Variant::Plain,
            eta: 1.0,
            discriminator: None,
            negatives: NegativeSampling::Prior,
        };
        let t = elbo(&m, &[0.4, -1.3], &[0.0, 0.0]).unwrap();
        let v = (-14f64).exp() + DECODER_VAR_FLOOR;
        let peak = -(d as f64) * 0.5 * (LN_2PI + v.ln());
        assert!((t.recon - peak).abs() < 1e-9);
    }

    fn grad_check(variant: Variant, seed: u64) {
        let mut m = model(variant, seed);
        let mut rng = stream_rng(seed, 7);
        // Give the discriminator non-trivial weights.
        if let Some(d) = m.discriminator.as_mut() {
            for l in &mut d.layers {
                l.bias.mapv_inplace(|_| 0.1 * standard_normal(&mut rng));
            }
        }
        let bsz = 5;
        let x = Array2::from_shape_simple_fn((bsz, 6), || standard_normal(&mut rng));
        let eps = Array2::from_shape_simple_fn((bsz, 3), || standard_normal(&mut rng));
        let (_, g) = loss_and_gradients(&m, x.view(), eps.view()).unwrap();
        let h = 1e-4;
        for which in 0..2 {
            let count = if which == 0 { m.encoder.param_count() } else { m.decoder.param_count() };
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for _ in 0..100 {
                let c = rng.random_range(0..count);
                let eval = |delta: f64| {
                    let mut mm = m.clone();
                    let net = if which == 0 { &mut mm.encoder } else { &mut mm.decoder };
                    let v = net.param(c);
                    net.set_param(c, v + delta);
                    loss_value(&mm, x.view(), eps.view()).unwrap()
                };
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
                analytic.push(if which == 0 { g.encoder.get(c) } else { g.decoder.get(c) });
            }
            let err = worst_rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "{variant:?} net {which}: {err}");
        }
        m.eta = 1.0;
    }

    #[test]
    fn gradient_check_every_variant() {
        grad_check(Variant::Plain, 10);
        grad_check(Variant::Beta { beta: 10.0 }, 11);
        grad_check(
            Variant::Dip {
                lambda_d: 5.0,
                lambda_od: 10.0,
            },
            12,
        );
        grad_check(Variant::Factor { gamma: 5.0 }, 13);
    }

    #[test]
    fn dip_penalty_vanishes_at_identity_covariance() {
        // Rows +-e_i scaled so the biased covariance is exactly I.
        let k = 3;
        let mut mu = Array2::zeros((2 * k, k));
        for i in 0..k {
            mu[[2 * i, i]] = (k as f64).sqrt();
            mu[[2 * i + 1, i]] = -(k as f64).sqrt();
        }
        let (p, g) = dip_penalty(mu.view(), 5.0, 10.0);
        assert!(p.abs() < 1e-24);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_discriminator_gives_zero_ratio() {
        let mut rng = stream_rng(4, 0);
        let mut d = Mlp::new(&[3, 4, 1], Activation::Relu, Activation::Linear, &mut rng).unwrap();
        for l in &mut d.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let z = Array2::from_shape_simple_fn((10, 3), || standard_normal(&mut rng));
        assert_eq!(sigmoid(d.predict(z.view()).unwrap()[[0, 0]]), 0.5);
        assert_eq!(density_ratio_kl(&d, z.view()).unwrap(), 0.0);
    }

    /// Linear-Gaussian toy: the expected single-sample reparameterized
    /// gradient equals the analytic gradient of the expected loss.
    #[test]
    fn reparameterization_gradient_is_unbiased() {
        // 1-d latent, 1-d data; encoder mu = a x + c, logvar = fixed bias;
        // decoder mean = w z, log-variance fixed. E_eps[(x - w(mu + s eps))^2]
        // = (x - w mu)^2 + w^2 s^2, so the expected loss has a closed form.
        let enc = Mlp::from_layers(vec![Dense {
            weights: ndarray::array![[0.8, 0.0]],
            bias: ndarray::array![0.1, -0.6],
            activation: Activation::Linear,
        }])
        .unwrap();
        let dec = Mlp::from_layers(vec![Dense {
            weights: ndarray::array![[1.3, 0.0]],
            bias: ndarray::array![0.0, 0.2],
            activation: Activation::Linear,
        }])
        .unwrap();
        let m = VaeModel {
            encoder: enc,
            decoder: dec,
            nz: 1,
            variant: Variant::Plain,
            eta: 1.0,
            discriminator: None,
            negatives: NegativeSampling::Prior,
        };
        let x = ndarray::array![[0.9]];
        let expected_loss = |m: &VaeModel| {
            let a = m.encoder.layers[0].weights[[0, 0]];
            let c = m.encoder.layers[0].bias[0];
            let lv = m.encoder.layers[0].bias[1];
            let w = m.decoder.layers[0].weights[[0, 0]];
            let v = m.decoder.layers[0].bias[1].exp() + DECODER_VAR_FLOOR;
            let mu = a * 0.9 + c;
            let s2 = lv.exp();
            let kl = 0.5 * (mu * mu + s2 - 1.0 - lv);
            let e_sq = (0.9 - w * mu).powi(2) + w * w * s2;
            kl + 0.5 * (LN_2PI + v.ln() + e_sq / v)
        };
        let mut rng = stream_rng(5, 0);
        let draws = 10_000;
        let mut mean_g = vec![0.0; 3];
        for _ in 0..draws {
            let eps = ndarray::array![[standard_normal(&mut rng)]];
            let (_, g) = loss_and_gradients(&m, x.view(), eps.view()).unwrap();
            // a (encoder weight 0), logvar bias (encoder param 3), w (decoder weight 0)
            mean_g[0] += g.encoder.get(0) / draws as f64;
            mean_g[1] += g.encoder.get(3) / draws as f64;
            mean_g[2] += g.decoder.get(0) / draws as f64;
        }
        let h = 1e-5;
        let fd = |net: usize, idx: usize| {
            let mut p = m.clone();
            let mut q = m.clone();
            let (pn, qn) = if net == 0 {
                (&mut p.encoder, &mut q.encoder)
            } else {
                (&mut p.decoder, &mut q.decoder)
            };
            pn.set_param(idx, pn.param(idx) + h);
            qn.set_param(idx, qn.param(idx) - h);
            (expected_loss(&p) - expected_loss(&q)) / (2.0 * h)
        };
        let analytic = [fd(0, 0), fd(0, 3), fd(1, 0)];
        for (mc, an) in mean_g.iter().zip(&analytic) {
            assert!((mc - an).abs() < 1e-2 * an.abs().max(1.0), "{mc} vs {an}");
        }
    }

    #[test]
    fn elbo_lower_bounds_importance_sampled_evidence() {
        // Short training on a 2-factor toy set, then compare per datum.
        let mut rng = stream_rng(6, 0);
        let n = 2000;
        let data = Array2::from_shape_fn((n, 4), |(_, _)| 0.0);
        let mut data = data;
        for r in 0..n {
            let a: f64 = standard_normal(&mut rng);
            let b: f64 = standard_normal(&mut rng);
            data[[r, 0]] = a + 0.05 * standard_normal(&mut rng);
            data[[r, 1]] = 0.5 * a + 0.05 * standard_normal(&mut rng);
            data[[r, 2]] = b + 0.05 * standard_normal(&mut rng);
            data[[r, 3]] = -b + 0.05 * standard_normal(&mut rng);
        }
        let mut m = VaeModel::new(
            &VaeArchitecture {
                input_dim: 4,
                hidden: vec![32],
                nz: 2,
                discriminator_hidden: vec![],
            },
            Variant::Plain,
            1.0,
            NegativeSampling::Prior,
            &mut rng,
        )
        .unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 100,
            steps: 1500,
            optimizer: OptimizerKind::Adam,
            seed: 1,
        };
        train_variant(&mut m, n, &cfg, |idx| data.select(Axis(0), idx)).unwrap();
        let mut ok = 0;
        let trials = 100;
        for r in 0..trials {
            let x = data.row(r).to_vec();
            // the bound is the expectation over eps, estimated with 1000 draws
            let bound = (0..1000)
                .map(|_| {
                    let eps: Vec<f64> = (0..2).map(|_| standard_normal(&mut rng)).collect();
                    elbo(&m, &x, &eps).unwrap().total
                })
                .sum::<f64>()
                / 1000.0;
            let ev = log_evidence(&m, &x, 1000, &mut rng).unwrap();
            if bound <= ev {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}/{trials}");
    }

    #[test]
    fn encode_is_deterministic_and_checkpoint_roundtrips() {
        let m = model(Variant::Factor { gamma: 5.0 }, 8);
        let mut rng = stream_rng(8, 1);
        let x = Array2::from_shape_simple_fn((4, 6), || standard_normal(&mut rng));
        assert_eq!(m.encode_mean(x.view()).unwrap(), m.encode_mean(x.view()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vae.ckpt");
        m.save(&p).unwrap();
        let back = VaeModel::load(&p).unwrap();
        assert_eq!(back.variant, m.variant);
        assert_eq!(back.nz, 3);
        assert!(back.discriminator.is_some());
        let a = m.encode_mean(x.view()).unwrap();
        let b = back.encode_mean(x.view()).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn factor_training_runs_with_both_negative_modes() {
        let mut rng = stream_rng(9, 0);
        let data = Array2::from_shape_simple_fn((300, 6), || standard_normal(&mut rng));
        for neg in [NegativeSampling::Prior, NegativeSampling::PermutedMarginals] {
            let mut m = model(Variant::Factor { gamma: 5.0 }, 9);
            m.negatives = neg;
            let cfg = TrainConfig {
                lr: 1e-3,
                batch_size: 50,
                steps: 50,
                optimizer: OptimizerKind::Adam,
                seed: 2,
            };
            let t = train_variant(&mut m, 300, &cfg, |idx| data.select(Axis(0), idx)).unwrap();
            assert_eq!(t.discriminator_loss.len(), 50);
            let acc = discriminator_accuracy(&m, data.view(), 1).unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}
