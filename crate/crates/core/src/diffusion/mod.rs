//! Gaussian diffusion over latents: the linear noise schedule, forward
//! corruption, the hybrid noise/variance objective, respaced ancestral
//! sampling with classifier-free guidance, and weight averaging.
//!
//! Timesteps are 0-based indices: index `i` is step `i + 1` of the chain.

mod train;

pub use train::{Dataset, LossRecord, TrainConfig, Trainer};

use crate::autodiff::{Graph, KlConsts, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};
use crate::unet::{split_output, Model, LATENT_CHANNELS, OUTPUT_CHANNELS};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_SAMPLING_STEPS: usize = 250;
pub const DEFAULT_EMA_DECAY: f64 = 0.9999;
pub const DEFAULT_LABEL_DROP: f64 = 0.1;

/// Per-step coefficients of a discrete diffusion chain (all in f64).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub alpha_bar_prev: Vec<f64>,
    /// Posterior variance `beta_tilde`; zero at the first step.
    pub beta_tilde: Vec<f64>,
    /// `log beta_tilde` with the first entry replaced by the second.
    pub log_beta_tilde_clipped: Vec<f64>,
    pub posterior_coef_z0: Vec<f64>,
    pub posterior_coef_zt: Vec<f64>,
    /// Model timestep (index into the base chain) for each step.
    pub timestep_map: Vec<usize>,
}

/// Linear schedule from `beta_1` to `beta_T` over `steps`.
pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<DiffusionSchedule> {
    if steps == 0 || !(0.0 < beta_1 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::Config(format!(
            "need steps > 0 and 0 < beta_1 <= beta_T < 1, got steps={steps}, beta_1={beta_1}, beta_T={beta_t}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_1]
    } else {
        (0..steps)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    DiffusionSchedule::from_betas(betas, (0..steps).collect())
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>, timestep_map: Vec<usize>) -> Result<Self> {
        if betas.is_empty() || betas.len() != timestep_map.len() {
            return Err(Error::Config("schedule needs one timestep per beta".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let n = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        let alpha_bar_prev: Vec<f64> = std::iter::once(1.0).chain(alpha_bar[..n - 1].iter().copied()).collect();
        let beta_tilde: Vec<f64> = (0..n)
            .map(|i| betas[i] * (1.0 - alpha_bar_prev[i]) / (1.0 - alpha_bar[i]))
            .collect();
        let log_beta_tilde_clipped = (0..n)
            .map(|i| {
                let v = if i == 0 && n > 1 { beta_tilde[1] } else { beta_tilde[i] };
                if v > 0.0 {
                    v.ln()
                } else {
                    betas[i].ln()
                }
            })
            .collect();
        let posterior_coef_z0 = (0..n)
            .map(|i| betas[i] * alpha_bar_prev[i].sqrt() / (1.0 - alpha_bar[i]))
            .collect();
        let posterior_coef_zt = (0..n)
            .map(|i| (1.0 - alpha_bar_prev[i]) * alphas[i].sqrt() / (1.0 - alpha_bar[i]))
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bar,
            alpha_bar_prev,
            beta_tilde,
            log_beta_tilde_clipped,
            posterior_coef_z0,
            posterior_coef_zt,
            timestep_map,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Keeps `steps` evenly strided steps (always including the first and
    /// last) and re-derives betas so the kept `alpha_bar` values are exact.
    pub fn respace(&self, steps: usize) -> Result<Self> {
        let n = self.len();
        if steps == 0 || steps > n {
            return Err(Error::Config(format!("cannot respace {n} steps to {steps}")));
        }
        let kept: Vec<usize> = if steps == 1 {
            vec![n - 1]
        } else {
            let stride = (n - 1) as f64 / (steps - 1) as f64;
            (0..steps).map(|i| (i as f64 * stride).round() as usize).collect()
        };
        let mut last = 1.0;
        let mut betas = Vec::with_capacity(steps);
        for &i in &kept {
            betas.push(1.0 - self.alpha_bar[i] / last);
            last = self.alpha_bar[i];
        }
        let map = kept.iter().map(|&i| self.timestep_map[i]).collect();
        Self::from_betas(betas, map)
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Contract(format!(
                "timestep {t} outside schedule of {} steps",
                self.len()
            )));
        }
        Ok(())
    }

    /// Mean of `p(z_{t-1} | z_t)` given a noise estimate.
    pub fn model_mean(&self, t: usize, zt: f64, eps: f64) -> f64 {
        (zt - self.betas[t] / (1.0 - self.alpha_bar[t]).sqrt() * eps) / self.alphas[t].sqrt()
    }

    /// Mean of `q(z_{t-1} | z_t, z_0)`.
    pub fn posterior_mean(&self, t: usize, z0: f64, zt: f64) -> f64 {
        self.posterior_coef_z0[t] * z0 + self.posterior_coef_zt[t] * zt
    }

    /// Log variance interpolated between `log beta_tilde` (logit -1) and
    /// `log beta` (logit +1).
    pub fn learned_logvar(&self, t: usize, logit: f64) -> f64 {
        let v = (logit + 1.0) * 0.5;
        v * self.betas[t].ln() + (1.0 - v) * self.log_beta_tilde_clipped[t]
    }
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps` with one timestep per
/// batch element of `z0: [B, ..]`.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: &[usize], eps: &Tensor<T>, sched: &DiffusionSchedule) -> Result<Tensor<T>> {
    z0.expect_same_shape(eps, "q_sample")?;
    let b = z0.shape().first().copied().unwrap_or(0);
    if t.len() != b || b == 0 {
        return Err(shape_err("q_sample", format!("{} timesteps for batch {b}", t.len())));
    }
    let per = z0.numel() / b;
    let mut out = Vec::with_capacity(z0.numel());
    for (bi, &ti) in t.iter().enumerate() {
        sched.check_index(ti)?;
        let (a, s) = (sched.alpha_bar[ti].sqrt(), (1.0 - sched.alpha_bar[ti]).sqrt());
        let (za, ea) = (&z0.data()[bi * per..][..per], &eps.data()[bi * per..][..per]);
        out.extend(
            za.iter()
                .zip(ea)
                .map(|(&z, &e)| T::lit(a * z.to_f64_lossy() + s * e.to_f64_lossy())),
        );
    }
    Tensor::from_vec(z0.shape(), out)
}

/// Anything that maps `(z_t, t, labels)` to an 8-channel output.
pub trait Denoiser<T: Scalar> {
    fn predict(&self, z: &Tensor<T>, t: &[f64], labels: &[usize]) -> Result<Tensor<T>>;
    fn null_label(&self) -> usize;
}

impl<T: Scalar> Denoiser<T> for Model<T> {
    fn predict(&self, z: &Tensor<T>, t: &[f64], labels: &[usize]) -> Result<Tensor<T>> {
        self.forward(z, t, labels)
    }

    fn null_label(&self) -> usize {
        Model::null_label(self)
    }
}

/// Guided prediction: `eps_u + s (eps_c - eps_u)` on all channels, with the
/// variance logit of the conditional pass.
pub fn cfg_predict<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    z: &Tensor<T>,
    t: f64,
    labels: &[usize],
    scale: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Contract(format!(
            "guidance scale must be finite and >= 0, got {scale}"
        )));
    }
    let ts = vec![t; labels.len()];
    let cond = model.predict(z, &ts, labels)?;
    let (eps_c, logit) = split_output(&cond)?;
    if scale == 1.0 {
        return Ok((eps_c, logit));
    }
    let nulls = vec![model.null_label(); labels.len()];
    let (eps_u, _) = split_output(&model.predict(z, &ts, &nulls)?)?;
    let s = T::lit(scale);
    let eps = eps_u.zip_map(&eps_c, "cfg_predict", |u, c| u + s * (c - u))?;
    Ok((eps, logit))
}

/// How the reverse-step variance is chosen while sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VarianceMode {
    /// Interpolate with the model's variance logit.
    Learned,
    /// Use the posterior variance `beta_tilde`.
    FixedPosterior,
    /// Interpolate with a constant logit instead of the model's.
    ForceLogit(f64),
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    pub variance: VarianceMode,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLING_STEPS,
            cfg_scale: 1.0,
            variance: VarianceMode::Learned,
        }
    }
}

/// Ancestral sampling from `z_T ~ N(0, I)` of shape `[labels.len(), h, w, 4]`
/// over a respaced subsequence of `sched`.
pub fn ddpm_sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    sched: &DiffusionSchedule,
    opts: &SampleOptions,
    labels: &[usize],
    (h, w): (usize, usize),
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let z = rng.normal(&[labels.len(), h, w, LATENT_CHANNELS]);
    ddpm_sample_from(model, sched, opts, labels, z, rng)
}

/// [`ddpm_sample`] starting from a given `z_T`.
pub fn ddpm_sample_from<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    sched: &DiffusionSchedule,
    opts: &SampleOptions,
    labels: &[usize],
    mut z: Tensor<T>,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let sub = sched.respace(opts.steps)?;
    for i in (0..sub.len()).rev() {
        let (eps, logit) = cfg_predict(model, &z, sub.timestep_map[i] as f64, labels, opts.cfg_scale)?;
        let noise: Option<Tensor<T>> = (i > 0).then(|| rng.normal(z.shape()));
        let mut next = Vec::with_capacity(z.numel());
        for k in 0..z.numel() {
            let mean = sub.model_mean(i, z.data()[k].to_f64_lossy(), eps.data()[k].to_f64_lossy());
            let value = match &noise {
                None => mean,
                Some(n) => {
                    let logvar = match opts.variance {
                        VarianceMode::Learned => sub.learned_logvar(i, logit.data()[k].to_f64_lossy()),
                        VarianceMode::FixedPosterior => sub.log_beta_tilde_clipped[i],
                        VarianceMode::ForceLogit(v) => sub.learned_logvar(i, v),
                    };
                    mean + (0.5 * logvar).exp() * n.data()[k].to_f64_lossy()
                }
            };
            next.push(T::lit(value));
        }
        z = Tensor::from_vec(z.shape(), next)?.check_finite("ddpm_sample")?;
    }
    Ok(z)
}

/// `ema <- decay * ema + (1 - decay) * value`, elementwise.
pub fn ema_update<T: Scalar>(ema: &mut Tensor<T>, value: &Tensor<T>, decay: f64) -> Result<()> {
    ema.expect_same_shape(value, "ema_update")?;
    let (d, e) = (T::lit(decay), T::lit(1.0 - decay));
    for (a, &b) in ema.data_mut().iter_mut().zip(value.data()) {
        *a = d * *a + e * b;
    }
    Ok(())
}

/// [`ema_update`] over every tensor of a store, matched by position.
pub fn ema_update_store<T: Scalar>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::Contract("EMA store does not match parameter store".into()));
    }
    for id in params.ids() {
        ema_update(ema.get_mut(id), params.get(id), decay)?;
    }
    Ok(())
}

/// Loss terms of one batch, as recorded graph nodes.
pub struct LossVars {
    pub total: Var,
    pub eps_hat: Var,
    pub l_simple: Var,
    pub l_vlb: Var,
}

/// Fully specified inputs of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossInputs<T> {
    pub z0: Tensor<T>,
    pub labels: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

impl<T: Scalar> LossInputs<T> {
    /// Draws per-element timesteps uniformly, the noise, and label drops.
    pub fn draw(z0: &Tensor<T>, labels: &[usize], sched: &DiffusionSchedule, p_drop: f64, null: usize, rng: &mut Rng) -> Self {
        let t = labels.iter().map(|_| rng.below(sched.len())).collect();
        let eps = rng.normal(z0.shape());
        let labels = labels
            .iter()
            .map(|&l| if rng.uniform_f64() < p_drop { null } else { l })
            .collect();
        Self {
            z0: z0.clone(),
            labels,
            t,
            eps,
        }
    }
}

/// Records `L_simple + vlb_weight * L_vlb`. `L_simple` is the noise MSE;
/// `L_vlb` is the mean Gaussian KL (in bits) between the true posterior and
/// the model's reverse step, with the model mean held fixed so only the
/// variance logit receives its gradient.
pub fn hybrid_loss_graph<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    inputs: &LossInputs<T>,
    sched: &DiffusionSchedule,
    vlb_weight: f64,
) -> Result<LossVars> {
    hybrid_loss_graph_frozen(model, g, inputs, sched, vlb_weight, None)
}

/// [`hybrid_loss_graph`] with the model mean inside `L_vlb` computed from
/// `frozen_eps` when given, instead of from the current noise estimate.
pub fn hybrid_loss_graph_frozen<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    inputs: &LossInputs<T>,
    sched: &DiffusionSchedule,
    vlb_weight: f64,
    frozen_eps: Option<&Tensor<T>>,
) -> Result<LossVars> {
    let LossInputs { z0, labels, t, eps } = inputs;
    let zt = q_sample(z0, t, eps, sched)?;
    let tf: Vec<f64> = t.iter().map(|&i| sched.timestep_map[i] as f64).collect();
    let zv = g.constant(zt.clone());
    let out = model.forward_graph(g, zv, &tf, labels)?;
    debug_assert_eq!(*g.shape(out).last().unwrap(), OUTPUT_CHANNELS);
    let eps_hat = g.slice_last(out, 0, LATENT_CHANNELS)?;
    let logit = g.slice_last(out, LATENT_CHANNELS, LATENT_CHANNELS)?;
    let l_simple = g.mse(eps_hat, eps)?;

    let per = z0.numel() / t.len();
    let frozen = match frozen_eps {
        Some(e) => {
            e.expect_same_shape(g.value(eps_hat), "hybrid_loss")?;
            e.to_f64_vec()
        }
        None => g.value(eps_hat).to_f64_vec(),
    };
    let (z0d, ztd) = (z0.to_f64_vec(), zt.to_f64_vec());
    let mut consts = [const { Vec::new() }; 4];
    for k in 0..z0.numel() {
        let ti = t[k / per];
        let gap = sched.posterior_mean(ti, z0d[k], ztd[k]) - sched.model_mean(ti, ztd[k], frozen[k]);
        consts[0].push(sched.betas[ti].ln());
        consts[1].push(sched.log_beta_tilde_clipped[ti]);
        consts[2].push(sched.log_beta_tilde_clipped[ti]);
        consts[3].push(gap * gap);
    }
    let shape = g.shape(logit).to_vec();
    let [log_beta, log_beta_tilde, logvar_q, mean_gap_sq] = consts.map(|c| Tensor::from_f64(&shape, &c));
    let kl = g.variance_kl(
        logit,
        KlConsts {
            log_beta: log_beta?,
            log_beta_tilde: log_beta_tilde?,
            logvar_q: logvar_q?,
            mean_gap_sq: mean_gap_sq?,
        },
    )?;
    let kl_mean = g.mean(kl)?;
    let l_vlb = g.scale(kl_mean, T::lit(1.0 / std::f64::consts::LN_2))?;
    let weighted = g.scale(l_vlb, T::lit(vlb_weight))?;
    let total = g.add(l_simple, weighted)?;
    Ok(LossVars {
        total,
        eps_hat,
        l_simple,
        l_vlb,
    })
}

/// Values of the hybrid loss `(total, l_simple, l_vlb)` for fixed inputs.
pub fn hybrid_loss<T: Scalar>(model: &Model<T>, inputs: &LossInputs<T>, sched: &DiffusionSchedule) -> Result<(f64, f64, f64)> {
    let mut g = Graph::inference();
    let v = hybrid_loss_graph(model, &mut g, inputs, sched, 1.0)?;
    let get = |x: Var| g.value(x).data()[0].to_f64_lossy();
    Ok((get(v.total), get(v.l_simple), get(v.l_vlb)))
}

#[cfg(test)]
mod tests;
