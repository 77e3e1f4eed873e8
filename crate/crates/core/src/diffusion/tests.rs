use super::*;
use crate::tensor::Lmdf;
use crate::unet::{build_model, ModelConfig, ModelFlags};

fn default_schedule() -> DiffusionSchedule {
    make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        variant: "test".into(),
        stage_dims: [8, 16, 32],
        encoder_depths: [1, 1, 1, 0],
        bottleneck_depth: 1,
        decoder_depths: [1, 1, 1, 0],
        cond_dim: 6,
        window: 2,
        state_dim: 2,
        num_classes: 3,
        flags: ModelFlags::default(),
    }
}

/// Predicts the exact noise that maps a known `z0` to `z` at the queried step.
struct Oracle {
    z0: Tensor<f64>,
    sched: DiffusionSchedule,
}

impl Denoiser<f64> for Oracle {
    fn predict(&self, z: &Tensor<f64>, t: &[f64], _labels: &[usize]) -> Result<Tensor<f64>> {
        let ab = self.sched.alpha_bar[t[0] as usize];
        let mut out = Vec::new();
        for (zr, z0r) in z.data().chunks(4).zip(self.z0.data().chunks(4)) {
            out.extend(zr.iter().zip(z0r).map(|(zt, z0)| (zt - ab.sqrt() * z0) / (1.0 - ab).sqrt()));
            out.extend([0.0; 4]);
        }
        let mut shape = z.shape().to_vec();
        shape[3] = 8;
        Tensor::from_vec(&shape, out)
    }

    fn null_label(&self) -> usize {
        99
    }
}

/// Returns `label + 1` in the noise channels and `-label` in the logit.
struct LabelEcho;

impl Denoiser<f64> for LabelEcho {
    fn predict(&self, z: &Tensor<f64>, _t: &[f64], labels: &[usize]) -> Result<Tensor<f64>> {
        let per = z.numel() / labels.len() / 4;
        let mut out = Vec::new();
        for &l in labels {
            for _ in 0..per {
                out.extend([l as f64 + 1.0; 4]);
                out.extend([-(l as f64); 4]);
            }
        }
        let mut shape = z.shape().to_vec();
        shape[3] = 8;
        Tensor::from_vec(&shape, out)
    }

    fn null_label(&self) -> usize {
        10
    }
}

#[test]
fn default_schedule_endpoints() {
    let s = default_schedule();
    assert_eq!(s.alpha_bar[0], 1.0 - 1e-4);
    assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    assert!(s.betas.windows(2).all(|w| w[1] >= w[0]));
    assert!(*s.alpha_bar.last().unwrap() < 0.01);
    assert_eq!(s.beta_tilde[0], 0.0);
    assert_eq!(s.log_beta_tilde_clipped[0], s.beta_tilde[1].ln());
}

#[test]
fn constant_schedule_posterior_is_below_beta() {
    let s = make_schedule(50, 0.02, 0.02).unwrap();
    assert!((1..50).all(|i| s.beta_tilde[i] < s.betas[i]));
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(make_schedule(10, 0.0, 0.1).is_err());
    assert!(make_schedule(10, 0.2, 0.1).is_err());
    assert!(make_schedule(10, 0.1, 1.0).is_err());
    assert!(make_schedule(0, 0.1, 0.2).is_err());
}

#[test]
fn respacing_keeps_alpha_bar_at_kept_steps() {
    let s = default_schedule();
    let r = s.respace(250).unwrap();
    assert_eq!(r.len(), 250);
    assert_eq!(r.timestep_map[0], 0);
    assert_eq!(*r.timestep_map.last().unwrap(), 999);
    for (i, &t) in r.timestep_map.iter().enumerate() {
        assert!((r.alpha_bar[i] - s.alpha_bar[t]).abs() < 1e-14);
    }
    let full = s.respace(1000).unwrap();
    for i in 0..1000 {
        assert!((full.betas[i] - s.betas[i]).abs() < 1e-14);
    }
    assert!(s.respace(1001).is_err());
}

#[test]
fn q_sample_without_noise_scales_z0() {
    let s = default_schedule();
    let z0: Tensor<f64> = Rng::new(1).normal(&[2, 2, 2, 4]);
    let zt = q_sample(&z0, &[10, 500], &Tensor::zeros(&[2, 2, 2, 4]), &s).unwrap();
    for k in 0..32 {
        let t = if k < 16 { 10 } else { 500 };
        assert!((zt.data()[k] - s.alpha_bar[t].sqrt() * z0.data()[k]).abs() < 1e-15);
    }
    assert!(q_sample(&z0, &[10, 1000], &z0, &s).is_err());
}

#[test]
fn q_sample_energy_matches_variance_identity() {
    let s = default_schedule();
    let mut rng = Rng::new(2);
    let z0: Tensor<f64> = rng.normal(&[1, 2, 2, 4]);
    let t = 300;
    let draws = 10_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let eps = rng.normal(z0.shape());
        let zt = q_sample(&z0, &[t], &eps, &s).unwrap();
        acc += zt.data().iter().map(|v| v * v).sum::<f64>();
    }
    let energy = z0.data().iter().map(|v| v * v).sum::<f64>();
    let want = s.alpha_bar[t] * energy + (1.0 - s.alpha_bar[t]) * 16.0;
    assert!((acc / draws as f64 / want - 1.0).abs() < 0.03);
}

#[test]
fn closed_form_marginal_matches_iterated_transitions() {
    let s = make_schedule(8, 0.05, 0.3).unwrap();
    let mut rng = Rng::new(3);
    let z0 = 1.5;
    let draws = 10_000;
    let (mut m1, mut m2) = (0.0, 0.0);
    for _ in 0..draws {
        let mut z = z0;
        for b in &s.betas {
            z = (1.0 - b).sqrt() * z + b.sqrt() * rng.normal_f64();
        }
        m1 += z;
        m2 += z * z;
    }
    let mean = m1 / draws as f64;
    let var = m2 / draws as f64 - mean * mean;
    let ab = s.alpha_bar[7];
    assert!((mean / (ab.sqrt() * z0) - 1.0).abs() < 0.03, "{mean}");
    assert!((var / (1.0 - ab) - 1.0).abs() < 0.03, "{var}");
}

#[test]
fn kl_between_identical_gaussians_is_zero() {
    let mut g = Graph::<f64>::inference();
    let logit = g.constant(Tensor::full(&[3], -1.0));
    let lb = Tensor::full(&[3], 0.3f64.ln());
    let kl = g
        .variance_kl(
            logit,
            KlConsts {
                log_beta: lb.clone(),
                log_beta_tilde: Tensor::zeros(&[3]),
                logvar_q: Tensor::zeros(&[3]),
                mean_gap_sq: Tensor::zeros(&[3]),
            },
        )
        .unwrap();
    assert!(g.value(kl).max_abs() < 1e-15);
}

#[test]
fn zero_init_model_loss_is_noise_energy() {
    let s = default_schedule();
    let model: Model<f64> = build_model(&small_config(), 1).unwrap();
    let mut rng = Rng::new(4);
    let inputs = LossInputs::draw(&Tensor::zeros(&[2, 8, 8, 4]), &[0, 1], &s, 0.0, 3, &mut rng);
    let (total, l_simple, l_vlb) = hybrid_loss(&model, &inputs, &s).unwrap();
    let energy = inputs.eps.data().iter().map(|v| v * v).sum::<f64>() / inputs.eps.numel() as f64;
    assert!((l_simple - energy).abs() < 1e-12);
    assert!(l_vlb >= 0.0);
    assert!((total - l_simple - l_vlb).abs() < 1e-12);
}

#[test]
fn label_drop_uses_null_label() {
    let s = default_schedule();
    let z = Tensor::<f64>::zeros(&[64, 1, 1, 4]);
    let labels = vec![0; 64];
    let all = LossInputs::draw(&z, &labels, &s, 1.0, 7, &mut Rng::new(0));
    assert!(all.labels.iter().all(|&l| l == 7));
    let none = LossInputs::draw(&z, &labels, &s, 0.0, 7, &mut Rng::new(0));
    assert!(none.labels.iter().all(|&l| l == 0));
}

#[test]
fn single_step_oracle_recovers_posterior_mean() {
    let s = make_schedule(1, 0.3, 0.3).unwrap();
    let mut rng = Rng::new(5);
    let z0: Tensor<f64> = rng.normal(&[1, 2, 2, 4]);
    let eps: Tensor<f64> = rng.normal(z0.shape());
    let z1 = q_sample(&z0, &[0], &eps, &s).unwrap();
    let oracle = Oracle {
        z0: z0.clone(),
        sched: s.clone(),
    };
    let opts = SampleOptions {
        steps: 1,
        ..SampleOptions::default()
    };
    let out = ddpm_sample_from(&oracle, &s, &opts, &[0], z1.clone(), &mut rng).unwrap();
    for k in 0..z0.numel() {
        let want = s.posterior_mean(0, z0.data()[k], z1.data()[k]);
        assert!((out.data()[k] - want).abs() < 1e-12);
        assert!((out.data()[k] - z0.data()[k]).abs() < 1e-12);
    }
}

#[test]
fn zero_init_sampler_follows_the_linear_recursion() {
    let s = default_schedule();
    let model: Model<f64> = build_model(&small_config(), 2).unwrap();
    let opts = SampleOptions {
        steps: 12,
        ..SampleOptions::default()
    };
    let got = ddpm_sample(&model, &s, &opts, &[1], (8, 8), &mut Rng::new(6)).unwrap();

    let sub = s.respace(12).unwrap();
    let mut rng = Rng::new(6);
    let mut z: Tensor<f64> = rng.normal(&[1, 8, 8, 4]);
    for i in (0..12).rev() {
        let scale = 1.0 / sub.alphas[i].sqrt();
        z = if i > 0 {
            let sd = (0.5 * (0.5 * sub.betas[i].ln() + 0.5 * sub.log_beta_tilde_clipped[i])).exp();
            let n: Tensor<f64> = rng.normal(z.shape());
            z.zip_map(&n, "oracle", |a, b| a * scale + sd * b).unwrap()
        } else {
            z.scale(scale)
        };
    }
    assert!(got.max_abs_diff(&z).unwrap() < 1e-12);
}

#[test]
fn posterior_variance_and_forced_logit_give_identical_trajectories() {
    let s = default_schedule();
    let mut model: Model<f64> = build_model(&small_config(), 3).unwrap();
    let head = model.layout.head.0;
    let shape = model.params.get(head).shape().to_vec();
    *model.params.get_mut(head) = Rng::new(7).normal::<f64>(&shape).scale(0.1);
    let run = |variance| {
        let opts = SampleOptions {
            steps: 6,
            cfg_scale: 1.0,
            variance,
        };
        ddpm_sample(&model, &s, &opts, &[2], (8, 8), &mut Rng::new(8)).unwrap()
    };
    let fixed = run(VarianceMode::FixedPosterior);
    assert_eq!(fixed, run(VarianceMode::ForceLogit(-1.0)));
    assert_ne!(fixed, run(VarianceMode::Learned));
}

#[test]
fn sampling_is_deterministic() {
    let s = default_schedule();
    let model: Model<f32> = build_model(&small_config(), 4).unwrap();
    let opts = SampleOptions {
        steps: 5,
        cfg_scale: 4.0,
        variance: VarianceMode::Learned,
    };
    let a = ddpm_sample(&model, &s, &opts, &[0, 1], (8, 8), &mut Rng::new(9)).unwrap();
    let b = ddpm_sample(&model, &s, &opts, &[0, 1], (8, 8), &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[2, 8, 8, 4]);
}

#[test]
fn guidance_scale_endpoints() {
    let z = Tensor::<f64>::zeros(&[1, 2, 2, 4]);
    let (eps, logit) = cfg_predict(&LabelEcho, &z, 5.0, &[3], 1.0).unwrap();
    assert!(eps.data().iter().all(|&v| v == 4.0));
    assert!(logit.data().iter().all(|&v| v == -3.0));
    let (eps, logit) = cfg_predict(&LabelEcho, &z, 5.0, &[3], 0.0).unwrap();
    assert!(eps.data().iter().all(|&v| v == 11.0));
    assert!(logit.data().iter().all(|&v| v == -3.0));
    let (eps, _) = cfg_predict(&LabelEcho, &z, 5.0, &[3], 4.0).unwrap();
    assert!(eps.data().iter().all(|&v| v == 11.0 + 4.0 * (4.0 - 11.0)));
    assert!(cfg_predict(&LabelEcho, &z, 5.0, &[3], -0.5).is_err());
}

#[test]
fn ema_endpoints_and_geometric_convergence() {
    let theta = Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap();
    let mut ema = Tensor::<f64>::zeros(&[2]);
    ema_update(&mut ema, &theta, 1.0).unwrap();
    assert_eq!(ema.max_abs(), 0.0);
    ema_update(&mut ema, &theta, 0.0).unwrap();
    assert_eq!(ema, theta);
    let mut ema = Tensor::<f64>::zeros(&[2]);
    let d: f64 = 0.9;
    for k in 1..=20 {
        ema_update(&mut ema, &theta, d).unwrap();
        let gap = ema.sub(&theta).unwrap();
        let want = theta.scale(-d.powi(k));
        assert!(gap.max_abs_diff(&want).unwrap() < 1e-14);
    }
    assert!(ema_update(&mut ema, &Tensor::zeros(&[3]), 0.5).is_err());
}

#[test]
fn dataset_round_trips_through_lmdf() {
    let data: Dataset<f32> = Dataset::synthetic(5, 4, 4, 3, 1).unwrap();
    assert_eq!(data.labels, vec![0, 1, 2, 0, 1]);
    let back = Dataset::<f32>::from_lmdf(&Lmdf::from_bytes(&data.to_lmdf().to_bytes()).unwrap()).unwrap();
    assert_eq!(back, data);
    assert!(Dataset::new(Tensor::<f32>::zeros(&[2, 4, 4, 3]), vec![0, 1]).is_err());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let s = default_schedule();
    let data: Dataset<f64> = Dataset::synthetic(2, 8, 8, 3, 2).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let fixed = LossInputs::draw(&data.latents, &data.labels, &s, 0.0, 3, &mut Rng::new(11));
    let run = || {
        let mut tr = Trainer::new(build_model::<f64>(&small_config(), 5).unwrap(), s.clone(), cfg.clone(), 10);
        let before = hybrid_loss(&tr.model, &fixed, &s).unwrap().1;
        for _ in 0..15 {
            tr.step(&data).unwrap();
        }
        (before, hybrid_loss(&tr.model, &fixed, &s).unwrap().1, tr)
    };
    let (b1, a1, t1) = run();
    let (_, a2, t2) = run();
    assert_eq!(a1, a2);
    assert_eq!(t1.steps_done(), 15);
    for id in t1.model.params.ids() {
        assert_eq!(t1.model.params.get(id), t2.model.params.get(id));
        assert_eq!(t1.ema.get(id), t2.ema.get(id));
    }
    assert!(a1 < b1, "{a1} !< {b1}");
}

#[test]
fn non_finite_batch_reports_training_step() {
    let s = default_schedule();
    let mut tr = Trainer::new(build_model::<f64>(&small_config(), 5).unwrap(), s, TrainConfig::default(), 1);
    let mut latents = Tensor::<f64>::zeros(&[1, 8, 8, 4]);
    latents.data_mut()[3] = f64::NAN;
    let data = Dataset::new(latents, vec![0]).unwrap();
    match tr.step(&data) {
        Err(Error::Training { step: 0, .. }) => {}
        other => panic!("expected training error, got {other:?}"),
    }
}
