//! Drivers behind the command-line subcommands: FLOPs audit, toy training,
//! sampling, gradient checking and container inspection.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::autodiff::params::Init;
use crate::autodiff::{finite_diff_check_projected, GradMap, Graph, ParamId, ParamStore, Var};
use crate::block::{BlockParams, BlockSpec};
use crate::diffusion::{
    ddpm_sample, hybrid_loss, hybrid_loss_graph_frozen, make_schedule, Dataset, DiffusionSchedule, LossInputs, LossRecord,
    SampleOptions, TrainConfig, Trainer, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::flops::{flops_model, FlopsMode, FlopsReport};
use crate::scalar::Scalar;
use crate::tensor::{Lmdf, Rng, Tensor};
use crate::unet::{build_model, Model, ModelConfig};

/// Prefix under which averaged weights are stored in checkpoints.
pub const EMA_PREFIX: &str = "ema.";
/// Relative-error threshold of `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_DIRECTIONS: usize = 3;

pub fn default_schedule() -> DiffusionSchedule {
    make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
}

/// A preset name or a JSON file; the file wins when both are given.
pub fn resolve_config(preset: Option<&str>, config: Option<&Path>) -> Result<ModelConfig> {
    match (config, preset) {
        (Some(path), _) => ModelConfig::from_json(&std::fs::read_to_string(path)?),
        (None, Some(name)) => ModelConfig::preset(name),
        (None, None) => ModelConfig::preset("T"),
    }
}

pub fn cmd_flops(cfg: &ModelConfig, resolution: usize, mode: FlopsMode, out: Option<&Path>) -> Result<FlopsReport> {
    let report = flops_model(cfg, resolution, mode)?;
    if let Some(path) = out {
        std::fs::write(path, report.to_json())?;
    }
    Ok(report)
}

pub fn checkpoint_lmdf<T: Scalar>(params: &ParamStore<T>, ema: &ParamStore<T>) -> Lmdf {
    let mut file = Lmdf::new();
    params.write_into(&mut file, "");
    ema.write_into(&mut file, EMA_PREFIX);
    file
}

/// Builds the model of `cfg` and loads raw (or averaged) weights into it.
pub fn load_checkpoint<T: Scalar>(cfg: &ModelConfig, file: &Lmdf, use_ema: bool) -> Result<Model<T>> {
    let mut model = build_model(cfg, 0)?;
    model.params.read_from(file, if use_ema { EMA_PREFIX } else { "" })?;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub train: TrainConfig,
    /// Noise/timestep draws per latent in the fixed evaluation set.
    pub eval_draws: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            train: TrainConfig::default(),
            eval_draws: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<LossRecord>,
    /// Mean `L_simple` of the raw weights on the fixed evaluation set.
    pub initial_eval: f64,
    pub final_eval: f64,
}

/// A seeded evaluation set: every latent with `draws` (timestep, noise)
/// pairs and its true label.
pub fn eval_inputs<T: Scalar>(data: &Dataset<T>, sched: &DiffusionSchedule, draws: usize, seed: u64) -> Vec<LossInputs<T>> {
    let mut rng = Rng::new(seed);
    (0..draws)
        .map(|_| LossInputs::draw(&data.latents, &data.labels, sched, 0.0, 0, &mut rng))
        .collect()
}

pub fn eval_l_simple<T: Scalar>(model: &Model<T>, inputs: &[LossInputs<T>], sched: &DiffusionSchedule) -> Result<f64> {
    let mut acc = 0.0;
    for x in inputs {
        acc += hybrid_loss(model, x, sched)?.1;
    }
    Ok(acc / inputs.len().max(1) as f64)
}

/// Trains from a fresh initialization, writing the checkpoint (raw weights
/// plus `ema.` copies) and a loss CSV.
pub fn cmd_train<T: Scalar>(
    cfg: &ModelConfig,
    data: &Dataset<T>,
    opts: &TrainOptions,
    seed: u64,
    checkpoint: &Path,
    log: &Path,
) -> Result<TrainSummary> {
    let (h, w) = data.spatial();
    cfg.check_latent(h, w)?;
    if let Some(&bad) = data.labels.iter().find(|&&l| l > cfg.num_classes) {
        return Err(Error::Config(format!("label {bad} exceeds num_classes {}", cfg.num_classes)));
    }
    let sched = default_schedule();
    let model = build_model::<T>(cfg, seed)?;
    let evals = eval_inputs(data, &sched, opts.eval_draws, seed.wrapping_add(2));
    let initial_eval = eval_l_simple(&model, &evals, &sched)?;
    let mut trainer = Trainer::new(model, sched.clone(), opts.train.clone(), seed.wrapping_add(1));

    let mut csv = BufWriter::new(File::create(log)?);
    writeln!(csv, "{}", LossRecord::CSV_HEADER)?;
    let mut records = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let r = trainer.step(data)?;
        writeln!(csv, "{}", r.csv_row())?;
        records.push(r);
    }
    csv.flush()?;
    checkpoint_lmdf(&trainer.model.params, &trainer.ema).save(checkpoint)?;
    let final_eval = eval_l_simple(&trainer.model, &evals, &sched)?;
    Ok(TrainSummary {
        records,
        initial_eval,
        final_eval,
    })
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub labels: Vec<usize>,
    pub size: (usize, usize),
    pub use_ema: bool,
    pub options: SampleOptions,
}

/// Samples latents from a checkpoint and writes `samples`, `labels`,
/// `cfg_scale` and `seed` to `out`.
pub fn cmd_sample<T: Scalar>(
    cfg: &ModelConfig,
    checkpoint: &Path,
    args: &SampleArgs,
    seed: u64,
    out: &Path,
) -> Result<Tensor<T>> {
    if args.labels.is_empty() {
        return Err(Error::Config("at least one label is required".into()));
    }
    if let Some(&bad) = args.labels.iter().find(|&&l| l > cfg.num_classes) {
        return Err(Error::Config(format!("label {bad} exceeds num_classes {}", cfg.num_classes)));
    }
    cfg.check_latent(args.size.0, args.size.1)?;
    let file = Lmdf::load(checkpoint)?;
    let model: Model<T> = load_checkpoint(cfg, &file, args.use_ema)?;
    let samples = ddpm_sample(
        &model,
        &default_schedule(),
        &args.options,
        &args.labels,
        args.size,
        &mut Rng::new(seed),
    )?;
    let mut res = Lmdf::new();
    res.push("samples", &samples);
    let labels: Vec<f64> = args.labels.iter().map(|&l| l as f64).collect();
    res.push("labels", &Tensor::<f32>::from_f64(&[labels.len()], &labels)?);
    res.push("cfg_scale", &Tensor::<f64>::scalar(args.options.cfg_scale));
    res.push("seed", &Tensor::<f64>::scalar(seed as f64));
    res.save(out)?;
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn failures(&self) -> Vec<&GroupCheck> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err.is_nan() || g.max_rel_err >= self.tolerance)
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

fn jitter(store: &mut ParamStore<f64>, scale: f64, rng: &mut Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let n: Tensor<f64> = rng.normal(&shape);
        store.get_mut(id).add_assign(&n.scale(scale)).expect("same shape");
    }
}

/// Groups parameter ids by the first `depth(name)` dotted components of
/// their names (after stripping `strip`).
fn group_ids(store: &ParamStore<f64>, strip: &str, depth: impl Fn(&str) -> usize) -> BTreeMap<String, Vec<ParamId>> {
    let mut groups: BTreeMap<String, Vec<ParamId>> = BTreeMap::new();
    for (id, name, _) in store.iter() {
        let rel = name.strip_prefix(strip).unwrap_or(name);
        let key = rel.split('.').take(depth(rel)).collect::<Vec<_>>().join(".");
        groups.entry(key).or_default().push(id);
    }
    groups
}

fn flatten(ids: &[ParamId], pick: impl Fn(ParamId) -> Tensor<f64>) -> Tensor<f64> {
    let data: Vec<f64> = ids.iter().flat_map(|&id| pick(id).into_data()).collect();
    Tensor::from_vec(&[data.len()], data).expect("1-D")
}

/// Projected finite-difference check of one group, where `loss` evaluates
/// the objective for a full parameter store.
fn check_group(
    store: &ParamStore<f64>,
    grads: &GradMap<f64>,
    name: String,
    ids: &[ParamId],
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
    (h, directions): (f64, usize),
    rng: &mut Rng,
) -> GroupCheck {
    let theta = flatten(ids, |id| store.get(id).clone());
    let grad = flatten(ids, |id| grads.get(id).clone());
    let mut work = store.clone();
    let err = finite_diff_check_projected(
        |flat| {
            let mut off = 0;
            for &id in ids {
                let t = work.get_mut(id);
                let n = t.numel();
                t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
                off += n;
            }
            loss(&work)
        },
        &grad,
        &theta,
        h,
        directions,
        rng,
    );
    GroupCheck {
        group: name,
        numel: theta.numel(),
        max_rel_err: err,
    }
}

fn block_loss(
    g: &mut Graph<f64>,
    blk: &BlockParams,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    c: &Tensor<f64>,
    r: &Tensor<f64>,
) -> Result<Var> {
    let xv = g.constant(x.clone());
    let cv = g.constant(c.clone());
    let c_act = g.silu(cv)?;
    let y = blk.forward(g, store, xv, c_act)?;
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    g.sum(p)
}

/// Checks every parameter group of an unshifted and a shifted block at the
/// stem width of `cfg`, then every top-level group of the whole model's
/// hybrid loss. Weights are perturbed away from the initialization so that
/// zero-initialized gates do not make gradients vanish.
pub fn cmd_gradcheck(cfg: &ModelConfig, seed: u64, corrupt_backward: bool) -> Result<GradcheckReport> {
    gradcheck_with(cfg, seed, corrupt_backward, GRADCHECK_STEP, GRADCHECK_DIRECTIONS)
}

/// [`cmd_gradcheck`] with an explicit step `h` and number of directions.
pub fn gradcheck_with(
    cfg: &ModelConfig,
    seed: u64,
    corrupt_backward: bool,
    h: f64,
    directions: usize,
) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let mut groups = Vec::new();
    let (side, batch) = (2 * cfg.window.max(2), 2usize);
    let side = side.max(cfg.spatial_multiple()).next_multiple_of(cfg.spatial_multiple());

    for shifted in [false, true] {
        let spec = BlockSpec {
            width: cfg.stage_width(0),
            cond_dim: cfg.cond_dim,
            window: cfg.window,
            state_dim: cfg.state_dim,
            shifted: shifted && !cfg.flags.disable_shift,
            attention: !cfg.flags.disable_attention,
        };
        let mut store = ParamStore::new();
        let blk = BlockParams::init(&mut Init::new(&mut store, &mut rng), "blk", spec)?;
        jitter(&mut store, 0.05, &mut rng);
        let x: Tensor<f64> = rng.normal(&[1, side, side, spec.width]);
        let c: Tensor<f64> = rng.normal(&[1, spec.cond_dim]);
        let r: Tensor<f64> = rng.normal(x.shape());
        let mut g = Graph::new().corrupt_backward(corrupt_backward);
        let loss = block_loss(&mut g, &blk, &store, &x, &c, &r)?;
        let grads = g.backward(loss)?.params(&g, &store);
        let kind = if spec.shifted { "block(shifted)" } else { "block" };
        for (key, ids) in group_ids(&store, "blk.", |_| 2) {
            let f = |s: &ParamStore<f64>| {
                let mut g = Graph::inference();
                let l = block_loss(&mut g, &blk, s, &x, &c, &r).expect("shapes fixed");
                g.value(l).data()[0]
            };
            groups.push(check_group(
                &store,
                &grads,
                format!("{kind}.{key}"),
                &ids,
                f,
                (h, directions),
                &mut rng,
            ));
        }
    }

    let sched = default_schedule();
    let mut model: Model<f64> = build_model(cfg, seed)?;
    jitter(&mut model.params, 0.05, &mut rng);
    let z0: Tensor<f64> = rng.normal(&[batch, side, side, 4]);
    let inputs = LossInputs {
        z0,
        labels: vec![cfg.num_classes.min(1), cfg.num_classes],
        t: vec![37, 611],
        eps: rng.normal(&[batch, side, side, 4]),
    };
    let mut g = Graph::new().corrupt_backward(corrupt_backward);
    let vars = hybrid_loss_graph_frozen(&model, &mut g, &inputs, &sched, 1.0, None)?;
    let frozen = g.value(vars.eps_hat).clone();
    let grads = g.backward(vars.total)?.params(&g, &model.params);
    let grouped = group_ids(&model.params, "", |rel| {
        if rel.starts_with("encoder") || rel.starts_with("decoder") {
            2
        } else {
            1
        }
    });
    for (key, ids) in grouped {
        let f = |s: &ParamStore<f64>| {
            let view = Model {
                config: model.config.clone(),
                params: s.clone(),
                layout: model.layout.clone(),
            };
            let mut g = Graph::inference();
            let v = hybrid_loss_graph_frozen(&view, &mut g, &inputs, &sched, 1.0, Some(&frozen)).expect("shapes fixed");
            g.value(v.total).data()[0]
        };
        groups.push(check_group(
            &model.params,
            &grads,
            format!("model.{key}"),
            &ids,
            f,
            (h, directions),
            &mut rng,
        ));
    }
    Ok(GradcheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        groups,
    })
}

/// One line per entry: name, dtype, shape and element count.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let file = Lmdf::load(path)?;
    let mut out = String::new();
    for e in file.manifest() {
        out.push_str(&format!(
            "{}\t{:?}\t{:?}\t{}\n",
            e.name,
            e.dtype,
            e.shape,
            e.shape.iter().product::<usize>()
        ));
    }
    Ok(out)
}
