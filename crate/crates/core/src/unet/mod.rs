//! The hierarchical denoising backbone.
//!
//! Latents `[B, h, w, 4]` are embedded per token, run through three encoder
//! resolutions (with a fourth stage at the coarsest one for the large
//! variants), a bottleneck, and a mirrored decoder with additive skips. The
//! head maps back to eight channels: the noise estimate and the variance
//! logit.

mod config;

pub use config::{ModelConfig, ModelFlags, LATENT_CHANNELS, OUTPUT_CHANNELS, STAGES};

use crate::autodiff::params::Init;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::block::{BlockParams, BlockSpec};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

/// Width of the sinusoidal timestep features.
pub const TIME_FREQ_DIM: usize = 256;
const TIME_MAX_PERIOD: f64 = 10_000.0;

/// Order in which the four 2x2 neighbours are concatenated by a merge,
/// as `(row, column)` offsets.
const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// `[B, dim]` features: `sin(t f_k)` for the first half, `cos(t f_k)` for the
/// second, with `f_k = 10000^(-k / (dim/2))`.
pub fn timestep_embedding<T: Scalar>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![0.0; t.len() * dim];
    for (row, &tb) in out.chunks_exact_mut(dim).zip(t) {
        for k in 0..half {
            let arg = tb * (-(TIME_MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
            row[k] = arg.sin();
            row[half + k] = arg.cos();
        }
    }
    Tensor::from_f64(&[t.len(), dim], &out).expect("sized above")
}

/// Gather indices folding `[B, H, W, C]` into `[B, H/p, W/p, k*C]`, where
/// each output token concatenates the inputs at `offsets` inside its patch.
fn fold_index(b: usize, h: usize, w: usize, c: usize, p: usize, offsets: &[(usize, usize)]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..h / p {
            for j in 0..w / p {
                for &(dy, dx) in offsets {
                    let base = ((bi * h + i * p + dy) * w + j * p + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

/// Gather indices unfolding `[B, H, W, p*p*C]` (channel order `p1 p2 c`)
/// into `[B, H*p, W*p, C]`.
fn unfold_index(b: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let (ho, wo) = (h * p, w * p);
    let mut idx = Vec::with_capacity(b * ho * wo * c);
    for bi in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                let base = ((bi * h + y / p) * w + x / p) * (p * p * c) + ((y % p) * p + x % p) * c;
                idx.extend(base..base + c);
            }
        }
    }
    idx
}

fn raster_offsets(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|dy| (0..p).map(move |dx| (dy, dx))).collect()
}

fn dims4<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, h, w, c] => Ok([b, h, w, c]),
        ref s => Err(shape_err(op, format!("expected [B,H,W,C], got {s:?}"))),
    }
}

fn affine_layer_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let (w, b) = (g.param(store, w), g.param(store, b));
    g.modulate(n, w, Some(b))
}

/// 2x2 neighbourhood concat, LayerNorm(4D), then a bias-free `4D -> 2D`.
#[derive(Clone, Debug)]
pub struct MergeParams {
    pub width: usize,
    pub norm: (ParamId, ParamId),
    pub reduction: ParamId,
}

impl MergeParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            width,
            norm: (
                init.full(format!("{prefix}.norm.weight"), &[4 * width], 1.0)?,
                init.zeros(format!("{prefix}.norm.bias"), &[4 * width])?,
            ),
            reduction: init.linear(format!("{prefix}.reduction.weight"), 4 * width, 2 * width)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let [b, h, w, c] = dims4(g, x, "patch_merge")?;
        if h % 2 != 0 || w % 2 != 0 || c != self.width {
            return Err(shape_err(
                "patch_merge",
                format!("need even H, W and width {}, got [{b},{h},{w},{c}]", self.width),
            ));
        }
        let folded = g.gather(x, fold_index(b, h, w, c, 2, &MERGE_ORDER).into(), &[b, h / 2, w / 2, 4 * c])?;
        let n = affine_layer_norm(g, store, folded, self.norm)?;
        let r = g.param(store, self.reduction);
        g.linear(n, r, None)
    }
}

/// Bias-free `D -> 2D`, rearranged to a 2x2 upsampled grid of width `D/2`,
/// then LayerNorm(D/2).
#[derive(Clone, Debug)]
pub struct ExpandParams {
    pub width: usize,
    pub proj: ParamId,
    pub norm: (ParamId, ParamId),
}

impl ExpandParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, width: usize) -> Result<Self> {
        if !width.is_multiple_of(2) {
            return Err(Error::Config(format!("patch expand needs an even width, got {width}")));
        }
        Ok(Self {
            width,
            proj: init.linear(format!("{prefix}.proj.weight"), width, 2 * width)?,
            norm: (
                init.full(format!("{prefix}.norm.weight"), &[width / 2], 1.0)?,
                init.zeros(format!("{prefix}.norm.bias"), &[width / 2])?,
            ),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let [b, h, w, c] = dims4(g, x, "patch_expand")?;
        if c != self.width {
            return Err(shape_err("patch_expand", format!("expected width {}, got {c}", self.width)));
        }
        let pw = g.param(store, self.proj);
        let y = g.linear(x, pw, None)?;
        let half = c / 2;
        let up = g.gather(y, unfold_index(b, h, w, half, 2).into(), &[b, 2 * h, 2 * w, half])?;
        affine_layer_norm(g, store, up, self.norm)
    }
}

/// Applies a merge to a single `[H, W, D]` map.
pub fn patch_merge<T: Scalar>(x: &Tensor<T>, params: &MergeParams, store: &ParamStore<T>) -> Result<Tensor<T>> {
    single_map(x, |g, v| params.forward(g, store, v))
}

/// Applies an expand to a single `[H, W, D]` map.
pub fn patch_expand<T: Scalar>(x: &Tensor<T>, params: &ExpandParams, store: &ParamStore<T>) -> Result<Tensor<T>> {
    single_map(x, |g, v| params.forward(g, store, v))
}

fn single_map<T: Scalar>(x: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err("patch resample", format!("expected [H,W,D], got {s:?}")));
    }
    let mut g = Graph::inference();
    let v = g.constant(x.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let y = f(&mut g, v)?;
    let ys = g.shape(y)[1..].to_vec();
    g.value(y).clone().reshape(&ys)
}

/// Parameter handles for the whole backbone.
#[derive(Clone, Debug)]
pub struct UNetLayout {
    pub embed: (ParamId, ParamId),
    pub t_fc1: (ParamId, ParamId),
    pub t_fc2: (ParamId, ParamId),
    pub label_table: ParamId,
    pub encoder: Vec<Vec<BlockParams>>,
    pub merges: Vec<Option<MergeParams>>,
    pub bottleneck: Vec<BlockParams>,
    pub decoder: Vec<Vec<BlockParams>>,
    pub expands: Vec<Option<ExpandParams>>,
    pub head_adaln: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
}

impl UNetLayout {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.cond_dim;
        let p = cfg.flags.patch_size;
        let d1 = cfg.stage_width(0);
        let spec = |width: usize, j: usize| BlockSpec {
            width,
            cond_dim: c,
            window: cfg.window,
            state_dim: cfg.state_dim,
            shifted: j % 2 == 1 && !cfg.flags.disable_shift,
            attention: !cfg.flags.disable_attention,
        };
        let stage = |init: &mut Init<'_, T>, prefix: String, depth: usize, width: usize| -> Result<Vec<BlockParams>> {
            (0..depth)
                .map(|j| BlockParams::init(init, &format!("{prefix}.block{j}"), spec(width, j)))
                .collect()
        };

        let embed = (
            init.linear("embed.weight", LATENT_CHANNELS * p * p, d1)?,
            init.zeros("embed.bias", &[d1])?,
        );
        let t_fc1 = (
            init.normal("t_embed.fc1.weight", &[TIME_FREQ_DIM, c], 0.02)?,
            init.zeros("t_embed.fc1.bias", &[c])?,
        );
        let t_fc2 = (
            init.normal("t_embed.fc2.weight", &[c, c], 0.02)?,
            init.zeros("t_embed.fc2.bias", &[c])?,
        );
        let label_table = init.normal("label_embed.table", &[cfg.num_classes + 1, c], 0.02)?;
        init.edit(label_table, |t| {
            let n = t.numel();
            t.data_mut()[n - c..].fill(T::zero());
        });

        let mut encoder = Vec::with_capacity(STAGES);
        let mut merges = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let width = cfg.stage_width(s);
            encoder.push(stage(init, format!("encoder.stage{}", s + 1), cfg.encoder_depths[s], width)?);
            merges.push(if cfg.has_resample(s) {
                Some(MergeParams::init(init, &format!("encoder.merge{}", s + 1), width)?)
            } else {
                None
            });
        }
        let bottleneck = stage(init, "bottleneck".into(), cfg.bottleneck_depth, cfg.stage_width(STAGES - 1))?;
        let mut decoder = vec![Vec::new(); STAGES];
        let mut expands = vec![None; STAGES];
        for s in (0..STAGES).rev() {
            if cfg.has_resample(s) {
                expands[s] = Some(ExpandParams::init(
                    init,
                    &format!("decoder.expand{}", s + 1),
                    cfg.stage_width(s + 1),
                )?);
            }
            decoder[s] = stage(
                init,
                format!("decoder.stage{}", s + 1),
                cfg.decoder_depths[s],
                cfg.stage_width(s),
            )?;
        }

        let head_adaln = (init.zeros("head.adaln.weight", &[c, 2 * d1])?, {
            let mut bias = vec![0.0; 2 * d1];
            bias[..d1].fill(1.0);
            init.tensor("head.adaln.bias", Tensor::from_f64(&[2 * d1], &bias)?)?
        });
        let out = OUTPUT_CHANNELS * p * p;
        let head = (
            init.zeros("head.linear.weight", &[d1, out])?,
            init.zeros("head.linear.bias", &[out])?,
        );
        Ok(Self {
            embed,
            t_fc1,
            t_fc2,
            label_table,
            encoder,
            merges,
            bottleneck,
            decoder,
            expands,
            head_adaln,
            head,
        })
    }
}

/// Names and shapes of every parameter of `cfg`, in creation order, without
/// allocating the weights.
pub fn param_manifest(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let mut list = Vec::new();
    let mut rng = Rng::new(0);
    UNetLayout::init::<f32>(&mut Init::shapes_only(&mut list, &mut rng), cfg)?;
    Ok(list)
}

pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_manifest(cfg)?.iter().map(|(_, s)| s.iter().product::<usize>()).sum())
}

/// A backbone instance: configuration, weights and the handles into them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: UNetLayout,
}

/// Builds a freshly initialized model.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::new(cfg.clone(), seed)
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        let layout = UNetLayout::init(&mut Init::new(&mut params, &mut rng), &config)?;
        Ok(Self { config, params, layout })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// The null label used for unconditional predictions.
    pub fn null_label(&self) -> usize {
        self.config.num_classes
    }

    fn lin(&self, g: &mut Graph<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(&self.params, w), g.param(&self.params, b));
        g.linear(x, w, Some(b))
    }

    /// SiLU-activated condition `[B, C]` from timesteps and labels.
    pub fn condition(&self, g: &mut Graph<T>, t: &[f64], labels: &[usize]) -> Result<Var> {
        if t.len() != labels.len() {
            return Err(shape_err(
                "condition",
                format!("{} timesteps for {} labels", t.len(), labels.len()),
            ));
        }
        let freqs = g.constant(timestep_embedding(t, TIME_FREQ_DIM));
        let h = self.lin(g, freqs, self.layout.t_fc1)?;
        let h = g.silu(h)?;
        let t_emb = self.lin(g, h, self.layout.t_fc2)?;
        let table = g.param(&self.params, self.layout.label_table);
        let l_emb = g.embed_rows(table, labels)?;
        let c = g.add(t_emb, l_emb)?;
        g.silu(c)
    }

    /// Records the forward pass of `z: [B, h, w, 4]`, returning `[B, h, w, 8]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, z: Var, t: &[f64], labels: &[usize]) -> Result<Var> {
        let [b, h, w, ch] = dims4(g, z, "model_forward")?;
        if ch != LATENT_CHANNELS {
            return Err(shape_err(
                "model_forward",
                format!("expected {LATENT_CHANNELS} latent channels, got {ch}"),
            ));
        }
        if t.len() != b {
            return Err(shape_err("model_forward", format!("{} timesteps for batch {b}", t.len())));
        }
        self.config.check_latent(h, w)?;
        let store = &self.params;
        let lay = &self.layout;
        let p = self.config.flags.patch_size;
        let c_act = self.condition(g, t, labels)?;

        let tokens = if p > 1 {
            let idx = fold_index(b, h, w, ch, p, &raster_offsets(p));
            g.gather(z, idx.into(), &[b, h / p, w / p, p * p * ch])?
        } else {
            z
        };
        let mut x = self.lin(g, tokens, lay.embed)?;
        let mut skips = [None; STAGES];
        for (s, skip) in skips.iter_mut().enumerate() {
            for blk in &lay.encoder[s] {
                x = blk.forward(g, store, x, c_act)?;
            }
            if self.config.has_skip(s) {
                *skip = Some(x);
            }
            if let Some(m) = &lay.merges[s] {
                x = m.forward(g, store, x)?;
            }
        }
        for blk in &lay.bottleneck {
            x = blk.forward(g, store, x, c_act)?;
        }
        for s in (0..STAGES).rev() {
            if let Some(e) = &lay.expands[s] {
                x = e.forward(g, store, x)?;
            }
            if let Some(skip) = skips[s] {
                x = g.add(x, skip)?;
            }
            for blk in &lay.decoder[s] {
                x = blk.forward(g, store, x, c_act)?;
            }
        }

        let d1 = self.config.stage_width(0);
        let m = self.lin(g, c_act, lay.head_adaln)?;
        let gamma = g.slice_last(m, 0, d1)?;
        let beta = g.slice_last(m, d1, d1)?;
        let n = g.layer_norm(x)?;
        let y = g.modulate(n, gamma, Some(beta))?;
        let out = self.lin(g, y, lay.head)?;
        if p > 1 {
            let idx = unfold_index(b, h / p, w / p, OUTPUT_CHANNELS, p);
            g.gather(out, idx.into(), &[b, h, w, OUTPUT_CHANNELS])
        } else {
            Ok(out)
        }
    }

    /// Evaluates the model without recording gradients.
    pub fn forward(&self, z: &Tensor<T>, t: &[f64], labels: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let out = self.forward_graph(&mut g, zv, t, labels)?;
        Ok(g.value(out).clone())
    }
}

/// Splits `[.., 8]` model output into `(eps, variance_logit)`, each `[.., 4]`.
pub fn split_output<T: Scalar>(out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if out.last_dim() != OUTPUT_CHANNELS {
        return Err(shape_err(
            "split_output",
            format!("expected {OUTPUT_CHANNELS} channels, got {:?}", out.shape()),
        ));
    }
    let mut eps = Vec::with_capacity(out.numel() / 2);
    let mut logit = Vec::with_capacity(out.numel() / 2);
    for row in out.data().chunks_exact(OUTPUT_CHANNELS) {
        eps.extend_from_slice(&row[..LATENT_CHANNELS]);
        logit.extend_from_slice(&row[LATENT_CHANNELS..]);
    }
    let mut shape = out.shape().to_vec();
    *shape.last_mut().unwrap() = LATENT_CHANNELS;
    Ok((Tensor::from_vec(&shape, eps)?, Tensor::from_vec(&shape, logit)?))
}

#[cfg(test)]
mod tests;
