//! Reverse-mode differentiation over an eagerly recorded graph.
//!
//! Every graph method evaluates its primitive immediately and appends a node
//! holding the result and whatever the backward pass needs. Nodes are stored
//! in creation order, which is a topological order by construction.

pub mod check;
pub mod optim;
pub mod params;

use std::collections::HashMap;
use std::rc::Rc;

use crate::attention::{self, WindowLayout};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::ssm::{self, ScanSaved};
use crate::tensor::ops::{self, LAYER_NORM_EPS};
use crate::tensor::Tensor;

pub use check::{finite_diff_check, finite_diff_check_coords, finite_diff_check_projected};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Option<Var>,
    },
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    NegExp(Var),
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    DwConv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    Scan {
        inputs: [Var; 6],
        saved: Box<ScanSaved<T>>,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<WindowLayout>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
    VarianceKl {
        logit: Var,
        consts: Box<KlConsts<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-element constants of the learned-variance Gaussian KL.
pub struct KlConsts<T> {
    /// `log beta_t` (upper end of the interpolation).
    pub log_beta: Tensor<T>,
    /// Clipped `log beta_tilde_t` (lower end).
    pub log_beta_tilde: Tensor<T>,
    /// Log variance of the true posterior.
    pub logvar_q: Tensor<T>,
    /// Squared gap between the posterior mean and the (frozen) model mean.
    pub mean_gap_sq: Tensor<T>,
}

/// Eagerly evaluated computation graph.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    leaf_params: HashMap<Var, ParamId>,
    track: bool,
    corrupt_backward: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            leaf_params: HashMap::new(),
            track: true,
            corrupt_backward: false,
        }
    }

    /// A graph whose parameters do not require gradients; ops skip saving
    /// backward state.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    /// Test hook: deliberately breaks the weight gradient of `linear`.
    pub fn corrupt_backward(mut self, on: bool) -> Self {
        self.corrupt_backward = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter, inserting it once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), self.track);
        self.bound.insert(id, v);
        self.leaf_params.insert(v, id);
        v
    }

    fn unary(&mut self, x: Var, op: &'static str, f: impl Fn(T) -> T, make: impl FnOnce(Var) -> Op<T>) -> Result<Var> {
        let value = self.value(x).map(f).check_finite(op)?;
        let needs = self.needs(x);
        Ok(self.push(value, make(x), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?.check_finite("add")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?.check_finite("sub")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?.check_finite("mul")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        self.unary(x, "scale", |v| v * k, |x| Op::Scale(x, k))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum()).check_finite("sum")?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Sum(x), needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean()).check_finite("mean")?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Mean(x), needs))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Layer norm without affine parameters, `eps = 1e-6`.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || xv.last_dim() == 0 {
            return Err(shape_err("layer_norm", "needs a non-empty trailing axis"));
        }
        let (value, rstd) = ops::layer_norm_with_stats(xv, T::lit(LAYER_NORM_EPS));
        let value = value.check_finite("layer_norm")?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::LayerNorm { x, rstd }, needs))
    }

    /// `y = x * scale + shift`, broadcasting `scale`/`shift` of shape `[D]` or
    /// `[B, D]` over every position of `x: [B, .., D]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Option<Var>) -> Result<Var> {
        let (groups, rows_per_group, d) = modulate_dims(self.value(x), self.value(scale))?;
        if let Some(s) = shift {
            if self.shape(s) != self.shape(scale) {
                return Err(shape_err("modulate", "shift and scale shapes differ"));
            }
        }
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let hv = shift.map(|s| self.value(s).data());
        let mut out = Vec::with_capacity(xv.len());
        for g in 0..groups {
            let sc = &sv[g * d..(g + 1) * d];
            for r in 0..rows_per_group {
                let row = &xv[(g * rows_per_group + r) * d..][..d];
                match hv {
                    Some(hv) => {
                        let sh = &hv[g * d..(g + 1) * d];
                        out.extend((0..d).map(|j| row[j] * sc[j] + sh[j]));
                    }
                    None => out.extend((0..d).map(|j| row[j] * sc[j])),
                }
            }
        }
        let value = Tensor::from_vec(self.shape(x), out)?.check_finite("modulate")?;
        let needs = self.needs(x) || self.needs(scale) || shift.is_some_and(|s| self.needs(s));
        Ok(self.push(value, Op::Modulate { x, scale, shift }, needs))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "silu", ops::silu_scalar, Op::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", ops::gelu_scalar, Op::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "softplus", ops::softplus_scalar, Op::Softplus)
    }

    /// `-exp(x)`.
    pub fn neg_exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "neg_exp", |v| -v.exp(), Op::NegExp)
    }

    /// Element gather: `y.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if index.len() != shape.iter().product::<usize>() {
            return Err(shape_err("gather", "index length does not match output shape"));
        }
        let data = index
            .iter()
            .map(|&i| {
                xv.get(i)
                    .copied()
                    .ok_or_else(|| shape_err("gather", format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let value = Tensor::from_vec(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Gather { x, index }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != n {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        self.gather(x, (0..n).collect::<Vec<_>>().into(), shape)
    }

    /// `x[.., start..start + len]` along the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("slice_last", "scalar input"))?;
        if start + len > d {
            return Err(shape_err("slice_last", format!("{start}+{len} > {d}")));
        }
        let rows = self.value(x).numel() / d;
        let index: Vec<usize> = (0..rows).flat_map(|r| (start..start + len).map(move |j| r * d + j)).collect();
        let mut out = shape;
        *out.last_mut().unwrap() = len;
        self.gather(x, index.into(), &out)
    }

    /// Row lookup in a `[K, C]` table.
    pub fn embed_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("embed_rows", "table must be 2-D"));
        }
        let (k, c) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= k) {
            return Err(Error::Contract(format!("row index {bad} outside table of {k} rows")));
        }
        let index: Vec<usize> = rows.iter().flat_map(|&r| (0..c).map(move |j| r * c + j)).collect();
        self.gather(table, index.into(), &[rows.len(), c])
    }

    /// 3x3 depthwise convolution, zero padded, over `x: [B, H, W, E]` with
    /// `w: [3, 3, E]` and `b: [E]`.
    pub fn dwconv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("dwconv3x3", format!("input must be [B,H,W,E], got {xs:?}")));
        }
        let e = xs[3];
        if self.shape(w) != [3, 3, e] || self.shape(b) != [e] {
            return Err(shape_err("dwconv3x3", "weight/bias do not match channel count"));
        }
        let value = dwconv_forward(self.value(x), self.value(w), self.value(b)).check_finite("dwconv3x3")?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::DwConv3x3 { x, w, b }, needs))
    }

    /// Fused zero-order-hold discretization and selective scan.
    ///
    /// Shapes: `x, delta: [B, L, E]`, `a: [E, N]`, `bm, cm: [B, L, N]`,
    /// `d: [E]`; returns `[B, L, E]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, bm: Var, cm: Var, d: Var, full_zoh: bool) -> Result<Var> {
        let inputs = [x, delta, a, bm, cm, d];
        let needs = inputs.iter().any(|&v| self.needs(v));
        let (value, saved) = ssm::scan_forward(
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(bm),
            self.value(cm),
            self.value(d),
            full_zoh,
            needs,
        )?;
        let value = value.check_finite("selective_scan")?;
        Ok(self.push(
            value,
            Op::Scan {
                inputs,
                saved: Box::new(saved),
            },
            needs,
        ))
    }

    /// Multi-head attention inside the windows described by `layout`, over
    /// `q, k, v: [B, H, W, D]`.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<WindowLayout>) -> Result<Var> {
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let (value, probs) = attention::attention_forward(self.value(q), self.value(k), self.value(v), heads, &layout, needs)?;
        let value = value.check_finite("window_attention")?;
        Ok(self.push(
            value,
            Op::WindowAttention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            needs,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let diff = self.value(pred).sub(target)?;
        let value = Tensor::scalar(diff.data().iter().map(|&d| d * d).sum::<T>() / T::from_usize(diff.numel()).unwrap())
            .check_finite("mse")?;
        let needs = self.needs(pred);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// Elementwise KL(q || p) in nats where `p` has the interpolated log
    /// variance `v log beta + (1 - v) log beta_tilde`, `v = (logit + 1) / 2`.
    pub fn variance_kl(&mut self, logit: Var, consts: KlConsts<T>) -> Result<Var> {
        let lv = self.value(logit);
        for t in [
            &consts.log_beta,
            &consts.log_beta_tilde,
            &consts.logvar_q,
            &consts.mean_gap_sq,
        ] {
            lv.expect_same_shape(t, "variance_kl")?;
        }
        let half = T::lit(0.5);
        let data = (0..lv.numel())
            .map(|i| {
                let logvar_p = kl_logvar_p(lv.data()[i], &consts, i);
                let q = consts.logvar_q.data()[i];
                half * (-T::one() + logvar_p - q + (q - logvar_p).exp() + consts.mean_gap_sq.data()[i] * (-logvar_p).exp())
            })
            .collect();
        let value = Tensor::from_vec(lv.shape(), data)?.check_finite("variance_kl")?;
        let needs = self.needs(logit);
        Ok(self.push(
            value,
            Op::VarianceKl {
                logit,
                consts: Box::new(consts),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, dy.mul(self.value(*b))?)?;
                self.accumulate(grads, *b, dy.mul(self.value(*a))?)?;
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, dy.scale(*k))?,
            Op::Sum(x) => {
                let g = dy.item()?;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g))?;
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), dy.item()? / n))?;
            }
            Op::Linear { x, w, b } => {
                let (dx, mut dw, db) = ops::linear_backward(self.value(*x), self.value(*w), dy);
                if self.corrupt_backward {
                    dw = dw.scale(T::lit(1.5));
                }
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::LayerNorm { x, rstd } => {
                let dx = ops::layer_norm_backward(&node.value, rstd, dy);
                self.accumulate(grads, *x, dx)?;
            }
            Op::Modulate { x, scale, shift } => {
                let (groups, rows_per_group, d) = modulate_dims(self.value(*x), self.value(*scale))?;
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                let gy = dy.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut ds = vec![T::zero(); sv.len()];
                let mut dh = vec![T::zero(); sv.len()];
                for g in 0..groups {
                    for r in 0..rows_per_group {
                        let base = (g * rows_per_group + r) * d;
                        for j in 0..d {
                            let gv = gy[base + j];
                            dx[base + j] = gv * sv[g * d + j];
                            ds[g * d + j] += gv * xv[base + j];
                            dh[g * d + j] += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?)?;
                self.accumulate(grads, *scale, Tensor::from_vec(self.shape(*scale), ds)?)?;
                if let Some(s) = shift {
                    self.accumulate(grads, *s, Tensor::from_vec(self.shape(*s), dh)?)?;
                }
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(dy, "silu", |v, g| g * ops::silu_grad(v))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_map(dy, "gelu", |v, g| g * ops::gelu_grad(v))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Softplus(x) => {
                let dx = self.value(*x).zip_map(dy, "softplus", |v, g| g * ops::sigmoid(v))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::NegExp(x) => {
                // d(-e^x)/dx = -e^x = y
                let dx = node.value.mul(dy)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Gather { x, index } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&i, &g) in index.iter().zip(dy.data()) {
                    d[i] += g;
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::DwConv3x3 { x, w, b } => {
                let (dx, dw, db) = dwconv_backward(self.value(*x), self.value(*w), dy);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Scan { inputs, saved } => {
                let [x, delta, a, bm, cm, d] = *inputs;
                let g = ssm::scan_backward(
                    self.value(x),
                    self.value(delta),
                    self.value(a),
                    self.value(bm),
                    self.value(cm),
                    self.value(d),
                    saved,
                    dy,
                );
                for (v, gt) in inputs.iter().zip(g) {
                    self.accumulate(grads, *v, gt)?;
                }
            }
            Op::WindowAttention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (dq, dk, dv) =
                    attention::attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, layout, probs, dy);
                self.accumulate(grads, *q, dq)?;
                self.accumulate(grads, *k, dk)?;
                self.accumulate(grads, *v, dv)?;
            }
            Op::Mse { pred, target } => {
                let k = T::lit(2.0) * dy.item()? / T::from_usize(target.numel()).unwrap();
                let dx = self.value(*pred).zip_map(target, "mse", |p, t| k * (p - t))?;
                self.accumulate(grads, *pred, dx)?;
            }
            Op::VarianceKl { logit, consts } => {
                let lv = self.value(*logit);
                let half = T::lit(0.5);
                let data = (0..lv.numel())
                    .map(|i| {
                        let logvar_p = kl_logvar_p(lv.data()[i], consts, i);
                        let q = consts.logvar_q.data()[i];
                        let dkl = half * (T::one() - (q - logvar_p).exp() - consts.mean_gap_sq.data()[i] * (-logvar_p).exp());
                        let dlogvar = half * (consts.log_beta.data()[i] - consts.log_beta_tilde.data()[i]);
                        dy.data()[i] * dkl * dlogvar
                    })
                    .collect();
                self.accumulate(grads, *logit, Tensor::from_vec(lv.shape(), data)?)?;
            }
        }
        Ok(())
    }
}

fn kl_logvar_p<T: Scalar>(logit: T, c: &KlConsts<T>, i: usize) -> T {
    let v = (logit + T::one()) * T::lit(0.5);
    v * c.log_beta.data()[i] + (T::one() - v) * c.log_beta_tilde.data()[i]
}

fn modulate_dims<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let d = x.last_dim();
    let groups = match scale.shape() {
        [sd] | [1, sd] if *sd == d => 1,
        [b, sd] if *sd == d && *b > 0 && x.rank() >= 2 && x.shape()[0] == *b => *b,
        s => {
            return Err(shape_err(
                "modulate",
                format!("scale {s:?} does not broadcast over {:?}", x.shape()),
            ))
        }
    };
    Ok((groups, x.numel() / d / groups, d))
}

fn dwconv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [bn, h, wd, e] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let xv = x.data();
    let wv = w.data();
    let mut out = Vec::with_capacity(xv.len());
    for bi in 0..bn {
        for i in 0..h {
            for j in 0..wd {
                let start = out.len();
                out.extend_from_slice(b.data());
                for di in 0..3 {
                    let ii = i as isize + di as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j as isize + dj as isize - 1;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        let src = &xv[((bi * h + ii as usize) * wd + jj as usize) * e..][..e];
                        let k = &wv[(di * 3 + dj) * e..][..e];
                        for c in 0..e {
                            out[start + c] += k[c] * src[c];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

fn dwconv_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [bn, h, wd, e] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let xv = x.data();
    let wv = w.data();
    let gv = dy.data();
    let mut dx = vec![T::zero(); xv.len()];
    let mut dw = vec![T::zero(); wv.len()];
    let mut db = vec![T::zero(); e];
    for bi in 0..bn {
        for i in 0..h {
            for j in 0..wd {
                let g = &gv[((bi * h + i) * wd + j) * e..][..e];
                for c in 0..e {
                    db[c] += g[c];
                }
                for di in 0..3 {
                    let ii = i as isize + di as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j as isize + dj as isize - 1;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        let src = ((bi * h + ii as usize) * wd + jj as usize) * e;
                        let k = (di * 3 + dj) * e;
                        for c in 0..e {
                            dw[k + c] += g[c] * xv[src + c];
                            dx[src + c] += g[c] * wv[k + c];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).unwrap(),
        Tensor::from_vec(w.shape(), dw).unwrap(),
        Tensor::from_vec(&[e], db).unwrap(),
    )
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Gradients for every parameter of `store`, zero where unreachable.
    pub fn params(&self, graph: &Graph<T>, store: &ParamStore<T>) -> GradMap<T> {
        let mut grads: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        for (&var, &id) in &graph.leaf_params {
            if let Some(g) = &self.grads[var.0] {
                grads[id.0] = g.clone();
            }
        }
        GradMap { grads }
    }
}

/// Per-parameter gradients, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradMap<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}
