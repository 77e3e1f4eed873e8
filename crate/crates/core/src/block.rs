//! The conditioned residual block: VSSM, windowed attention and an FFN, each
//! wrapped in adaptive layer norm and a zero-initialized gate.

use crate::attention::AttnParams;
use crate::autodiff::params::Init;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::ssm::VssmParams;
use crate::tensor::Tensor;

/// FFN hidden width multiplier.
pub const FFN_RATIO: usize = 4;

/// A SiLU + linear head regressing `(gamma, beta, alpha)` from the condition.
#[derive(Clone, Debug)]
pub struct AdaLnParams {
    pub width: usize,
    /// `[C, 3D]`
    pub weight: ParamId,
    /// `[3D]`
    pub bias: ParamId,
}

impl AdaLnParams {
    /// Gate columns start at zero, `gamma` is biased to one and `beta` to zero.
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, cond: usize, width: usize) -> Result<Self> {
        let weight = init.linear(format!("{prefix}.weight"), cond, 3 * width)?;
        init.edit(weight, |w| {
            for row in w.data_mut().chunks_exact_mut(3 * width) {
                row[2 * width..].fill(T::zero());
            }
        });
        let mut bias = vec![0.0; 3 * width];
        bias[..width].fill(1.0);
        let bias = init.tensor(format!("{prefix}.bias"), Tensor::from_f64(&[3 * width], &bias)?)?;
        Ok(Self { width, weight, bias })
    }

    /// Returns `(gamma * LN(h) + beta, alpha)` where `c_act` is the already
    /// SiLU-activated condition `[B, C]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var, c_act: Var) -> Result<(Var, Var)> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let m = g.linear(c_act, w, Some(b))?;
        let d = self.width;
        let gamma = g.slice_last(m, 0, d)?;
        let beta = g.slice_last(m, d, d)?;
        let alpha = g.slice_last(m, 2 * d, d)?;
        let n = g.layer_norm(h)?;
        let y = g.modulate(n, gamma, Some(beta))?;
        Ok((y, alpha))
    }
}

/// Applies one AdaLN head to `h: [.., D]` with a single condition `c: [C]`.
pub fn adaln_modulate<T: Scalar>(
    h: &Tensor<T>,
    c: &Tensor<T>,
    map: &AdaLnParams,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if c.rank() != 1 {
        return Err(shape_err(
            "adaln_modulate",
            format!("condition must be a vector, got {:?}", c.shape()),
        ));
    }
    let mut g = Graph::inference();
    let hv = g.constant(h.clone());
    let cv = g.constant(c.clone().reshape(&[1, c.numel()])?);
    let c_act = g.silu(cv)?;
    let (y, alpha) = map.forward(&mut g, store, hv, c_act)?;
    let alpha = g.value(alpha).clone().reshape(&[map.width])?;
    Ok((g.value(y).clone(), alpha))
}

/// Pointwise `D -> 4D -> D` perceptron with GELU.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl FfnParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, width: usize) -> Result<Self> {
        let hidden = FFN_RATIO * width;
        Ok(Self {
            fc1: (
                init.linear(format!("{prefix}.fc1.weight"), width, hidden)?,
                init.zeros(format!("{prefix}.fc1.bias"), &[hidden])?,
            ),
            fc2: (
                init.linear(format!("{prefix}.fc2.weight"), hidden, width)?,
                init.zeros(format!("{prefix}.fc2.bias"), &[width])?,
            ),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.fc1.0), g.param(store, self.fc1.1));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.gelu(h)?;
        let (w2, b2) = (g.param(store, self.fc2.0), g.param(store, self.fc2.1));
        g.linear(h, w2, Some(b2))
    }
}

/// Static description of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub width: usize,
    pub cond_dim: usize,
    pub window: usize,
    pub state_dim: usize,
    /// Whether this block's attention uses shifted windows.
    pub shifted: bool,
    pub attention: bool,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub spec: BlockSpec,
    pub vssm: VssmParams,
    pub attn: Option<AttnParams>,
    pub ffn: FfnParams,
    pub adaln_vssm: AdaLnParams,
    pub adaln_attn: Option<AdaLnParams>,
    pub adaln_ffn: AdaLnParams,
}

impl BlockParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, spec: BlockSpec) -> Result<Self> {
        let BlockSpec {
            width: d, cond_dim: c, ..
        } = spec;
        let vssm = VssmParams::init(init, &format!("{prefix}.vssm"), d, spec.state_dim)?;
        let attn = if spec.attention {
            Some(AttnParams::init(init, &format!("{prefix}.attn"), d, spec.window)?)
        } else {
            None
        };
        let ffn = FfnParams::init(init, &format!("{prefix}.ffn"), d)?;
        let adaln_vssm = AdaLnParams::init(init, &format!("{prefix}.adaln.vssm"), c, d)?;
        let adaln_attn = if spec.attention {
            Some(AdaLnParams::init(init, &format!("{prefix}.adaln.attn"), c, d)?)
        } else {
            None
        };
        let adaln_ffn = AdaLnParams::init(init, &format!("{prefix}.adaln.ffn"), c, d)?;
        Ok(Self {
            spec,
            vssm,
            attn,
            ffn,
            adaln_vssm,
            adaln_attn,
            adaln_ffn,
        })
    }

    pub fn shift(&self) -> (usize, usize) {
        if self.spec.shifted {
            let s = self.spec.window / 2;
            (s, s)
        } else {
            (0, 0)
        }
    }

    /// Records the block over `x: [B, H, W, D]` given `c_act = SiLU(c)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, c_act: Var) -> Result<Var> {
        let (h, alpha) = self.adaln_vssm.forward(g, store, x, c_act)?;
        let h = self.vssm.forward(g, store, h)?;
        let x = gated_residual(g, x, h, alpha)?;
        let x = match (&self.attn, &self.adaln_attn) {
            (Some(attn), Some(ada)) => {
                let (h, alpha) = ada.forward(g, store, x, c_act)?;
                let h = attn.forward(g, store, h, self.shift())?;
                gated_residual(g, x, h, alpha)?
            }
            _ => x,
        };
        let (h, alpha) = self.adaln_ffn.forward(g, store, x, c_act)?;
        let h = self.ffn.forward(g, store, h)?;
        gated_residual(g, x, h, alpha)
    }
}

fn gated_residual<T: Scalar>(g: &mut Graph<T>, x: Var, h: Var, alpha: Var) -> Result<Var> {
    let gated = g.modulate(h, alpha, None)?;
    g.add(x, gated)
}

/// Evaluates one block on `x: [H, W, D]` with condition `c: [C]`.
pub fn lamamba_block<T: Scalar>(x: &Tensor<T>, c: &Tensor<T>, p: &BlockParams, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || c.rank() != 1 {
        return Err(shape_err("lamamba_block", format!("x {s:?}, c {:?}", c.shape())));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let cv = g.constant(c.clone().reshape(&[1, c.numel()])?);
    let c_act = g.silu(cv)?;
    let y = p.forward(&mut g, store, xv, c_act)?;
    g.value(y).clone().reshape(s)
}
