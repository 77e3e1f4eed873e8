//! Window-local multi-head self-attention with cyclic shifting.

use std::rc::Rc;

use crate::autodiff::params::Init;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{softmax_in_place, softmax_row_backward};
use crate::tensor::Tensor;

/// Channels per attention head.
pub const HEAD_DIM: usize = 32;

pub fn num_heads(width: usize) -> usize {
    (width / HEAD_DIM).max(1)
}

/// How an `H x W` grid is rolled, padded and cut into `M x M` windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: (usize, usize),
    /// Windows per column and per row of the padded grid.
    pub grid: (usize, usize),
    /// `slots[w * M*M + p]` is the source cell of slot `p` in window `w`,
    /// or `None` for padding.
    pub slots: Vec<Option<usize>>,
    /// Region label of every slot; tokens attend only within a label.
    pub regions: Vec<u8>,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, shift: (usize, usize)) -> Self {
        assert!(window >= 1, "window size must be positive");
        let gh = height.div_ceil(window);
        let gw = width.div_ceil(window);
        let sy = if height == 0 { 0 } else { shift.0 % height };
        let sx = if width == 0 { 0 } else { shift.1 % width };
        let area = window * window;
        let mut slots = Vec::with_capacity(gh * gw * area);
        let mut regions = Vec::with_capacity(gh * gw * area);
        for wi in 0..gh {
            for wj in 0..gw {
                for a in 0..window {
                    for b in 0..window {
                        let (i, j) = (wi * window + a, wj * window + b);
                        if i < height && j < width {
                            let src = ((i + sy) % height) * width + (j + sx) % width;
                            let ry = u8::from(sy > 0 && i >= height - sy);
                            let rx = u8::from(sx > 0 && j >= width - sx);
                            slots.push(Some(src));
                            regions.push(ry * 2 + rx);
                        } else {
                            slots.push(None);
                            regions.push(u8::MAX);
                        }
                    }
                }
            }
        }
        Self {
            height,
            width,
            window,
            shift: (sy, sx),
            grid: (gh, gw),
            slots,
            regions,
        }
    }

    pub fn num_windows(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn window_area(&self) -> usize {
        self.window * self.window
    }

    /// `(source cell, region)` of every non-padding slot of window `w`.
    fn members(&self, w: usize) -> impl Iterator<Item = (usize, u8)> + '_ {
        let area = self.window_area();
        (w * area..(w + 1) * area).filter_map(move |k| self.slots[k].map(|src| (src, self.regions[k])))
    }

    /// Whether slots `p` and `q` of the same window may attend to each other.
    pub fn allowed(&self, w: usize, p: usize, q: usize) -> bool {
        let base = w * self.window_area();
        self.slots[base + p].is_some() && self.slots[base + q].is_some() && self.regions[base + p] == self.regions[base + q]
    }
}

/// Rolls `x: [H, W, D]` by `-shift`, zero pads to multiples of `window` and
/// returns `[nW, M*M, D]` windows with the layout that inverts them.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, window: usize, shift: (usize, usize)) -> Result<(Tensor<T>, WindowLayout)> {
    let [h, w, d] = match x.shape() {
        [h, w, d] => [*h, *w, *d],
        s => return Err(shape_err("window_partition", format!("expected [H,W,D], got {s:?}"))),
    };
    let layout = WindowLayout::new(h, w, window, shift);
    let mut out = Vec::with_capacity(layout.slots.len() * d);
    for slot in &layout.slots {
        match slot {
            Some(src) => out.extend_from_slice(&x.data()[src * d..(src + 1) * d]),
            None => out.extend(std::iter::repeat_n(T::zero(), d)),
        }
    }
    let windows = Tensor::from_vec(&[layout.num_windows(), layout.window_area(), d], out)?;
    Ok((windows, layout))
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, layout: &WindowLayout) -> Result<Tensor<T>> {
    let d = windows.last_dim();
    if windows.shape() != [layout.num_windows(), layout.window_area(), d] {
        return Err(shape_err("window_reverse", "windows do not match the layout"));
    }
    let mut out = vec![T::zero(); layout.height * layout.width * d];
    for (k, slot) in layout.slots.iter().enumerate() {
        if let Some(src) = slot {
            out[src * d..(src + 1) * d].copy_from_slice(&windows.data()[k * d..(k + 1) * d]);
        }
    }
    Tensor::from_vec(&[layout.height, layout.width, d], out)
}

struct AttnDims {
    batch: usize,
    cells: usize,
    width: usize,
    head_dim: usize,
}

fn attn_dims<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, layout: &WindowLayout) -> Result<AttnDims> {
    let [b, h, w, d] = match q.shape() {
        [b, h, w, d] => [*b, *h, *w, *d],
        s => return Err(shape_err("window_attention", format!("expected [B,H,W,D], got {s:?}"))),
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(shape_err("window_attention", "q, k, v shapes differ"));
    }
    if (h, w) != (layout.height, layout.width) {
        return Err(shape_err("window_attention", "layout built for another grid"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(shape_err(
            "window_attention",
            format!("{d} channels do not split into {heads} heads"),
        ));
    }
    Ok(AttnDims {
        batch: b,
        cells: h * w,
        width: d,
        head_dim: d / heads,
    })
}

/// Forward kernel; `probs` holds every window's attention matrix when
/// `save` is set, in `(batch, window, head)` order.
pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    layout: &WindowLayout,
    save: bool,
) -> Result<(Tensor<T>, Vec<T>)> {
    let AttnDims {
        batch,
        cells,
        width: d,
        head_dim: dh,
    } = attn_dims(q, k, v, heads, layout)?;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (qv, kv, vv) = (q.data(), k.data(), v.data());
    let mut out = vec![T::zero(); q.numel()];
    let mut probs = Vec::new();
    let mut row = Vec::new();
    for b in 0..batch {
        for w in 0..layout.num_windows() {
            let members: Vec<(usize, u8)> = layout.members(w).collect();
            for hd in 0..heads {
                let off = hd * dh;
                for &(qi, qr) in &members {
                    let qrow = &qv[(b * cells + qi) * d + off..][..dh];
                    row.clear();
                    row.extend(members.iter().map(|&(kj, kr)| {
                        if kr == qr {
                            let krow = &kv[(b * cells + kj) * d + off..][..dh];
                            qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * scale
                        } else {
                            T::neg_infinity()
                        }
                    }));
                    softmax_in_place(&mut row);
                    let orow = &mut out[(b * cells + qi) * d + off..][..dh];
                    for (&(kj, _), &p) in members.iter().zip(&row) {
                        if p != T::zero() {
                            let vrow = &vv[(b * cells + kj) * d + off..][..dh];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o += p * x;
                            }
                        }
                    }
                    if save {
                        probs.extend_from_slice(&row);
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(q.shape(), out)?, probs))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    layout: &WindowLayout,
    probs: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let AttnDims {
        batch,
        cells,
        width: d,
        head_dim: dh,
    } = attn_dims(q, k, v, heads, layout).expect("validated in forward");
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (qv, kv, vv, gv) = (q.data(), k.data(), v.data(), dy.data());
    let mut dq = vec![T::zero(); q.numel()];
    let mut dk = vec![T::zero(); k.numel()];
    let mut dv = vec![T::zero(); v.numel()];
    let mut cursor = 0;
    let mut dp = Vec::new();
    let mut ds = Vec::new();
    for b in 0..batch {
        for w in 0..layout.num_windows() {
            let members: Vec<usize> = layout.members(w).map(|(c, _)| c).collect();
            let n = members.len();
            for hd in 0..heads {
                let off = hd * dh;
                for &qi in &members {
                    let p = &probs[cursor..cursor + n];
                    cursor += n;
                    let qrow_i = (b * cells + qi) * d + off;
                    let grow = &gv[qrow_i..][..dh];
                    dp.clear();
                    for (&kj, &pij) in members.iter().zip(p) {
                        let vrow = (b * cells + kj) * d + off;
                        dp.push(grow.iter().zip(&vv[vrow..vrow + dh]).map(|(&a, &c)| a * c).sum::<T>());
                        if pij != T::zero() {
                            for c in 0..dh {
                                dv[vrow + c] += pij * grow[c];
                            }
                        }
                    }
                    ds.clear();
                    ds.resize(n, T::zero());
                    softmax_row_backward(p, &dp, &mut ds);
                    for (&kj, &s) in members.iter().zip(&ds) {
                        if s == T::zero() {
                            continue;
                        }
                        let krow = (b * cells + kj) * d + off;
                        let s = s * scale;
                        for c in 0..dh {
                            dq[qrow_i + c] += s * kv[krow + c];
                            dk[krow + c] += s * qv[qrow_i + c];
                        }
                    }
                }
            }
        }
    }
    let mk = |t: &Tensor<T>, v: Vec<T>| Tensor::from_vec(t.shape(), v).unwrap();
    (mk(q, dq), mk(k, dk), mk(v, dv))
}

/// Projection weights of one attention layer.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub width: usize,
    pub heads: usize,
    pub window: usize,
    pub q: (ParamId, Option<ParamId>),
    /// The key bias is omitted: it shifts every score of a query equally.
    pub k: (ParamId, Option<ParamId>),
    pub v: (ParamId, Option<ParamId>),
    pub o: (ParamId, Option<ParamId>),
}

impl AttnParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, width: usize, window: usize) -> Result<Self> {
        let mut proj = |name: &str, bias: bool| -> Result<(ParamId, Option<ParamId>)> {
            let w = init.linear(format!("{prefix}.{name}.weight"), width, width)?;
            let b = if bias {
                Some(init.zeros(format!("{prefix}.{name}.bias"), &[width])?)
            } else {
                None
            };
            Ok((w, b))
        };
        Ok(Self {
            width,
            heads: num_heads(width),
            window,
            q: proj("q", true)?,
            k: proj("k", false)?,
            v: proj("v", true)?,
            o: proj("o", true)?,
        })
    }

    /// Records windowed attention over `x: [B, H, W, D]` with the given
    /// cyclic shift.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, shift: (usize, usize)) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.width {
            return Err(shape_err(
                "windowed_msa",
                format!("expected [B,H,W,{}], got {shape:?}", self.width),
            ));
        }
        let layout = Rc::new(WindowLayout::new(shape[1], shape[2], self.window, shift));
        let project = |g: &mut Graph<T>, (w, b): (ParamId, Option<ParamId>), x: Var| -> Result<Var> {
            let wv = g.param(store, w);
            let bv = b.map(|b| g.param(store, b));
            g.linear(x, wv, bv)
        };
        let q = project(g, self.q, x)?;
        let k = project(g, self.k, x)?;
        let v = project(g, self.v, x)?;
        let a = g.window_attention(q, k, v, self.heads, layout)?;
        project(g, self.o, a)
    }
}

/// Windowed attention on a single `[H, W, D]` map.
pub fn windowed_msa<T: Scalar>(
    x: &Tensor<T>,
    params: &AttnParams,
    store: &ParamStore<T>,
    shift: (usize, usize),
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err("windowed_msa", format!("expected [H,W,D], got {s:?}")));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let y = params.forward(&mut g, store, xv, shift)?;
    g.value(y).clone().reshape(s)
}
