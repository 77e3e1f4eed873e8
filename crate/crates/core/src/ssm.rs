//! Selective state space layers: discretization, the S6 recurrence, the four
//! snake-order scan paths, SS2D and the VSSM sub-block.

use std::rc::Rc;

use crate::autodiff::params::Init;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of scan directions in SS2D.
pub const DIRECTIONS: usize = 4;

/// Step-dependent transition and input matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedPair<T> {
    /// `[L, E, N]`
    pub a_bar: Tensor<T>,
    /// `[L, E, N]`
    pub b_bar: Tensor<T>,
}

/// Discretizes a diagonal SSM with `A_bar = exp(delta A)` and the simplified
/// input rule `B_bar = delta B`.
pub fn zoh_discretize<T: Scalar>(a: &Tensor<T>, delta: &Tensor<T>, b: &Tensor<T>) -> Result<DiscretizedPair<T>> {
    discretize(a, delta, b, false)
}

/// As [`zoh_discretize`] but with the exact input rule
/// `B_bar = (exp(delta A) - 1) / A * B`.
pub fn zoh_discretize_full<T: Scalar>(a: &Tensor<T>, delta: &Tensor<T>, b: &Tensor<T>) -> Result<DiscretizedPair<T>> {
    discretize(a, delta, b, true)
}

fn discretize<T: Scalar>(a: &Tensor<T>, delta: &Tensor<T>, b: &Tensor<T>, full: bool) -> Result<DiscretizedPair<T>> {
    let (e, n) = dims2(a, "zoh_discretize")?;
    let (l, e2) = dims2(delta, "zoh_discretize")?;
    let (l2, n2) = dims2(b, "zoh_discretize")?;
    if e != e2 || n != n2 || l != l2 {
        return Err(shape_err(
            "zoh_discretize",
            format!("A {:?}, delta {:?}, B {:?}", a.shape(), delta.shape(), b.shape()),
        ));
    }
    if let Some(bad) = delta.data().iter().find(|&&d| d.is_nan() || d <= T::zero()) {
        return Err(Error::Contract(format!("step size must be positive, got {bad}")));
    }
    let mut a_bar = Vec::with_capacity(l * e * n);
    let mut b_bar = Vec::with_capacity(l * e * n);
    for t in 0..l {
        for c in 0..e {
            let dt = delta.data()[t * e + c];
            for s in 0..n {
                let av = a.data()[c * n + s];
                let bv = b.data()[t * n + s];
                let ab = (dt * av).exp();
                a_bar.push(ab);
                b_bar.push(input_gain(ab, av, dt, full) * bv);
            }
        }
    }
    Ok(DiscretizedPair {
        a_bar: Tensor::from_vec(&[l, e, n], a_bar)?,
        b_bar: Tensor::from_vec(&[l, e, n], b_bar)?,
    })
}

/// Factor multiplying `B`: `delta` or `(exp(delta a) - 1) / a`.
fn input_gain<T: Scalar>(a_bar: T, a: T, dt: T, full: bool) -> T {
    if full && a != T::zero() {
        (a_bar - T::one()) / a
    } else {
        dt
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Runs `h_t = A_bar_t h_{t-1} + B_bar_t x_t`, `y_t = C_t h_t + D x_t` from
/// `h_0 = 0` for every channel.
pub fn selective_scan<T: Scalar>(
    x: &Tensor<T>,
    pair: &DiscretizedPair<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (l, e) = dims2(x, "selective_scan")?;
    let n = c.last_dim();
    let want = [l, e, n];
    if pair.a_bar.shape() != want || pair.b_bar.shape() != want || c.shape() != [l, n] || d_skip.shape() != [e] {
        return Err(shape_err("selective_scan", "inconsistent operand shapes"));
    }
    let mut h = vec![T::zero(); e * n];
    let mut y = Vec::with_capacity(l * e);
    for t in 0..l {
        for ch in 0..e {
            let xv = x.data()[t * e + ch];
            let mut acc = d_skip.data()[ch] * xv;
            for s in 0..n {
                let k = (t * e + ch) * n + s;
                let hs = &mut h[ch * n + s];
                *hs = pair.a_bar.data()[k] * *hs + pair.b_bar.data()[k] * xv;
                acc += c.data()[t * n + s] * *hs;
            }
            y.push(acc);
        }
    }
    Tensor::from_vec(&[l, e], y)
}

/// State saved by the fused scan for its backward pass.
pub struct ScanSaved<T> {
    full_zoh: bool,
    /// Hidden states `[B, L, E, N]`, empty when no gradient is needed.
    states: Vec<T>,
    /// Decay factors `exp(delta * A)`, laid out like `states`.
    decays: Vec<T>,
}

/// Batched discretize-and-scan used by the graph.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    d: &Tensor<T>,
    full_zoh: bool,
    save: bool,
) -> Result<(Tensor<T>, ScanSaved<T>)> {
    let (bn, l, e, n) = scan_dims(x, delta, a, bm, cm, d)?;
    if let Some(bad) = delta.data().iter().find(|&&v| v.is_nan() || v <= T::zero()) {
        return Err(Error::Contract(format!("step size must be positive, got {bad}")));
    }
    let (xv, dv, av, bv, cv, skip) = (x.data(), delta.data(), a.data(), bm.data(), cm.data(), d.data());
    let cap = if save { bn * l * e * n } else { 0 };
    let (mut states, mut decays) = (Vec::with_capacity(cap), Vec::with_capacity(cap));
    let mut y = Vec::with_capacity(bn * l * e);
    let mut h = vec![T::zero(); e * n];
    let mut ab = vec![T::zero(); n];
    for b in 0..bn {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..l {
            let row = b * l + t;
            let brow = &bv[row * n..][..n];
            let crow = &cv[row * n..][..n];
            for ch in 0..e {
                let xt = xv[row * e + ch];
                let dt = dv[row * e + ch];
                let arow = &av[ch * n..][..n];
                let hrow = &mut h[ch * n..][..n];
                let mut acc = skip[ch] * xt;
                for s in 0..n {
                    ab[s] = (dt * arow[s]).exp();
                    let gain = input_gain(ab[s], arow[s], dt, full_zoh);
                    hrow[s] = ab[s] * hrow[s] + gain * brow[s] * xt;
                    acc += crow[s] * hrow[s];
                }
                if save {
                    states.extend_from_slice(hrow);
                    decays.extend_from_slice(&ab);
                }
                y.push(acc);
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        ScanSaved {
            full_zoh,
            states,
            decays,
        },
    ))
}

fn scan_dims<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let [bn, l, e] = match x.shape() {
        [b, l, e] => [*b, *l, *e],
        s => return Err(shape_err("selective_scan", format!("x must be [B,L,E], got {s:?}"))),
    };
    let (e2, n) = dims2(a, "selective_scan")?;
    if e2 != e || delta.shape() != x.shape() || bm.shape() != [bn, l, n] || cm.shape() != [bn, l, n] || d.shape() != [e] {
        return Err(shape_err(
            "selective_scan",
            format!(
                "x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                x.shape(),
                delta.shape(),
                a.shape(),
                bm.shape(),
                cm.shape(),
                d.shape()
            ),
        ));
    }
    Ok((bn, l, e, n))
}

/// Gradients of the fused scan, in input order `[x, delta, a, b, c, d]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    d: &Tensor<T>,
    saved: &ScanSaved<T>,
    dy: &Tensor<T>,
) -> [Tensor<T>; 6] {
    let (bn, l, e, n) = scan_dims(x, delta, a, bm, cm, d).expect("validated in forward");
    assert_eq!(saved.states.len(), bn * l * e * n, "scan states were not saved");
    let (xv, dv, av, bv, cv, gv) = (x.data(), delta.data(), a.data(), bm.data(), cm.data(), dy.data());
    let (hs, abs) = (&saved.states, &saved.decays);
    let mut dx = vec![T::zero(); xv.len()];
    let mut ddelta = vec![T::zero(); dv.len()];
    let mut da = vec![T::zero(); av.len()];
    let mut db = vec![T::zero(); bv.len()];
    let mut dc = vec![T::zero(); cv.len()];
    let mut dd = vec![T::zero(); e];
    let mut carry = vec![T::zero(); e * n];
    let zeros = vec![T::zero(); n];
    for b in 0..bn {
        carry.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..l).rev() {
            let row = b * l + t;
            let brow = &bv[row * n..][..n];
            let crow = &cv[row * n..][..n];
            let dbrow = &mut db[row * n..][..n];
            let dcrow = &mut dc[row * n..][..n];
            for ch in 0..e {
                let k = row * e + ch;
                let (xt, dt, g) = (xv[k], dv[k], gv[k]);
                dd[ch] += g * xt;
                let arow = &av[ch * n..][..n];
                let darow = &mut da[ch * n..][..n];
                let crow_carry = &mut carry[ch * n..][..n];
                let h_t = &hs[k * n..][..n];
                let h_prev = if t == 0 { &zeros[..] } else { &hs[(k - e) * n..][..n] };
                let ab_t = &abs[k * n..][..n];
                let (mut gx, mut gdelta) = (g * d.data()[ch], T::zero());
                for s in 0..n {
                    let (av_s, bs, ab) = (arow[s], brow[s], ab_t[s]);
                    dcrow[s] += g * h_t[s];
                    let gh = g * crow[s] + crow_carry[s];
                    let gain = input_gain(ab, av_s, dt, saved.full_zoh);
                    gx += gh * gain * bs;
                    dbrow[s] += gh * gain * xt;
                    let d_ab = gh * h_prev[s];
                    let d_gain = gh * bs * xt;
                    gdelta += d_ab * ab * av_s;
                    darow[s] += d_ab * ab * dt;
                    if saved.full_zoh && av_s != T::zero() {
                        gdelta += d_gain * ab;
                        darow[s] += d_gain * (dt * av_s * ab - (ab - T::one())) / (av_s * av_s);
                    } else {
                        gdelta += d_gain;
                    }
                    crow_carry[s] = gh * ab;
                }
                dx[k] += gx;
                ddelta[k] += gdelta;
            }
        }
    }
    let mk = |t: &Tensor<T>, v: Vec<T>| Tensor::from_vec(t.shape(), v).unwrap();
    [mk(x, dx), mk(delta, ddelta), mk(a, da), mk(bm, db), mk(cm, dc), mk(d, dd)]
}

/// A traversal of an `H x W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPath {
    /// `order[t]` is the flat cell index visited at step `t`.
    pub order: Vec<usize>,
    /// `inverse[cell]` is the step at which `cell` is visited.
    pub inverse: Vec<usize>,
}

impl ScanPath {
    fn from_order(order: Vec<usize>) -> Self {
        let mut inverse = vec![0; order.len()];
        for (t, &c) in order.iter().enumerate() {
            inverse[c] = t;
        }
        Self { order, inverse }
    }

    fn reversed(&self) -> Self {
        Self::from_order(self.order.iter().rev().copied().collect())
    }
}

/// Row snake, its reverse, column snake, its reverse.
pub fn make_scan_paths(h: usize, w: usize) -> [ScanPath; DIRECTIONS] {
    let mut rows = Vec::with_capacity(h * w);
    for i in 0..h {
        if i % 2 == 0 {
            rows.extend((0..w).map(|j| i * w + j));
        } else {
            rows.extend((0..w).rev().map(|j| i * w + j));
        }
    }
    let mut cols = Vec::with_capacity(h * w);
    for j in 0..w {
        if j % 2 == 0 {
            cols.extend((0..h).map(|i| i * w + j));
        } else {
            cols.extend((0..h).rev().map(|i| i * w + j));
        }
    }
    let p1 = ScanPath::from_order(rows);
    let p3 = ScanPath::from_order(cols);
    let p2 = p1.reversed();
    let p4 = p3.reversed();
    [p1, p2, p3, p4]
}

/// Gather indices turning `[B, H*W, E]` into scan order (`reorder`) or
/// back into grid order (`restore`).
fn path_index(perm: &[usize], batch: usize, e: usize) -> Rc<[usize]> {
    let l = perm.len();
    let mut idx = Vec::with_capacity(batch * l * e);
    for b in 0..batch {
        for &src in perm {
            idx.extend((0..e).map(|c| (b * l + src) * e + c));
        }
    }
    idx.into()
}

/// Sizes of one SS2D layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmDims {
    /// Inner width `E`.
    pub inner: usize,
    /// State size `N`.
    pub state: usize,
    /// Rank `R` of the step-size projection.
    pub dt_rank: usize,
}

impl SsmDims {
    pub fn for_width(d: usize, state: usize) -> Self {
        Self {
            inner: 2 * d,
            state,
            dt_rank: d.div_ceil(16),
        }
    }
}

/// Per-direction selective-scan parameters.
#[derive(Clone, Debug)]
pub struct SsmDirection {
    /// `[E, R + 2N]`, bias free.
    pub x_proj: ParamId,
    /// `[R, E]`
    pub dt_proj: ParamId,
    /// `[E]`
    pub dt_bias: ParamId,
    /// `[E, N]`
    pub a_log: ParamId,
    /// `[E]`
    pub d_skip: ParamId,
}

/// SS2D parameters: four directions plus the output norm.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub dims: SsmDims,
    pub dirs: Vec<SsmDirection>,
    pub norm_weight: ParamId,
    pub norm_bias: ParamId,
    pub full_zoh: bool,
}

impl SsmParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, dims: SsmDims) -> Result<Self> {
        let SsmDims {
            inner: e,
            state: n,
            dt_rank: r,
        } = dims;
        let mut dirs = Vec::with_capacity(DIRECTIONS);
        for k in 0..DIRECTIONS {
            let p = format!("{prefix}.dir{k}");
            let x_proj = init.linear(format!("{p}.x_proj.weight"), e, r + 2 * n)?;
            let dt_proj = init.uniform(format!("{p}.dt_proj.weight"), &[r, e], 1.0 / (r as f64).sqrt())?;
            let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
            let bias: Vec<f64> = (0..e)
                .map(|_| {
                    let dt = (lo + init.rng.uniform_f64() * (hi - lo)).exp().max(1e-4);
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect();
            let dt_bias = init.tensor(format!("{p}.dt_proj.bias"), Tensor::from_f64(&[e], &bias)?)?;
            let a_init: Vec<f64> = (0..e).flat_map(|_| (1..=n).map(|s| (s as f64).ln())).collect();
            let a_log = init.tensor(format!("{p}.a_log"), Tensor::from_f64(&[e, n], &a_init)?)?;
            let d_skip = init.full(format!("{p}.d"), &[e], 1.0)?;
            dirs.push(SsmDirection {
                x_proj,
                dt_proj,
                dt_bias,
                a_log,
                d_skip,
            });
        }
        Ok(Self {
            dims,
            dirs,
            norm_weight: init.full(format!("{prefix}.norm.weight"), &[e], 1.0)?,
            norm_bias: init.zeros(format!("{prefix}.norm.bias"), &[e])?,
            full_zoh: false,
        })
    }

    /// Records SS2D over `x: [B, H, W, E]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [b, h, w, e] = match shape[..] {
            [b, h, w, e] => [b, h, w, e],
            _ => return Err(shape_err("ss2d", format!("input must be [B,H,W,E], got {shape:?}"))),
        };
        if e != self.dims.inner {
            return Err(shape_err(
                "ss2d",
                format!("width {e}, parameters built for {}", self.dims.inner),
            ));
        }
        let SsmDims {
            state: n, dt_rank: r, ..
        } = self.dims;
        let l = h * w;
        let mut total: Option<Var> = None;
        for (path, dir) in make_scan_paths(h, w).iter().zip(&self.dirs) {
            let xs = g.gather(x, path_index(&path.order, b, e), &[b, l, e])?;
            let wx = g.param(store, dir.x_proj);
            let proj = g.linear(xs, wx, None)?;
            let dr = g.slice_last(proj, 0, r)?;
            let bm = g.slice_last(proj, r, n)?;
            let cm = g.slice_last(proj, r + n, n)?;
            let wdt = g.param(store, dir.dt_proj);
            let bdt = g.param(store, dir.dt_bias);
            let raw = g.linear(dr, wdt, Some(bdt))?;
            let delta = g.softplus(raw)?;
            let a_log = g.param(store, dir.a_log);
            let a = g.neg_exp(a_log)?;
            let d = g.param(store, dir.d_skip);
            let ys = g.selective_scan(xs, delta, a, bm, cm, d, self.full_zoh)?;
            let y = g.gather(ys, path_index(&path.inverse, b, e), &[b, h, w, e])?;
            total = Some(match total {
                None => y,
                Some(acc) => g.add(acc, y)?,
            });
        }
        let total = total.expect("four directions");
        let normed = g.layer_norm(total)?;
        let gamma = g.param(store, self.norm_weight);
        let beta = g.param(store, self.norm_bias);
        g.modulate(normed, gamma, Some(beta))
    }
}

/// VSSM sub-block: projection in, depthwise conv, SiLU, SS2D, projection out.
#[derive(Clone, Debug)]
pub struct VssmParams {
    pub width: usize,
    /// `[D, E]`, bias free.
    pub in_proj: ParamId,
    /// `[3, 3, E]`
    pub conv_weight: ParamId,
    /// `[E]`
    pub conv_bias: ParamId,
    pub ss2d: SsmParams,
    /// `[E, D]`, bias free.
    pub out_proj: ParamId,
}

impl VssmParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, width: usize, state: usize) -> Result<Self> {
        let dims = SsmDims::for_width(width, state);
        let e = dims.inner;
        Ok(Self {
            width,
            in_proj: init.linear(format!("{prefix}.in_proj.weight"), width, e)?,
            conv_weight: init.uniform(format!("{prefix}.conv.weight"), &[3, 3, e], 1.0 / 3.0)?,
            conv_bias: init.uniform(format!("{prefix}.conv.bias"), &[e], 1.0 / 3.0)?,
            ss2d: SsmParams::init(init, &format!("{prefix}.ss2d"), dims)?,
            out_proj: init.linear(format!("{prefix}.out_proj.weight"), e, width)?,
        })
    }

    /// Records the block over `x: [B, H, W, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w_in = g.param(store, self.in_proj);
        let u = g.linear(x, w_in, None)?;
        let cw = g.param(store, self.conv_weight);
        let cb = g.param(store, self.conv_bias);
        let u = g.dwconv3x3(u, cw, cb)?;
        let u = g.silu(u)?;
        let u = self.ss2d.forward(g, store, u)?;
        let w_out = g.param(store, self.out_proj);
        g.linear(u, w_out, None)
    }
}

fn with_batch<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err(op, format!("expected [H,W,C], got {s:?}")));
    }
    x.clone().reshape(&[1, s[0], s[1], s[2]])
}

/// SS2D on a single `[H, W, E]` feature map.
pub fn ss2d<T: Scalar>(x: &Tensor<T>, params: &SsmParams, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let xv = g.constant(with_batch(x, "ss2d")?);
    let y = params.forward(&mut g, store, xv)?;
    g.value(y).clone().reshape(x.shape())
}

/// VSSM on a single `[H, W, D]` feature map.
pub fn vssm_forward<T: Scalar>(x: &Tensor<T>, params: &VssmParams, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let xv = g.constant(with_batch(x, "vssm")?);
    let y = params.forward(&mut g, store, xv)?;
    g.value(y).clone().reshape(x.shape())
}
