//! Hand-written two-class networks with flat parameter vectors.
//!
//! Both networks are generic over the scalar type: training runs in `f32`,
//! gradient verification instantiates the same code in `f64`.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub trait Real: Float + AddAssign + MulAssign + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A differentiable map from a flat input to two logits.
pub trait Network<T: Real>: Clone + Send + Sync {
    type Cache: Send;

    fn input_len(&self) -> usize;
    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];
    fn new_cache(&self) -> Self::Cache;
    fn forward(&self, x: &[T], cache: &mut Self::Cache) -> [T; 2];
    /// Accumulates `∂loss/∂θ` into `grad` given `∂loss/∂logits`.
    fn backward(&self, cache: &mut Self::Cache, dlogits: [T; 2], grad: &mut [T]);
}

/// Numerically stable two-class softmax.
pub fn softmax2<T: Real>(z: [T; 2]) -> [T; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `-log softmax(z)[label]`.
pub fn cross_entropy<T: Real>(z: [T; 2], label: usize) -> T {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    lse - z[label]
}

fn he_init<T: Real>(out: &mut [T], fan_in: usize, gain: f64, rng: &mut impl Rng) {
    let dist = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("finite std");
    for w in out {
        *w = T::of(dist.sample(rng));
    }
}

#[inline]
fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// `in → hidden → hidden → 2`, ReLU activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    input: usize,
    hidden: usize,
    params: Vec<T>,
}

pub struct MlpCache<T> {
    x: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
}

impl<T: Real> Mlp<T> {
    pub fn param_count(input: usize, hidden: usize) -> usize {
        hidden * input + hidden + hidden * hidden + hidden + 2 * hidden + 2
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            params: vec![T::zero(); Self::param_count(input, hidden)],
        }
    }

    pub fn from_params(input: usize, hidden: usize, params: Vec<T>) -> Option<Self> {
        (params.len() == Self::param_count(input, hidden)).then_some(Self {
            input,
            hidden,
            params,
        })
    }

    /// He-normal hidden weights, small output layer, zero biases.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(input, hidden);
        let (w1, _, w2, _, w3, _) = net.offsets();
        he_init(&mut net.params[w1.0..w1.1], input, 1.0, rng);
        he_init(&mut net.params[w2.0..w2.1], hidden, 1.0, rng);
        he_init(&mut net.params[w3.0..w3.1], hidden, 0.5, rng);
        net
    }

    /// Same as [`Mlp::init`] with the output layer set to zero, so every
    /// input scores exactly 0.5.
    pub fn init_zero_output(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut net = Self::init(input, hidden, rng);
        let (_, _, _, _, w3, b3) = net.offsets();
        net.params[w3.0..b3.1]
            .iter_mut()
            .for_each(|p| *p = T::zero());
        net
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    #[allow(clippy::type_complexity)]
    fn offsets(
        &self,
    ) -> (
        (usize, usize),
        (usize, usize),
        (usize, usize),
        (usize, usize),
        (usize, usize),
        (usize, usize),
    ) {
        let (i, h) = (self.input, self.hidden);
        let w1 = (0, h * i);
        let b1 = (w1.1, w1.1 + h);
        let w2 = (b1.1, b1.1 + h * h);
        let b2 = (w2.1, w2.1 + h);
        let w3 = (b2.1, b2.1 + 2 * h);
        let b3 = (w3.1, w3.1 + 2);
        (w1, b1, w2, b2, w3, b3)
    }
}

fn dense<T: Real>(w: &[T], b: &[T], x: &[T], out: &mut [T], activate: bool) {
    let n_in = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        let mut acc = T::zero();
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        *o = acc;
    }
    for (o, bi) in out.iter_mut().zip(b) {
        *o += *bi;
        if activate {
            *o = relu(*o);
        }
    }
}

impl<T: Real> Network<T> for Mlp<T> {
    type Cache = MlpCache<T>;

    fn input_len(&self) -> usize {
        self.input
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn new_cache(&self) -> MlpCache<T> {
        MlpCache {
            x: vec![T::zero(); self.input],
            h1: vec![T::zero(); self.hidden],
            h2: vec![T::zero(); self.hidden],
        }
    }

    fn forward(&self, x: &[T], c: &mut MlpCache<T>) -> [T; 2] {
        let (w1, b1, w2, b2, w3, b3) = self.offsets();
        let p = &self.params;
        c.x.copy_from_slice(x);
        dense(&p[w1.0..w1.1], &p[b1.0..b1.1], x, &mut c.h1, true);
        dense(&p[w2.0..w2.1], &p[b2.0..b2.1], &c.h1, &mut c.h2, true);
        let mut z = [T::zero(); 2];
        dense(&p[w3.0..w3.1], &p[b3.0..b3.1], &c.h2, &mut z, false);
        z
    }

    fn backward(&self, c: &mut MlpCache<T>, dz: [T; 2], grad: &mut [T]) {
        let (w1, b1, w2, b2, w3, b3) = self.offsets();
        let p = &self.params;
        let h = self.hidden;

        let mut dh2 = vec![T::zero(); h];
        for k in 0..2 {
            grad[b3.0 + k] += dz[k];
            let row = w3.0 + k * h;
            for j in 0..h {
                grad[row + j] += dz[k] * c.h2[j];
                dh2[j] += dz[k] * p[row + j];
            }
        }
        for j in 0..h {
            if c.h2[j] <= T::zero() {
                dh2[j] = T::zero();
            }
        }

        let mut dh1 = vec![T::zero(); h];
        for j in 0..h {
            let d = dh2[j];
            if d == T::zero() {
                continue;
            }
            grad[b2.0 + j] += d;
            let row = w2.0 + j * h;
            for i in 0..h {
                grad[row + i] += d * c.h1[i];
                dh1[i] += d * p[row + i];
            }
        }

        for j in 0..h {
            if c.h1[j] <= T::zero() {
                continue;
            }
            let d = dh1[j];
            grad[b1.0 + j] += d;
            let row = w1.0 + j * self.input;
            for (g, xi) in grad[row..row + self.input].iter_mut().zip(&c.x) {
                *g += d * *xi;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Three-block CNN
// ---------------------------------------------------------------------------

/// Three blocks of (3×3 same-padded convolution → ReLU → 2×2 average pool),
/// global average pooling and a linear two-class head. Single input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn3<T> {
    side: usize,
    widths: [usize; 3],
    params: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayout {
    cin: usize,
    cout: usize,
    /// Spatial side of this block's input (and conv output).
    side: usize,
    w: usize,
    b: usize,
}

pub struct CnnCache<T> {
    /// Zero-padded inputs of each block: `cin × (side+2)²`.
    padded: [Vec<T>; 3],
    /// Pre-activations of each block: `cout × side × (side+2)`.
    pre: [Vec<T>; 3],
    pooled: Vec<T>,
    dpooled: Vec<T>,
    scratch_grad_in: [Vec<T>; 3],
    scratch_grad_out: [Vec<T>; 3],
}

impl<T: Real> Cnn3<T> {
    pub fn param_count(widths: [usize; 3]) -> usize {
        let [c1, c2, c3] = widths;
        (c1 * 9 + c1) + (c2 * c1 * 9 + c2) + (c3 * c2 * 9 + c3) + (2 * c3 + 2)
    }

    fn check_side(side: usize) {
        assert!(
            side >= 8 && side % 8 == 0,
            "CNN input side must be a positive multiple of 8"
        );
    }

    pub fn zeros(side: usize, widths: [usize; 3]) -> Self {
        Self::check_side(side);
        Self {
            side,
            widths,
            params: vec![T::zero(); Self::param_count(widths)],
        }
    }

    pub fn from_params(side: usize, widths: [usize; 3], params: Vec<T>) -> Option<Self> {
        (side >= 8 && side % 8 == 0 && params.len() == Self::param_count(widths)).then_some(Self {
            side,
            widths,
            params,
        })
    }

    pub fn init(side: usize, widths: [usize; 3], rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(side, widths);
        let layers = net.layers();
        for l in &layers {
            he_init(&mut net.params[l.w..l.b], l.cin * 9, 1.0, rng);
        }
        let (hw, _) = net.head();
        let c3 = widths[2];
        he_init(&mut net.params[hw..hw + 2 * c3], c3, 0.5, rng);
        net
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    fn layers(&self) -> [ConvLayout; 3] {
        let [c1, c2, c3] = self.widths;
        let l1 = ConvLayout {
            cin: 1,
            cout: c1,
            side: self.side,
            w: 0,
            b: c1 * 9,
        };
        let l2 = ConvLayout {
            cin: c1,
            cout: c2,
            side: self.side / 2,
            w: l1.b + c1,
            b: l1.b + c1 + c2 * c1 * 9,
        };
        let l3 = ConvLayout {
            cin: c2,
            cout: c3,
            side: self.side / 4,
            w: l2.b + c2,
            b: l2.b + c2 + c3 * c2 * 9,
        };
        [l1, l2, l3]
    }

    fn head(&self) -> (usize, usize) {
        let l3 = self.layers()[2];
        let w = l3.b + l3.cout;
        (w, w + 2 * self.widths[2])
    }
}

// Conv outputs use the padded row stride `ps = side + 2`: row `y` of a
// channel starts at `y·ps` and its last two entries are junk (forward) or
// zero (backward). Every kernel tap then becomes one contiguous run of
// `span = (side − 1)·ps + side` elements, which vectorizes well.

fn span(s: usize) -> usize {
    (s - 1) * (s + 2) + s
}

fn conv_forward<T: Real>(l: &ConvLayout, params: &[T], padded: &[T], out: &mut [T]) {
    let s = l.side;
    let ps = s + 2;
    let n = span(s);
    for co in 0..l.cout {
        let bias = params[l.b + co];
        let o = &mut out[co * s * ps..][..n];
        o.iter_mut().for_each(|v| *v = bias);
        for ci in 0..l.cin {
            let inp = &padded[ci * ps * ps..(ci + 1) * ps * ps];
            let k = &params[l.w + (co * l.cin + ci) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let w = k[ky * 3 + kx];
                    let src = &inp[ky * ps + kx..][..n];
                    for (d, v) in o.iter_mut().zip(src) {
                        *d += w * *v;
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators, so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |t, (x, y)| t + *x * *y);
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Accumulates weight/bias gradients and, when `grad_in` is given, the
/// gradient with respect to the padded input. `dout` must be zero in the
/// junk columns.
fn conv_backward<T: Real>(
    l: &ConvLayout,
    params: &[T],
    padded: &[T],
    dout: &[T],
    grad: &mut [T],
    mut grad_in: Option<&mut [T]>,
) {
    let s = l.side;
    let ps = s + 2;
    let n = span(s);
    for co in 0..l.cout {
        let d = &dout[co * s * ps..][..n];
        let mut db = T::zero();
        for v in d {
            db += *v;
        }
        grad[l.b + co] += db;
        for ci in 0..l.cin {
            let inp = &padded[ci * ps * ps..(ci + 1) * ps * ps];
            let wbase = l.w + (co * l.cin + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    grad[wbase + ky * 3 + kx] += dot(&inp[ky * ps + kx..][..n], d);
                }
            }
            if let Some(gi) = grad_in.as_deref_mut() {
                let gin = &mut gi[ci * ps * ps..(ci + 1) * ps * ps];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let w = params[wbase + ky * 3 + kx];
                        let dst = &mut gin[ky * ps + kx..][..n];
                        for (g, v) in dst.iter_mut().zip(d) {
                            *g += w * *v;
                        }
                    }
                }
            }
        }
    }
}

/// ReLU then 2×2 average pool of `pre` (`c` channels of `s` rows, stride
/// `s + 2`) into the interior of a zero-padded `c × (s/2 + 2)²` buffer, or a
/// plain `c × (s/2)²` buffer when `pad` is false.
fn relu_pool<T: Real>(pre: &[T], c: usize, s: usize, out: &mut [T], pad: bool) {
    let h = s / 2;
    let ps = s + 2;
    let os = if pad { h + 2 } else { h };
    let off = usize::from(pad);
    let quarter = T::of(0.25);
    for ch in 0..c {
        let p = &pre[ch * s * ps..(ch + 1) * s * ps];
        let o = &mut out[ch * os * os..(ch + 1) * os * os];
        for y in 0..h {
            for x in 0..h {
                let v = relu(p[2 * y * ps + 2 * x])
                    + relu(p[2 * y * ps + 2 * x + 1])
                    + relu(p[(2 * y + 1) * ps + 2 * x])
                    + relu(p[(2 * y + 1) * ps + 2 * x + 1]);
                o[(y + off) * os + x + off] = v * quarter;
            }
        }
    }
}

/// Inverse of [`relu_pool`]: spreads the pooled gradient over each 2×2 cell
/// and masks by the ReLU derivative. Junk columns of `dpre` are zeroed.
fn relu_pool_backward<T: Real>(
    pre: &[T],
    c: usize,
    s: usize,
    dpooled: &[T],
    pad: bool,
    dpre: &mut [T],
) {
    let h = s / 2;
    let ps = s + 2;
    let os = if pad { h + 2 } else { h };
    let off = usize::from(pad);
    let quarter = T::of(0.25);
    for ch in 0..c {
        let p = &pre[ch * s * ps..(ch + 1) * s * ps];
        let dp = &dpooled[ch * os * os..(ch + 1) * os * os];
        let d = &mut dpre[ch * s * ps..(ch + 1) * s * ps];
        for y in 0..s {
            for x in 0..s {
                let g = dp[(y / 2 + off) * os + x / 2 + off] * quarter;
                let i = y * ps + x;
                d[i] = if p[i] > T::zero() { g } else { T::zero() };
            }
            d[y * ps + s] = T::zero();
            d[y * ps + s + 1] = T::zero();
        }
    }
}

impl<T: Real> Network<T> for Cnn3<T> {
    type Cache = CnnCache<T>;

    fn input_len(&self) -> usize {
        self.side * self.side
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn new_cache(&self) -> CnnCache<T> {
        let ls = self.layers();
        let padded = ls.map(|l| vec![T::zero(); l.cin * (l.side + 2) * (l.side + 2)]);
        let pre = ls.map(|l| vec![T::zero(); l.cout * l.side * (l.side + 2)]);
        let scratch_grad_in = ls.map(|l| vec![T::zero(); l.cin * (l.side + 2) * (l.side + 2)]);
        let scratch_grad_out = ls.map(|l| vec![T::zero(); l.cout * l.side * (l.side + 2)]);
        let l3 = ls[2];
        CnnCache {
            padded,
            pre,
            pooled: vec![T::zero(); l3.cout * (l3.side / 2) * (l3.side / 2)],
            dpooled: vec![T::zero(); l3.cout * (l3.side / 2) * (l3.side / 2)],
            scratch_grad_in,
            scratch_grad_out,
        }
    }

    fn forward(&self, x: &[T], c: &mut CnnCache<T>) -> [T; 2] {
        let ls = self.layers();
        let s = self.side;
        let ps = s + 2;
        let first = &mut c.padded[0];
        for y in 0..s {
            first[(y + 1) * ps + 1..(y + 1) * ps + 1 + s].copy_from_slice(&x[y * s..(y + 1) * s]);
        }
        for (i, l) in ls.iter().enumerate() {
            conv_forward(l, &self.params, &c.padded[i], &mut c.pre[i]);
            if i < 2 {
                let next = &mut c.padded[i + 1];
                relu_pool(&c.pre[i], l.cout, l.side, next, true);
            } else {
                relu_pool(&c.pre[i], l.cout, l.side, &mut c.pooled, false);
            }
        }
        let c3 = self.widths[2];
        let n = (ls[2].side / 2) * (ls[2].side / 2);
        let inv = T::one() / T::of(n as f64);
        let (hw, hb) = self.head();
        let mut z = [self.params[hb], self.params[hb + 1]];
        for ch in 0..c3 {
            let mut g = T::zero();
            for v in &c.pooled[ch * n..(ch + 1) * n] {
                g += *v;
            }
            g = g * inv;
            z[0] += self.params[hw + ch] * g;
            z[1] += self.params[hw + c3 + ch] * g;
        }
        z
    }

    fn backward(&self, c: &mut CnnCache<T>, dz: [T; 2], grad: &mut [T]) {
        let ls = self.layers();
        let c3 = self.widths[2];
        let n = (ls[2].side / 2) * (ls[2].side / 2);
        let inv = T::one() / T::of(n as f64);
        let (hw, hb) = self.head();
        grad[hb] += dz[0];
        grad[hb + 1] += dz[1];

        let CnnCache {
            padded,
            pre,
            pooled,
            dpooled,
            scratch_grad_in: dpad,
            scratch_grad_out: dpre,
        } = c;
        for ch in 0..c3 {
            let mut g = T::zero();
            for v in &pooled[ch * n..(ch + 1) * n] {
                g += *v;
            }
            g = g * inv;
            grad[hw + ch] += dz[0] * g;
            grad[hw + c3 + ch] += dz[1] * g;
            let dg = (dz[0] * self.params[hw + ch] + dz[1] * self.params[hw + c3 + ch]) * inv;
            dpooled[ch * n..(ch + 1) * n]
                .iter_mut()
                .for_each(|d| *d = dg);
        }

        relu_pool_backward(
            &pre[2],
            ls[2].cout,
            ls[2].side,
            dpooled,
            false,
            &mut dpre[2],
        );
        for i in (0..3).rev() {
            let l = &ls[i];
            if i > 0 {
                dpad[i].iter_mut().for_each(|v| *v = T::zero());
                conv_backward(
                    l,
                    &self.params,
                    &padded[i],
                    &dpre[i],
                    grad,
                    Some(&mut dpad[i]),
                );
                let prev = &ls[i - 1];
                relu_pool_backward(
                    &pre[i - 1],
                    prev.cout,
                    prev.side,
                    &dpad[i],
                    true,
                    &mut dpre[i - 1],
                );
            } else {
                conv_backward(l, &self.params, &padded[i], &dpre[i], grad, None);
            }
        }
    }
}
