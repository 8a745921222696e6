//! Generic convolution engine: dilated valid convolutions via im2col + GEMM,
//! leaky ReLU, batch normalization, dropout, and the matching backward pass.
//! Activations are stored channel-major across the batch (C, N, H, W) so each
//! layer is one GEMM and per-channel statistics are contiguous.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use super::ModelSpec;

pub trait Real: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c`, all row-major; `op` transposes when flagged.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // storage is `cols x rows` when transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, ta);
                let (rsb, csb) = strides(k, n, tb);
                // SAFETY: bounds asserted above; strides describe dense row-major storage.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}
impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Activation tensor in (C, N, H, W) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![T::zero(); c * n * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> T {
        self.data[((c * self.n + n) * self.h + y) * self.w + x]
    }
}

/// Offsets of each parameter block in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub hidden: Vec<HiddenBlock>,
    pub head_w: usize,
    pub head_b: usize,
    pub n_params: usize,
    pub n_running: usize,
}

#[derive(Debug, Clone)]
pub struct HiddenBlock {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub w: usize,
    pub b: usize,
    pub gamma: usize,
    pub beta: usize,
    /// Offset of the running mean; the running variance follows it.
    pub running: usize,
}

impl HiddenBlock {
    pub fn fan_in(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn reach(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut off = 0;
        let mut run = 0;
        let mut in_c = spec.in_channels;
        let mut hidden = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let o = l.channels;
            let w = off;
            off += o * in_c * l.kernel * l.kernel;
            let b = off;
            let gamma = b + o;
            let beta = gamma + o;
            off = beta + o;
            hidden.push(HiddenBlock { in_c, out_c: o, kernel: l.kernel, dilation: l.dilation, w, b, gamma, beta, running: run });
            run += 2 * o;
            in_c = o;
        }
        let outs = spec.outputs();
        let head_w = off;
        let head_b = head_w + outs * in_c;
        Self { hidden, head_w, head_b, n_params: head_b + outs, n_running: run }
    }

    pub fn head_in(&self) -> usize {
        self.hidden.last().map_or(0, |h| h.out_c)
    }
}

fn im2col<T: Real>(x: &Act<T>, k: usize, d: usize, oh: usize, ow: usize) -> Vec<T> {
    let cols = x.n * oh * ow;
    let mut out = vec![T::zero(); x.c * k * k * cols];
    for ci in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for ni in 0..x.n {
                    for y in 0..oh {
                        let src = ((ci * x.n + ni) * x.h + y + ky * d) * x.w + kx * d;
                        let dst = row * cols + (ni * oh + y) * ow;
                        out[dst..dst + ow].copy_from_slice(&x.data[src..src + ow]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Real>(cols: &[T], dx: &mut Act<T>, k: usize, d: usize, oh: usize, ow: usize) {
    let ncol = dx.n * oh * ow;
    for ci in 0..dx.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for ni in 0..dx.n {
                    for y in 0..oh {
                        let dst = ((ci * dx.n + ni) * dx.h + y + ky * d) * dx.w + kx * d;
                        let src = row * ncol + (ni * oh + y) * ow;
                        for (o, &v) in dx.data[dst..dst + ow].iter_mut().zip(&cols[src..src + ow]) {
                            *o = *o + v;
                        }
                    }
                }
            }
        }
    }
}

/// How a forward pass treats normalization and dropout.
pub enum Mode<'a, R> {
    /// Stored running statistics, no dropout.
    Eval,
    /// Batch statistics and inverted dropout drawn from `rng`.
    Train { dropout: f64, rng: &'a mut R },
}

pub struct HiddenCache<T> {
    cols: Vec<T>,
    z: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mask: Option<Vec<T>>,
    in_shape: (usize, usize, usize, usize),
}

pub struct Cache<T> {
    hidden: Vec<HiddenCache<T>>,
    head_in: Act<T>,
    /// Per hidden layer batch (mean, biased variance).
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
}

pub const BN_EPS: f64 = 1e-5;

/// Forward pass over a (C, N, H, W) input. Returns the head output
/// (outputs, N, H', W') and, in training mode, the cache for `backward`.
pub fn forward<T: Real, R: Rng>(
    spec: &ModelSpec,
    layout: &Layout,
    params: &[T],
    running: &[T],
    input: Act<T>,
    mut mode: Mode<'_, R>,
) -> (Act<T>, Option<Cache<T>>) {
    let slope = T::lit(spec.leaky_slope);
    let eps = T::lit(BN_EPS);
    let train = matches!(mode, Mode::Train { .. });
    let mut x = input;
    let mut caches = Vec::new();
    let mut stats = Vec::new();
    for blk in &layout.hidden {
        let (oh, ow) = (x.h - blk.reach(), x.w - blk.reach());
        let cols = im2col(&x, blk.kernel, blk.dilation, oh, ow);
        let np = x.n * oh * ow;
        let mut z = vec![T::zero(); blk.out_c * np];
        for o in 0..blk.out_c {
            let b = params[blk.b + o];
            z[o * np..(o + 1) * np].iter_mut().for_each(|v| *v = b);
        }
        T::gemm(blk.out_c, blk.fan_in(), np, &params[blk.w..blk.b], false, &cols, false, T::one(), &mut z);
        let mut y: Vec<T> = z.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
        let in_shape = (x.c, x.n, x.h, x.w);
        match &mut mode {
            Mode::Eval => {
                for o in 0..blk.out_c {
                    let (m, var) = (running[blk.running + o], running[blk.running + blk.out_c + o]);
                    let scale = params[blk.gamma + o] / (var + eps).sqrt();
                    let shift = params[blk.beta + o] - m * scale;
                    y[o * np..(o + 1) * np].iter_mut().for_each(|v| *v = *v * scale + shift);
                }
            }
            Mode::Train { dropout, rng } => {
                let npt = T::from_usize(np).unwrap();
                let mut means = vec![T::zero(); blk.out_c];
                let mut vars = vec![T::zero(); blk.out_c];
                let mut inv_std = vec![T::zero(); blk.out_c];
                let mut xhat = vec![T::zero(); y.len()];
                for o in 0..blk.out_c {
                    let seg = &y[o * np..(o + 1) * np];
                    let m = seg.iter().fold(T::zero(), |a, &v| a + v) / npt;
                    let var = seg.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m)) / npt;
                    let is = T::one() / (var + eps).sqrt();
                    let (g, b) = (params[blk.gamma + o], params[blk.beta + o]);
                    for i in o * np..(o + 1) * np {
                        xhat[i] = (y[i] - m) * is;
                        y[i] = g * xhat[i] + b;
                    }
                    means[o] = m;
                    vars[o] = var;
                    inv_std[o] = is;
                }
                let mask = (*dropout > 0.0).then(|| {
                    let keep = T::lit(1.0 / (1.0 - *dropout));
                    let mask: Vec<T> = (0..y.len()).map(|_| if rng.gen::<f64>() < *dropout { T::zero() } else { keep }).collect();
                    y.iter_mut().zip(&mask).for_each(|(v, &k)| *v = *v * k);
                    mask
                });
                stats.push((means, vars));
                caches.push(HiddenCache { cols, z, xhat, inv_std, mask, in_shape });
            }
        }
        x = Act { c: blk.out_c, n: in_shape.1, h: oh, w: ow, data: y };
    }
    let outs = spec.outputs();
    let np = x.plane();
    let mut out = Act::zeros(outs, x.n, x.h, x.w);
    for o in 0..outs {
        let b = params[layout.head_b + o];
        out.data[o * np..(o + 1) * np].iter_mut().for_each(|v| *v = b);
    }
    T::gemm(outs, x.c, np, &params[layout.head_w..layout.head_b], false, &x.data, false, T::one(), &mut out.data);
    let cache = train.then(|| Cache { hidden: caches, head_in: x, batch_stats: stats });
    (out, cache)
}

/// Gradient of the loss with respect to all parameters, given the gradient
/// with respect to the head output.
pub fn backward<T: Real>(spec: &ModelSpec, layout: &Layout, params: &[T], cache: Cache<T>, dout: &Act<T>) -> Vec<T> {
    let slope = T::lit(spec.leaky_slope);
    let mut grad = vec![T::zero(); layout.n_params];
    let x = &cache.head_in;
    let np = x.plane();
    let outs = spec.outputs();
    T::gemm(outs, np, x.c, &dout.data, false, &x.data, true, T::zero(), &mut grad[layout.head_w..layout.head_b]);
    for o in 0..outs {
        grad[layout.head_b + o] = dout.data[o * np..(o + 1) * np].iter().fold(T::zero(), |a, &v| a + v);
    }
    let mut dx = vec![T::zero(); x.c * np];
    T::gemm(x.c, outs, np, &params[layout.head_w..layout.head_b], true, &dout.data, false, T::zero(), &mut dx);

    for (li, (blk, hc)) in layout.hidden.iter().zip(cache.hidden).enumerate().rev() {
        let np = hc.xhat.len() / blk.out_c;
        let npt = T::from_usize(np).unwrap();
        if let Some(mask) = &hc.mask {
            dx.iter_mut().zip(mask).for_each(|(d, &k)| *d = *d * k);
        }
        // batch norm, then leaky ReLU, in reverse
        for o in 0..blk.out_c {
            let r = o * np..(o + 1) * np;
            let (mut sg, mut sb) = (T::zero(), T::zero());
            for i in r.clone() {
                sg = sg + dx[i] * hc.xhat[i];
                sb = sb + dx[i];
            }
            grad[blk.gamma + o] = sg;
            grad[blk.beta + o] = sb;
            let g = params[blk.gamma + o];
            let k = g * hc.inv_std[o] / npt;
            for i in r {
                let da = k * (npt * dx[i] - sb - hc.xhat[i] * sg);
                dx[i] = if hc.z[i] > T::zero() { da } else { da * slope };
            }
            grad[blk.b + o] = dx[o * np..(o + 1) * np].iter().fold(T::zero(), |a, &v| a + v);
        }
        let fan = blk.fan_in();
        T::gemm(blk.out_c, np, fan, &dx, false, &hc.cols, true, T::zero(), &mut grad[blk.w..blk.b]);
        if li == 0 {
            break;
        }
        let mut dcols = vec![T::zero(); fan * np];
        T::gemm(fan, blk.out_c, np, &params[blk.w..blk.b], true, &dx, false, T::zero(), &mut dcols);
        let (c, n, h, w) = hc.in_shape;
        let mut din = Act::zeros(c, n, h, w);
        col2im(&dcols, &mut din, blk.kernel, blk.dilation, h - blk.reach(), w - blk.reach());
        dx = din.data;
    }
    grad
}
