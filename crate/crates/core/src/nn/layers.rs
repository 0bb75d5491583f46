use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Ix1, Ix2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Mode, NnError, Param, Tensor3};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn to_2d(x: &Tensor3) -> Array2<f64> {
    let (b, t, c) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * t, c))
        .expect("standard layout")
}

fn to_3d(x: Array2<f64>, b: usize, t: usize) -> Tensor3 {
    let c = x.ncols();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, t, c))
        .expect("standard layout")
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> ndarray::ArrayD<f64> {
    ndarray::ArrayD::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

fn view2(p: &Param) -> ArrayView2<'_, f64> {
    p.value.view().into_dimensionality::<Ix2>().expect("2-d param")
}

fn view1(p: &Param) -> ArrayView1<'_, f64> {
    p.value.view().into_dimensionality::<Ix1>().expect("1-d param")
}

// ---------------------------------------------------------------------------

/// `y = x W + b` applied over the last axis.
#[derive(Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<(Array2<f64>, usize, usize)>,
}

impl Linear {
    /// Weights and bias drawn from `U(-1/sqrt(d_in), 1/sqrt(d_in))`.
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Param::new(format!("{name}.weight"), uniform(rng, &[d_in, d_out], bound)),
            bias: Param::new(format!("{name}.bias"), uniform(rng, &[d_out], bound)),
            cache: None,
        }
    }

    pub fn from_parts(name: &str, weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), weight.into_dyn()),
            bias: Param::new(format!("{name}.bias"), bias.into_dyn()),
            cache: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn check(&self, x: &Tensor3) -> Result<(), NnError> {
        if x.dim().2 != self.d_in() {
            return Err(NnError::shape(
                &self.weight.name,
                format!("input has {} channels, weight expects {}", x.dim().2, self.d_in()),
            ));
        }
        Ok(())
    }

    fn apply(&self, x2: &Array2<f64>) -> Array2<f64> {
        x2.dot(&view2(&self.weight)) + &view1(&self.bias)
    }

    /// Plain 2-d application, used by heads that sit after pooling.
    pub fn infer_2d(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.d_in() {
            return Err(NnError::shape(&self.weight.name, "inner dimensions disagree"));
        }
        Ok(self.apply(x))
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor3, _mode: Mode) -> Result<Tensor3, NnError> {
        self.check(x)?;
        let (b, t, _) = x.dim();
        let x2 = to_2d(x);
        let y = self.apply(&x2);
        self.cache = Some((x2, b, t));
        Ok(to_3d(y, b, t))
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        let (x2, b, t) = self
            .cache
            .take()
            .ok_or_else(|| NnError::NoCache(self.weight.name.clone()))?;
        let g2 = to_2d(grad_out);
        let dw = x2.t().dot(&g2);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &g2.sum_axis(Axis(0)).into_dyn();
        let dx = g2.dot(&view2(&self.weight).t());
        Ok(to_3d(dx, b, t))
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        self.check(x)?;
        let (b, t, _) = x.dim();
        Ok(to_3d(self.apply(&to_2d(x)), b, t))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    train: bool,
    b: usize,
    t: usize,
}

impl Clone for BnCache {
    fn clone(&self) -> Self {
        BnCache {
            xhat: self.xhat.clone(),
            inv_std: self.inv_std.clone(),
            train: self.train,
            b: self.b,
            t: self.t,
        }
    }
}

/// Per-channel normalization over the batch and time axes.
#[derive(Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), Array1::ones(channels).into_dyn()),
            beta: Param::new(format!("{name}.beta"), Array1::zeros(channels).into_dyn()),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                Array1::zeros(channels).into_dyn(),
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                Array1::ones(channels).into_dyn(),
            ),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn check(&self, x: &Tensor3) -> Result<(), NnError> {
        if x.dim().2 != self.channels() {
            return Err(NnError::shape(
                &self.gamma.name,
                format!("input has {} channels, expected {}", x.dim().2, self.channels()),
            ));
        }
        Ok(())
    }

    fn normalize(&self, x2: &Array2<f64>, mean: &Array1<f64>, inv_std: &Array1<f64>) -> (Array2<f64>, Array2<f64>) {
        let xhat = (x2 - mean) * inv_std;
        let y = &xhat * &view1(&self.gamma) + &view1(&self.beta);
        (xhat, y)
    }

    fn eval_stats(&self) -> (Array1<f64>, Array1<f64>) {
        let mean = view1(&self.running_mean).to_owned();
        let inv_std = view1(&self.running_var).mapv(|v| 1.0 / (v + self.eps).sqrt());
        (mean, inv_std)
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor3, mode: Mode) -> Result<Tensor3, NnError> {
        self.check(x)?;
        let (b, t, _) = x.dim();
        let x2 = to_2d(x);
        let n = x2.nrows();
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(NnError::BatchTooSmall(self.gamma.name.clone()));
                }
                let mean = x2.mean_axis(Axis(0)).expect("non-empty");
                let var = (&x2 - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
                let unbiased = &var * (n as f64 / (n - 1) as f64);
                let m = self.momentum;
                self.running_mean.value = &self.running_mean.value * (1.0 - m) + &(&mean * m).into_dyn();
                self.running_var.value = &self.running_var.value * (1.0 - m) + &(&unbiased * m).into_dyn();
                let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
                (mean, inv_std)
            }
            Mode::Eval => self.eval_stats(),
        };
        let (xhat, y) = self.normalize(&x2, &mean, &inv_std);
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train: mode == Mode::Train,
            b,
            t,
        });
        Ok(to_3d(y, b, t))
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| NnError::NoCache(self.gamma.name.clone()))?;
        let g2 = to_2d(grad_out);
        self.gamma.grad += &(&g2 * &cache.xhat).sum_axis(Axis(0)).into_dyn();
        self.beta.grad += &g2.sum_axis(Axis(0)).into_dyn();
        let dxhat = &g2 * &view1(&self.gamma);
        let dx = if cache.train {
            let n = dxhat.nrows() as f64;
            let sum_d = dxhat.sum_axis(Axis(0));
            let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
            let inner = &dxhat * n - &sum_d - &(&cache.xhat * &sum_dx);
            inner * &(&cache.inv_std / n)
        } else {
            dxhat * &cache.inv_std
        };
        Ok(to_3d(dx, cache.b, cache.t))
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        self.check(x)?;
        let (b, t, _) = x.dim();
        let (mean, inv_std) = self.eval_stats();
        let (_, y) = self.normalize(&to_2d(x), &mean, &inv_std);
        Ok(to_3d(y, b, t))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// Per-channel 1-d convolution over time with zero padding `(K-1)/2`.
/// `y[t] = bias + sum_j k[j] * x[t + j - (K-1)/2]`.
#[derive(Clone)]
pub struct DepthwiseConv {
    pub kernel: Param,
    pub bias: Param,
    cache: Option<Tensor3>,
}

impl DepthwiseConv {
    pub fn new(name: &str, kernel_size: usize, channels: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        if kernel_size % 2 == 0 {
            return Err(NnError::Config(format!("{name}: kernel size {kernel_size} must be odd")));
        }
        let bound = 1.0 / (kernel_size as f64).sqrt();
        Ok(DepthwiseConv {
            kernel: Param::new(format!("{name}.kernel"), uniform(rng, &[kernel_size, channels], bound)),
            bias: Param::new(format!("{name}.bias"), uniform(rng, &[channels], bound)),
            cache: None,
        })
    }

    pub fn from_parts(name: &str, kernel: Array2<f64>, bias: Array1<f64>) -> Result<Self, NnError> {
        if kernel.nrows() % 2 == 0 {
            return Err(NnError::Config(format!(
                "{name}: kernel size {} must be odd",
                kernel.nrows()
            )));
        }
        Ok(DepthwiseConv {
            kernel: Param::new(format!("{name}.kernel"), kernel.into_dyn()),
            bias: Param::new(format!("{name}.bias"), bias.into_dyn()),
            cache: None,
        })
    }

    fn compute(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        let k = view2(&self.kernel);
        let bias = view1(&self.bias);
        let (ks, c) = k.dim();
        let (b, t, xc) = x.dim();
        if xc != c {
            return Err(NnError::shape(
                &self.kernel.name,
                format!("input has {xc} channels, kernel expects {c}"),
            ));
        }
        let pad = (ks - 1) / 2;
        let mut y = Array3::zeros((b, t, c));
        for bi in 0..b {
            for ti in 0..t {
                let mut row = y.slice_mut(s![bi, ti, ..]);
                row.assign(&bias);
                for j in 0..ks {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    Zip::from(&mut row)
                        .and(k.row(j))
                        .and(x.slice(s![bi, src as usize, ..]))
                        .for_each(|o, &w, &v| *o += w * v);
                }
            }
        }
        Ok(y)
    }
}

impl Layer for DepthwiseConv {
    fn forward(&mut self, x: &Tensor3, _mode: Mode) -> Result<Tensor3, NnError> {
        let y = self.compute(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| NnError::NoCache(self.kernel.name.clone()))?;
        let (b, t, c) = x.dim();
        let k = view2(&self.kernel).to_owned();
        let ks = k.nrows();
        let pad = (ks - 1) / 2;
        let mut dk = Array2::<f64>::zeros((ks, c));
        let mut dx = Array3::<f64>::zeros((b, t, c));
        for bi in 0..b {
            for ti in 0..t {
                let g = grad_out.slice(s![bi, ti, ..]);
                for j in 0..ks {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    Zip::from(dk.row_mut(j))
                        .and(&g)
                        .and(x.slice(s![bi, src, ..]))
                        .for_each(|d, &gv, &xv| *d += gv * xv);
                    Zip::from(dx.slice_mut(s![bi, src, ..]))
                        .and(&g)
                        .and(k.row(j))
                        .for_each(|d, &gv, &kv| *d += gv * kv);
                }
            }
        }
        self.kernel.grad += &dk.into_dyn();
        self.bias.grad += &grad_out.sum_axis(Axis(0)).sum_axis(Axis(0)).into_dyn();
        Ok(dx)
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        self.compute(x)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.kernel, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.kernel, &mut self.bias]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Default)]
pub struct Relu {
    cache: Option<Tensor3>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor3, _mode: Mode) -> Result<Tensor3, NnError> {
        let y = x.mapv(|v| v.max(0.0));
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        let x = self.cache.take().ok_or_else(|| NnError::NoCache("relu".into()))?;
        let mut g = grad_out.clone();
        Zip::from(&mut g).and(&x).for_each(|g, &x| {
            if x <= 0.0 {
                *g = 0.0;
            }
        });
        Ok(g)
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        Ok(x.mapv(|v| v.max(0.0)))
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// Learned additive position table. Sequences longer than the table reuse
/// its last row.
#[derive(Clone)]
pub struct PositionalEmbedding {
    pub table: Param,
    cache: Option<(usize, usize)>,
}

impl PositionalEmbedding {
    pub fn new(name: &str, max_len: usize, dim: usize, rng: &mut impl Rng) -> Self {
        PositionalEmbedding {
            table: Param::new(format!("{name}.table"), uniform(rng, &[max_len, dim], 0.02)),
            cache: None,
        }
    }

    fn compute(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        let table = view2(&self.table);
        let (len, dim) = table.dim();
        let (_, t, c) = x.dim();
        if c != dim {
            return Err(NnError::shape(&self.table.name, format!("input has {c} channels, table has {dim}")));
        }
        let mut y = x.clone();
        for ti in 0..t {
            let row = table.row(ti.min(len - 1));
            y.slice_mut(s![.., ti, ..]).zip_mut_with(&row, |o, &p| *o += p);
        }
        Ok(y)
    }
}

impl Layer for PositionalEmbedding {
    fn forward(&mut self, x: &Tensor3, _mode: Mode) -> Result<Tensor3, NnError> {
        let y = self.compute(x)?;
        self.cache = Some((x.dim().0, x.dim().1));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        let (_, t) = self
            .cache
            .take()
            .ok_or_else(|| NnError::NoCache(self.table.name.clone()))?;
        let len = self.table.value.shape()[0];
        let mut grad = self.table.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d");
        for ti in 0..t {
            let g = grad_out.slice(s![.., ti, ..]).sum_axis(Axis(0));
            let mut row = grad.row_mut(ti.min(len - 1));
            row += &g;
        }
        Ok(grad_out.clone())
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        self.compute(x)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.table]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.table]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone)]
struct AttnCache {
    x: Tensor3,
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    attn: Vec<Vec<Array2<f64>>>,
    o: Vec<Array2<f64>>,
}

/// Scaled dot-product self-attention with `heads` heads, no projection
/// biases, and a residual connection: `y = x + concat(heads) Wo`.
#[derive(Clone)]
pub struct MultiHeadSelfAttention {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    heads: usize,
    cache: Option<AttnCache>,
    last_attention: Option<Vec<Vec<Array2<f64>>>>,
}

fn softmax_in_place(mut m: ndarray::ArrayViewMut2<'_, f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl MultiHeadSelfAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::Config(format!(
                "{name}: model width {dim} is not divisible by {heads} heads"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut mk = |suffix: &str| Param::new(format!("{name}.{suffix}"), uniform(rng, &[dim, dim], bound));
        Ok(MultiHeadSelfAttention {
            wq: mk("wq"),
            wk: mk("wk"),
            wv: mk("wv"),
            wo: mk("wo"),
            heads,
            cache: None,
            last_attention: None,
        })
    }

    pub fn from_parts(
        name: &str,
        heads: usize,
        [wq, wk, wv, wo]: [Array2<f64>; 4],
    ) -> Result<Self, NnError> {
        let dim = wq.nrows();
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::Config(format!(
                "{name}: model width {dim} is not divisible by {heads} heads"
            )));
        }
        let p = |suffix: &str, w: Array2<f64>| Param::new(format!("{name}.{suffix}"), w.into_dyn());
        Ok(MultiHeadSelfAttention {
            wq: p("wq", wq),
            wk: p("wk", wk),
            wv: p("wv", wv),
            wo: p("wo", wo),
            heads,
            cache: None,
            last_attention: None,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.wq.value.shape()[0]
    }

    /// Attention weights `[batch][head]` (each `[T, T]`) from the most
    /// recent [`Layer::forward`].
    pub fn last_attention(&self) -> Option<&[Vec<Array2<f64>>]> {
        self.last_attention.as_deref()
    }

    fn compute(&self, x: &Tensor3) -> Result<(Tensor3, AttnCache), NnError> {
        let (b, t, d) = x.dim();
        if d != self.dim() {
            return Err(NnError::shape(&self.wq.name, format!("input width {d}, expected {}", self.dim())));
        }
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (wq, wk, wv, wo) = (view2(&self.wq), view2(&self.wk), view2(&self.wv), view2(&self.wo));
        let mut y = x.clone();
        let mut cache = AttnCache {
            x: x.clone(),
            q: Vec::with_capacity(b),
            k: Vec::with_capacity(b),
            v: Vec::with_capacity(b),
            attn: Vec::with_capacity(b),
            o: Vec::with_capacity(b),
        };
        for bi in 0..b {
            let xb = x.slice(s![bi, .., ..]);
            let q = xb.dot(&wq);
            let k = xb.dot(&wk);
            let v = xb.dot(&wv);
            let mut o = Array2::<f64>::zeros((t, d));
            let mut attn_b = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_in_place(a.view_mut());
                o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
                attn_b.push(a);
            }
            let out = o.dot(&wo);
            y.slice_mut(s![bi, .., ..]).zip_mut_with(&out, |yv, &ov| *yv += ov);
            cache.q.push(q);
            cache.k.push(k);
            cache.v.push(v);
            cache.attn.push(attn_b);
            cache.o.push(o);
        }
        Ok((y, cache))
    }
}

impl Layer for MultiHeadSelfAttention {
    fn forward(&mut self, x: &Tensor3, _mode: Mode) -> Result<Tensor3, NnError> {
        let (y, cache) = self.compute(x)?;
        self.last_attention = Some(cache.attn.clone());
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| NnError::NoCache(self.wq.name.clone()))?;
        let (b, t, d) = cache.x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let wq = view2(&self.wq).to_owned();
        let wk = view2(&self.wk).to_owned();
        let wv = view2(&self.wv).to_owned();
        let wo = view2(&self.wo).to_owned();
        let mut dwq = Array2::<f64>::zeros((d, d));
        let mut dwk = Array2::<f64>::zeros((d, d));
        let mut dwv = Array2::<f64>::zeros((d, d));
        let mut dwo = Array2::<f64>::zeros((d, d));
        let mut dx = grad_out.clone();
        for bi in 0..b {
            let g = grad_out.slice(s![bi, .., ..]);
            let xb = cache.x.slice(s![bi, .., ..]);
            dwo += &cache.o[bi].t().dot(&g);
            let d_o = g.dot(&wo.t());
            let mut dq = Array2::<f64>::zeros((t, d));
            let mut dk = Array2::<f64>::zeros((t, d));
            let mut dv = Array2::<f64>::zeros((t, d));
            for h in 0..self.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let a = &cache.attn[bi][h];
                let doh = d_o.slice(cols);
                let da = doh.dot(&cache.v[bi].slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&doh));
                let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (a * &(&da - &row_dot)) * scale;
                dq.slice_mut(cols).assign(&ds.dot(&cache.k[bi].slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&cache.q[bi].slice(cols)));
            }
            dwq += &xb.t().dot(&dq);
            dwk += &xb.t().dot(&dk);
            dwv += &xb.t().dot(&dv);
            let dxb = dq.dot(&wq.t()) + dk.dot(&wk.t()) + dv.dot(&wv.t());
            dx.slice_mut(s![bi, .., ..]).zip_mut_with(&dxb, |o, &v| *o += v);
        }
        self.wq.grad += &dwq.into_dyn();
        self.wk.grad += &dwk.into_dyn();
        self.wv.grad += &dwv.into_dyn();
        self.wo.grad += &dwo.into_dyn();
        Ok(dx)
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        Ok(self.compute(x)?.0)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// Inverted dropout. The mask is a pure function of `seed`, so repeated
/// forward passes with the same seed drop the same elements.
#[derive(Clone)]
pub struct Dropout {
    p: f64,
    seed: u64,
    mask: Option<Tensor3>,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Dropout { p, seed, mask: None })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: &Tensor3, mode: Mode) -> Result<Tensor3, NnError> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        let mask = Tensor3::from_shape_simple_fn(x.raw_dim(), || {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        let y = x * &mask;
        self.mask = Some(mask);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        Ok(match self.mask.take() {
            Some(mask) => grad_out * &mask,
            None => grad_out.clone(),
        })
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        Ok(x.clone())
    }

    fn reseed(&mut self, seed: u64) {
        self.seed = seed;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// Mean over the time axis: `[B, T, C] -> [B, 1, C]`.
#[derive(Clone, Default)]
pub struct MeanPool {
    len: Option<usize>,
}

impl MeanPool {
    pub fn new() -> Self {
        MeanPool::default()
    }
}

impl Layer for MeanPool {
    fn forward(&mut self, x: &Tensor3, _mode: Mode) -> Result<Tensor3, NnError> {
        let y = self.infer(x)?;
        self.len = Some(x.dim().1);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        let t = self.len.take().ok_or_else(|| NnError::NoCache("mean_pool".into()))?;
        let (b, _, c) = grad_out.dim();
        let scaled = grad_out / t as f64;
        Ok(scaled
            .broadcast((b, t, c))
            .expect("broadcast over time")
            .to_owned())
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        if x.dim().1 == 0 {
            return Err(NnError::shape("mean_pool", "empty time axis"));
        }
        Ok(x.mean_axis(Axis(1)).expect("non-empty").insert_axis(Axis(1)))
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor3, mode: Mode) -> Result<Tensor3, NnError> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn reseed(&mut self, seed: u64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.reseed(seed.wrapping_add(i as u64));
        }
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}
