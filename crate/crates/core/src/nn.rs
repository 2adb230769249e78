//! Small feed-forward networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector so optimizers, Polyak averaging,
//! checkpoints and finite-difference checks all work on the same layout.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Self::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Convolutional stem over a square HWC grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridStem {
    pub channels: usize,
    pub size: usize,
    pub convs: Vec<ConvSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub grid: Option<GridStem>,
    pub vec_in: usize,
    pub hidden: Vec<usize>,
    pub out: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    in_c: usize,
    in_size: usize,
    out_c: usize,
    out_size: usize,
    kernel: usize,
    stride: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvGeom {
    fn k_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_size * self.out_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DenseGeom {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    convs: Vec<ConvGeom>,
    dense: Vec<DenseGeom>,
    stem_out: usize,
    total: usize,
}

impl Layout {
    fn new(spec: &NetSpec) -> Self {
        let mut off = 0;
        let mut convs = Vec::new();
        let mut stem_out = 0;
        if let Some(g) = &spec.grid {
            let (mut c, mut size) = (g.channels, g.size);
            for cs in &g.convs {
                assert!(size >= cs.kernel && cs.stride > 0, "conv layer does not fit its input");
                let out_size = (size - cs.kernel) / cs.stride + 1;
                let geom = ConvGeom {
                    in_c: c,
                    in_size: size,
                    out_c: cs.out_channels,
                    out_size,
                    kernel: cs.kernel,
                    stride: cs.stride,
                    w_off: off,
                    b_off: off + cs.out_channels * c * cs.kernel * cs.kernel,
                };
                off = geom.b_off + cs.out_channels;
                convs.push(geom);
                c = cs.out_channels;
                size = out_size;
            }
            stem_out = c * size * size;
        }
        let mut dense = Vec::new();
        let mut fan_in = stem_out + spec.vec_in;
        for &h in spec.hidden.iter().chain(std::iter::once(&spec.out)) {
            let g = DenseGeom { fan_in, fan_out: h, w_off: off, b_off: off + h * fan_in };
            off = g.b_off + h;
            dense.push(g);
            fan_in = h;
        }
        Self { convs, dense, stem_out, total: off }
    }
}

/// Inputs for a batch: optional grid rows (HWC-flattened) and vector rows.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    pub grid: Option<ArrayView2<'a, f64>>,
    pub vec: ArrayView2<'a, f64>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Per conv layer, per sample: im2col matrix and post-activation output.
    conv_cols: Vec<Vec<Array2<f64>>>,
    conv_out: Vec<Vec<Array2<f64>>>,
    /// Per dense layer: input and post-activation output.
    dense_in: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetSpec,
    layout: Layout,
    pub params: Vec<f64>,
}

fn im2col(input: ArrayView2<f64>, g: &ConvGeom) -> Array2<f64> {
    // input: (in_size*in_size) x in_c, HWC order.
    let mut col = Array2::zeros((g.positions(), g.k_len()));
    for oy in 0..g.out_size {
        for ox in 0..g.out_size {
            let p = oy * g.out_size + ox;
            let mut k = 0;
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let iy = oy * g.stride + ky;
                    let ix = ox * g.stride + kx;
                    let row = input.row(iy * g.in_size + ix);
                    for c in 0..g.in_c {
                        col[[p, k]] = row[c];
                        k += 1;
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f64>, g: &ConvGeom) -> Array2<f64> {
    let mut out = Array2::zeros((g.in_size * g.in_size, g.in_c));
    for oy in 0..g.out_size {
        for ox in 0..g.out_size {
            let p = oy * g.out_size + ox;
            let mut k = 0;
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let r = (oy * g.stride + ky) * g.in_size + ox * g.stride + kx;
                    for c in 0..g.in_c {
                        out[[r, c]] += dcol[[p, k]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Self {
        let layout = Layout::new(&spec);
        let mut params = vec![0.0; layout.total];
        for g in &layout.convs {
            let bound = 1.0 / (g.k_len() as f64).sqrt();
            for p in &mut params[g.w_off..g.b_off + g.out_c] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        for g in &layout.dense {
            let bound = 1.0 / (g.fan_in as f64).sqrt();
            for p in &mut params[g.w_off..g.b_off + g.fan_out] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Self { spec, layout, params }
    }

    pub fn from_params(spec: NetSpec, params: Vec<f64>) -> Option<Self> {
        let layout = Layout::new(&spec);
        (params.len() == layout.total).then_some(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn stem_features(&self) -> usize {
        self.layout.stem_out
    }

    fn weights(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[off..off + rows * cols]).unwrap()
    }

    pub fn forward(&self, input: NetInput<'_>) -> Forward {
        let batch = input.vec.nrows();
        assert_eq!(input.vec.ncols(), self.spec.vec_in, "vector input width");
        let act = self.spec.activation;
        let mut conv_cols = Vec::with_capacity(self.layout.convs.len());
        let mut conv_out = Vec::with_capacity(self.layout.convs.len());

        let mut features = Array2::zeros((batch, self.layout.stem_out + self.spec.vec_in));
        if let Some(stem) = &self.spec.grid {
            let grid = input.grid.expect("network expects a grid input");
            assert_eq!(grid.ncols(), stem.channels * stem.size * stem.size, "grid input width");
            let mut current: Vec<Array2<f64>> = (0..batch)
                .map(|b| {
                    grid.row(b)
                        .to_owned()
                        .into_shape_with_order((stem.size * stem.size, stem.channels))
                        .unwrap()
                })
                .collect();
            for g in &self.layout.convs {
                let w = self.weights(g.w_off, g.out_c, g.k_len());
                let bias = &self.params[g.b_off..g.b_off + g.out_c];
                let mut cols = Vec::with_capacity(batch);
                let mut outs = Vec::with_capacity(batch);
                for x in &current {
                    let col = im2col(x.view(), g);
                    let mut y = col.dot(&w.t());
                    for mut row in y.rows_mut() {
                        for (v, b) in row.iter_mut().zip(bias) {
                            *v = act.apply(*v + b);
                        }
                    }
                    cols.push(col);
                    outs.push(y);
                }
                conv_cols.push(cols);
                current = outs.clone();
                conv_out.push(outs);
            }
            for (b, x) in current.iter().enumerate() {
                let flat = x.as_slice().unwrap();
                features.slice_mut(s![b, ..self.layout.stem_out]).assign(&ndarray::aview1(flat));
            }
        }
        features.slice_mut(s![.., self.layout.stem_out..]).assign(&input.vec);

        let mut dense_in = Vec::with_capacity(self.layout.dense.len());
        let mut x = features;
        let last = self.layout.dense.len() - 1;
        for (i, g) in self.layout.dense.iter().enumerate() {
            let w = self.weights(g.w_off, g.fan_out, g.fan_in);
            let bias = ndarray::aview1(&self.params[g.b_off..g.b_off + g.fan_out]);
            let mut y = x.dot(&w.t()) + &bias;
            if i < last {
                y.mapv_inplace(|v| act.apply(v));
            }
            dense_in.push(x);
            x = y;
        }
        Forward { conv_cols, conv_out, dense_in, output: x }
    }

    pub fn predict(&self, input: NetInput<'_>) -> Array2<f64> {
        self.forward(input).output
    }

    /// Backpropagates `d_output` through a cached forward pass. Returns the
    /// parameter gradient and the gradient with respect to the vector input.
    pub fn backward(&self, fwd: &Forward, d_output: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let mut grad = vec![0.0; self.layout.total];
        let act = self.spec.activation;
        let last = self.layout.dense.len() - 1;
        let mut dy = d_output.clone();
        for i in (0..self.layout.dense.len()).rev() {
            let g = self.layout.dense[i];
            if i < last {
                // dense_in[i + 1] holds this layer's activated output.
                let out = &fwd.dense_in[i + 1];
                ndarray::Zip::from(&mut dy).and(out).for_each(|d, &y| *d *= act.grad_from_output(y));
            }
            let x = &fwd.dense_in[i];
            let dw = dy.t().dot(x);
            grad[g.w_off..g.b_off].copy_from_slice(dw.as_slice().unwrap());
            let db = dy.sum_axis(Axis(0));
            grad[g.b_off..g.b_off + g.fan_out].copy_from_slice(db.as_slice().unwrap());
            let w = self.weights(g.w_off, g.fan_out, g.fan_in);
            dy = dy.dot(&w);
        }
        let d_vec = dy.slice(s![.., self.layout.stem_out..]).to_owned();

        if !self.layout.convs.is_empty() {
            let batch = dy.nrows();
            let mut d_stem: Vec<Array2<f64>> = {
                let g = self.layout.convs.last().unwrap();
                (0..batch)
                    .map(|b| {
                        dy.slice(s![b, ..self.layout.stem_out])
                            .to_owned()
                            .into_shape_with_order((g.positions(), g.out_c))
                            .unwrap()
                    })
                    .collect()
            };
            for li in (0..self.layout.convs.len()).rev() {
                let g = self.layout.convs[li];
                let w = self.weights(g.w_off, g.out_c, g.k_len());
                let mut dw = Array2::<f64>::zeros((g.out_c, g.k_len()));
                let mut db = vec![0.0; g.out_c];
                let mut next = Vec::with_capacity(if li > 0 { batch } else { 0 });
                for b in 0..batch {
                    let out = &fwd.conv_out[li][b];
                    let mut d = std::mem::take(&mut d_stem[b]);
                    ndarray::Zip::from(&mut d).and(out).for_each(|d, &y| *d *= act.grad_from_output(y));
                    dw += &d.t().dot(&fwd.conv_cols[li][b]);
                    for row in d.rows() {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    if li > 0 {
                        next.push(col2im(&d.dot(&w), &g));
                    }
                }
                grad[g.w_off..g.b_off].copy_from_slice(dw.as_slice().unwrap());
                grad[g.b_off..g.b_off + g.out_c].copy_from_slice(&db);
                d_stem = next;
            }
        }
        (grad, d_vec)
    }

    /// Polyak averaging: `self <- rho * online + (1 - rho) * self`.
    pub fn soft_update_from(&mut self, online: &Network, rho: f64) {
        assert_eq!(self.params.len(), online.params.len());
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = rho * o + (1.0 - rho) * *t;
        }
    }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}
