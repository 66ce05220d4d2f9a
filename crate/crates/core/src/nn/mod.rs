//! Layer vocabulary and fixed feed-forward networks.
//!
//! A [`NetworkSpec`] is an ordered list of layers applied to a single input
//! of a declared shape. Inputs may be batched along a leading dimension; all
//! layers act per sample (LayerNorm normalizes each sample's features).
//! Backward passes are written out per layer and composed in reverse order.

mod arch;
pub mod init;
pub(crate) mod kernels;

pub use arch::{build_network, ArchDims, EnvFamily, HeadKind};
pub use init::{lecun_init, sparse_init};

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Array, Component, ParamTree};
use kernels::{axpy, dot, gemm, MatRef};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output has the input's spatial size; borders mirror interior cells.
    SameReflect,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    Dense {
        out_dim: usize,
        bias: bool,
    },
    LayerNorm,
    LeakyRelu {
        slope: f64,
    },
}

impl LayerSpec {
    pub fn conv(channels: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        LayerSpec::Conv {
            channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding,
        }
    }

    pub fn dense(out_dim: usize) -> Self {
        LayerSpec::Dense { out_dim, bias: true }
    }

    pub fn dense_no_bias(out_dim: usize) -> Self {
        LayerSpec::Dense {
            out_dim,
            bias: false,
        }
    }

    pub fn leaky_relu() -> Self {
        LayerSpec::LeakyRelu { slope: LEAKY_SLOPE }
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::LayerNorm => "layernorm",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
        }
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "conv({channels}, {}x{}, stride {}x{}, {:?})",
                kernel.0, kernel.1, stride.0, stride.1, padding
            ),
            LayerSpec::Dense { out_dim, bias } => {
                write!(f, "dense({out_dim}{})", if *bias { "" } else { ", no bias" })
            }
            LayerSpec::LayerNorm => f.write_str("layernorm"),
            LayerSpec::LeakyRelu { slope } => write!(f, "leaky_relu({slope})"),
        }
    }
}

/// Parameter-free layer normalization of one vector.
pub fn layernorm(x: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    layernorm_into(x, eps, &mut out);
    out
}

fn layernorm_into(x: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

#[derive(Clone, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_h: usize,
    pad_w: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn hp(&self) -> usize {
        self.h + 2 * self.pad_h
    }
    fn wp(&self) -> usize {
        self.w + 2 * self.pad_w
    }
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn out_spatial(&self) -> usize {
        self.h_out * self.w_out
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

#[derive(Clone, Debug)]
enum Resolved {
    Conv(ConvGeom),
    Dense {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    LayerNorm {
        n: usize,
    },
    LeakyRelu {
        slope: f64,
    },
}

#[derive(Clone, Debug)]
enum Cache {
    Conv { patches: Vec<f64> },
    Dense { input: Vec<f64> },
    LayerNorm { output: Vec<f64>, inv_std: Vec<f64> },
    LeakyRelu { input: Vec<f64> },
}

/// Intermediate values recorded by [`NetworkSpec::forward_cached`].
#[derive(Clone, Debug)]
pub struct Tape {
    batch: usize,
    caches: Vec<Cache>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// A fixed stack of layers with a declared per-sample input shape.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    resolved: Vec<Resolved>,
    shapes: Vec<Vec<usize>>,
}

impl PartialEq for NetworkSpec {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl NetworkSpec {
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                layer: "input".into(),
                expected: vec![],
                got: input_shape.to_vec(),
            });
        }
        let mut shapes = vec![input_shape.to_vec()];
        let mut resolved = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let cur = shapes.last().expect("non-empty");
            let n: usize = cur.iter().product();
            let name = layer_name(i, layer);
            let (res, out) = match *layer {
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.len() != 3 {
                        return Err(Error::ShapeMismatch {
                            layer: name,
                            expected: vec![0, 0, 0],
                            got: cur.clone(),
                        });
                    }
                    let (c_in, h, w) = (cur[0], cur[1], cur[2]);
                    let (kh, kw) = kernel;
                    let (sh, sw) = stride;
                    let (pad_h, pad_w) = match padding {
                        Padding::Valid => (0, 0),
                        Padding::SameReflect => {
                            if kh % 2 == 0 || kw % 2 == 0 || sh != 1 || sw != 1 {
                                return Err(Error::ShapeMismatch {
                                    layer: name,
                                    expected: vec![1, 1],
                                    got: vec![kh, kw],
                                });
                            }
                            (kh / 2, kw / 2)
                        }
                    };
                    if kh == 0 || kw == 0 || sh == 0 || sw == 0 || channels == 0 {
                        return Err(Error::ShapeMismatch {
                            layer: name,
                            expected: vec![1, 1],
                            got: vec![kh, kw],
                        });
                    }
                    if h + 2 * pad_h < kh || w + 2 * pad_w < kw || pad_h >= h || pad_w >= w {
                        return Err(Error::ShapeMismatch {
                            layer: name,
                            expected: vec![c_in, kh, kw],
                            got: cur.clone(),
                        });
                    }
                    let h_out = (h + 2 * pad_h - kh) / sh + 1;
                    let w_out = (w + 2 * pad_w - kw) / sw + 1;
                    let g = ConvGeom {
                        c_in,
                        h,
                        w,
                        c_out: channels,
                        kh,
                        kw,
                        sh,
                        sw,
                        pad_h,
                        pad_w,
                        h_out,
                        w_out,
                    };
                    (Resolved::Conv(g), vec![channels, h_out, w_out])
                }
                LayerSpec::Dense { out_dim, bias } => {
                    if out_dim == 0 {
                        return Err(Error::ShapeMismatch {
                            layer: name,
                            expected: vec![1],
                            got: vec![0],
                        });
                    }
                    (
                        Resolved::Dense {
                            in_dim: n,
                            out_dim,
                            bias,
                        },
                        vec![out_dim],
                    )
                }
                LayerSpec::LayerNorm => (Resolved::LayerNorm { n }, cur.clone()),
                LayerSpec::LeakyRelu { slope } => (Resolved::LeakyRelu { slope }, cur.clone()),
            };
            resolved.push(res);
            shapes.push(out);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            resolved,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Shape after each layer; index 0 is the input shape.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// `(path, shape)` of every parameter, in flatten order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (layer, res)) in self.layers.iter().zip(&self.resolved).enumerate() {
            match res {
                Resolved::Conv(g) => {
                    out.push((weight_path(i, layer), vec![g.c_out, g.c_in, g.kh, g.kw]));
                    out.push((bias_path(i, layer), vec![g.c_out]));
                }
                Resolved::Dense {
                    in_dim,
                    out_dim,
                    bias,
                } => {
                    out.push((weight_path(i, layer), vec![*out_dim, *in_dim]));
                    if *bias {
                        out.push((bias_path(i, layer), vec![*out_dim]));
                    }
                }
                _ => {}
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn zero_params(&self, component: Component) -> ParamTree {
        let mut t = ParamTree::new(component);
        for (p, s) in self.param_shapes() {
            t.insert(p, Array::zeros(&s)).expect("unique paths");
        }
        t
    }

    /// Sparse LeCun initialization layer by layer; biases start at zero.
    pub fn init_params<R: Rng + ?Sized>(
        &self,
        component: Component,
        sparsity: f64,
        rng: &mut R,
    ) -> ParamTree {
        let mut t = self.zero_params(component);
        for (i, (layer, res)) in self.layers.iter().zip(&self.resolved).enumerate() {
            let (fan_out, fan_in) = match res {
                Resolved::Conv(g) => (g.c_out, g.patch_len()),
                Resolved::Dense {
                    in_dim, out_dim, ..
                } => (*out_dim, *in_dim),
                _ => continue,
            };
            let w = t.get_mut(&weight_path(i, layer)).expect("weight entry");
            sparse_init(w.data_mut(), fan_out, fan_in, sparsity, rng);
        }
        t
    }

    fn check_params(&self, params: &ParamTree) -> Result<()> {
        for (path, shape) in self.param_shapes() {
            match params.get(&path) {
                None => return Err(Error::TreeMismatch { path }),
                Some(a) if a.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch {
                        layer: path,
                        expected: shape,
                        got: a.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Evaluate on a single input of exactly the declared shape.
    pub fn forward(&self, params: &ParamTree, input: &Array) -> Result<Array> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: "input".into(),
                expected: self.input_shape.clone(),
                got: input.shape().to_vec(),
            });
        }
        let out = self.forward_batch(params, input.data(), 1)?;
        Array::from_vec(self.output_shape(), out)
    }

    /// Evaluate on `batch` inputs laid out back to back.
    pub fn forward_batch(&self, params: &ParamTree, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.run(params, input, batch, false).map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        params: &ParamTree,
        input: &[f64],
        batch: usize,
    ) -> Result<(Vec<f64>, Tape)> {
        let (y, caches) = self.run(params, input, batch, true)?;
        Ok((y, Tape { batch, caches }))
    }

    fn run(
        &self,
        params: &ParamTree,
        input: &[f64],
        batch: usize,
        record: bool,
    ) -> Result<(Vec<f64>, Vec<Cache>)> {
        if batch == 0 || input.len() != batch * self.input_len() {
            return Err(Error::ShapeMismatch {
                layer: "input".into(),
                expected: std::iter::once(batch).chain(self.input_shape.iter().copied()).collect(),
                got: vec![input.len()],
            });
        }
        self.check_params(params)?;
        let mut caches = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut x = input.to_vec();
        for (i, (layer, res)) in self.layers.iter().zip(&self.resolved).enumerate() {
            let y = match res {
                Resolved::Conv(g) => {
                    let wt = params.get(&weight_path(i, layer)).expect("checked");
                    let b = params.get(&bias_path(i, layer)).expect("checked");
                    let patches = im2col(g, &x, batch);
                    let y = conv_forward(g, wt.data(), b.data(), &patches, batch);
                    if record {
                        caches.push(Cache::Conv { patches });
                    }
                    y
                }
                Resolved::Dense {
                    in_dim,
                    out_dim,
                    bias,
                } => {
                    let wt = params.get(&weight_path(i, layer)).expect("checked");
                    let b = if *bias {
                        Some(params.get(&bias_path(i, layer)).expect("checked").data())
                    } else {
                        None
                    };
                    let y = dense_forward(wt.data(), b, &x, batch, *in_dim, *out_dim);
                    if record {
                        caches.push(Cache::Dense { input: x });
                    }
                    y
                }
                Resolved::LayerNorm { n } => {
                    let mut y = vec![0.0; x.len()];
                    let mut inv_std = Vec::with_capacity(batch);
                    for (xs, ys) in x.chunks_exact(*n).zip(y.chunks_exact_mut(*n)) {
                        inv_std.push(layernorm_into(xs, LAYERNORM_EPS, ys));
                    }
                    if record {
                        caches.push(Cache::LayerNorm {
                            output: y.clone(),
                            inv_std,
                        });
                    }
                    y
                }
                Resolved::LeakyRelu { slope } => {
                    let y: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
                    if record {
                        caches.push(Cache::LeakyRelu { input: x });
                    }
                    y
                }
            };
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite(format!("forward {}", layer_name(i, layer))));
            }
            x = y;
        }
        Ok((x, caches))
    }

    /// Gradient of `sum(upstream * output)` with respect to the parameters
    /// and, if requested, the input. Gradients are summed over the batch.
    pub fn backward(
        &self,
        params: &ParamTree,
        tape: &Tape,
        upstream: &[f64],
        want_input_grad: bool,
    ) -> Result<(ParamTree, Option<Vec<f64>>)> {
        let batch = tape.batch;
        if upstream.len() != batch * self.output_len() {
            return Err(Error::ShapeMismatch {
                layer: "output".into(),
                expected: std::iter::once(batch).chain(self.output_shape().iter().copied()).collect(),
                got: vec![upstream.len()],
            });
        }
        if tape.caches.len() != self.layers.len() {
            return Err(Error::Format {
                what: "tape",
                msg: "recorded for a different network".into(),
            });
        }
        self.check_params(params)?;
        let mut grads = ParamTree::new(params.component());
        let mut dy = upstream.to_vec();
        let first_param_layer = self.layers.iter().position(|l| l.has_params());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            // Nothing upstream of the first parameterized layer needs a gradient.
            let need_dx = want_input_grad || first_param_layer.is_some_and(|f| i > f);
            let dx = match (&self.resolved[i], &tape.caches[i]) {
                (Resolved::Conv(g), Cache::Conv { patches }) => {
                    let wt = params.get(&weight_path(i, layer)).expect("checked");
                    let (dw, db, dx) = conv_backward(g, wt.data(), patches, &dy, batch, need_dx);
                    grads.insert(weight_path(i, layer), Array::from_vec(wt.shape(), dw)?)?;
                    grads.insert(bias_path(i, layer), Array::vector(db))?;
                    dx
                }
                (
                    Resolved::Dense {
                        in_dim,
                        out_dim,
                        bias,
                    },
                    Cache::Dense { input },
                ) => {
                    let wt = params.get(&weight_path(i, layer)).expect("checked");
                    let dw = dense_backward_weight(&dy, input, batch, *in_dim, *out_dim);
                    grads.insert(weight_path(i, layer), Array::from_vec(wt.shape(), dw)?)?;
                    if *bias {
                        let mut gb = vec![0.0; *out_dim];
                        for row in dy.chunks_exact(*out_dim) {
                            axpy(1.0, row, &mut gb);
                        }
                        grads.insert(bias_path(i, layer), Array::vector(gb))?;
                    }
                    if need_dx {
                        Some(dense_backward_input(wt.data(), &dy, batch, *in_dim, *out_dim))
                    } else {
                        None
                    }
                }
                (Resolved::LayerNorm { n }, Cache::LayerNorm { output, inv_std }) => {
                    let mut dx = vec![0.0; dy.len()];
                    let nf = *n as f64;
                    for (((dys, ys), dxs), inv) in dy
                        .chunks_exact(*n)
                        .zip(output.chunks_exact(*n))
                        .zip(dx.chunks_exact_mut(*n))
                        .zip(inv_std)
                    {
                        let mean_dy = dys.iter().sum::<f64>() / nf;
                        let mean_dyy = dot(dys, ys) / nf;
                        for ((d, &g), &y) in dxs.iter_mut().zip(dys).zip(ys) {
                            *d = inv * (g - mean_dy - y * mean_dyy);
                        }
                    }
                    Some(dx)
                }
                (Resolved::LeakyRelu { slope }, Cache::LeakyRelu { input }) => Some(
                    dy.iter()
                        .zip(input)
                        .map(|(&g, &x)| if x > 0.0 { g } else { slope * g })
                        .collect(),
                ),
                _ => {
                    return Err(Error::Format {
                        what: "tape",
                        msg: format!("cache kind mismatch at {}", layer_name(i, layer)),
                    })
                }
            };
            if let Some(dx) = &dx {
                if !dx.iter().all(|v| v.is_finite()) {
                    return Err(Error::non_finite(format!("backward {}", layer_name(i, layer))));
                }
            }
            match dx {
                Some(d) => dy = d,
                None => {
                    dy.clear();
                    break;
                }
            }
        }
        let input_grad = if want_input_grad {
            if self.layers.is_empty() {
                Some(upstream.to_vec())
            } else {
                Some(dy)
            }
        } else {
            None
        };
        Ok((grads, input_grad))
    }

    /// `d sum(upstream * forward(params, input)) / d params` for one input.
    pub fn grad(&self, params: &ParamTree, input: &Array, upstream: &Array) -> Result<ParamTree> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: "input".into(),
                expected: self.input_shape.clone(),
                got: input.shape().to_vec(),
            });
        }
        if upstream.shape() != self.output_shape() {
            return Err(Error::ShapeMismatch {
                layer: "upstream".into(),
                expected: self.output_shape().to_vec(),
                got: upstream.shape().to_vec(),
            });
        }
        let (_, tape) = self.forward_cached(params, input.data(), 1)?;
        Ok(self.backward(params, &tape, upstream.data(), false)?.0)
    }
}

fn layer_name(i: usize, layer: &LayerSpec) -> String {
    format!("l{i:02}_{}", layer.kind())
}

fn weight_path(i: usize, layer: &LayerSpec) -> String {
    format!("{}/weight", layer_name(i, layer))
}

fn bias_path(i: usize, layer: &LayerSpec) -> String {
    format!("{}/bias", layer_name(i, layer))
}

/// Column matrix `[c_in*kh*kw, batch*h_out*w_out]` of (padded) input patches.
fn im2col(g: &ConvGeom, x: &[f64], batch: usize) -> Vec<f64> {
    let (hp, wp) = (g.hp(), g.wp());
    let sample = g.c_in * g.h * g.w;
    let spatial = g.out_spatial();
    let cols = batch * spatial;
    let mut padded = vec![0.0; g.c_in * hp * wp];
    let mut out = vec![0.0; g.patch_len() * cols];
    for b in 0..batch {
        let xs = &x[b * sample..(b + 1) * sample];
        for c in 0..g.c_in {
            for py in 0..hp {
                let sy = reflect(py as isize - g.pad_h as isize, g.h);
                for px in 0..wp {
                    let sx = reflect(px as isize - g.pad_w as isize, g.w);
                    padded[(c * hp + py) * wp + px] = xs[(c * g.h + sy) * g.w + sx];
                }
            }
        }
        for c in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut out[row * cols + b * spatial..row * cols + (b + 1) * spatial];
                    for oy in 0..g.h_out {
                        let py = oy * g.sh + ki;
                        let src = &padded[(c * hp + py) * wp..(c * hp + py + 1) * wp];
                        for ox in 0..g.w_out {
                            dst[oy * g.w_out + ox] = src[ox * g.sw + kj];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_forward(g: &ConvGeom, w: &[f64], bias: &[f64], patches: &[f64], batch: usize) -> Vec<f64> {
    let spatial = g.out_spatial();
    let cols = batch * spatial;
    let mut mat = vec![0.0; g.c_out * cols];
    gemm(
        MatRef::new(w, g.c_out, g.patch_len()),
        MatRef::new(patches, g.patch_len(), cols),
        0.0,
        &mut mat,
    );
    // [c_out, batch, spatial] -> [batch, c_out, spatial]
    let mut y = vec![0.0; batch * g.c_out * spatial];
    for o in 0..g.c_out {
        for b in 0..batch {
            let src = &mat[o * cols + b * spatial..o * cols + (b + 1) * spatial];
            let dst = &mut y[(b * g.c_out + o) * spatial..(b * g.c_out + o + 1) * spatial];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias[o];
            }
        }
    }
    y
}

type ConvGrads = (Vec<f64>, Vec<f64>, Option<Vec<f64>>);

fn conv_backward(
    g: &ConvGeom,
    w: &[f64],
    patches: &[f64],
    dy: &[f64],
    batch: usize,
    need_dx: bool,
) -> ConvGrads {
    let spatial = g.out_spatial();
    let cols = batch * spatial;
    let plen = g.patch_len();
    let mut dmat = vec![0.0; g.c_out * cols];
    for b in 0..batch {
        for o in 0..g.c_out {
            let src = &dy[(b * g.c_out + o) * spatial..(b * g.c_out + o + 1) * spatial];
            dmat[o * cols + b * spatial..o * cols + (b + 1) * spatial].copy_from_slice(src);
        }
    }
    let mut dw = vec![0.0; g.c_out * plen];
    gemm(
        MatRef::new(&dmat, g.c_out, cols),
        MatRef::new(patches, plen, cols).t(),
        0.0,
        &mut dw,
    );
    let db: Vec<f64> = dmat.chunks_exact(cols).map(|r| r.iter().sum()).collect();
    if !need_dx {
        return (dw, db, None);
    }
    let mut dpatches = vec![0.0; plen * cols];
    gemm(
        MatRef::new(w, g.c_out, plen).t(),
        MatRef::new(&dmat, g.c_out, cols),
        0.0,
        &mut dpatches,
    );
    let (hp, wp) = (g.hp(), g.wp());
    let sample = g.c_in * g.h * g.w;
    let mut dx = vec![0.0; batch * sample];
    let mut dpad = vec![0.0; g.c_in * hp * wp];
    for b in 0..batch {
        dpad.fill(0.0);
        for c in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &dpatches[row * cols + b * spatial..row * cols + (b + 1) * spatial];
                    for oy in 0..g.h_out {
                        let py = oy * g.sh + ki;
                        let dst = &mut dpad[(c * hp + py) * wp..(c * hp + py + 1) * wp];
                        for ox in 0..g.w_out {
                            dst[ox * g.sw + kj] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
        let dxs = &mut dx[b * sample..(b + 1) * sample];
        for c in 0..g.c_in {
            for py in 0..hp {
                let sy = reflect(py as isize - g.pad_h as isize, g.h);
                for px in 0..wp {
                    let sx = reflect(px as isize - g.pad_w as isize, g.w);
                    dxs[(c * g.h + sy) * g.w + sx] += dpad[(c * hp + py) * wp + px];
                }
            }
        }
    }
    (dw, db, Some(dx))
}

fn dense_forward(
    w: &[f64],
    bias: Option<&[f64]>,
    x: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * out_dim];
    if batch == 1 {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj = dot(&w[j * in_dim..(j + 1) * in_dim], x);
        }
    } else {
        gemm(
            MatRef::new(x, batch, in_dim),
            MatRef::new(w, out_dim, in_dim).t(),
            0.0,
            &mut y,
        );
    }
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(out_dim) {
            axpy(1.0, b, row);
        }
    }
    y
}

fn dense_backward_weight(dy: &[f64], x: &[f64], batch: usize, in_dim: usize, out_dim: usize) -> Vec<f64> {
    if batch == 1 {
        let mut dw = Vec::with_capacity(out_dim * in_dim);
        for &g in dy {
            if g == 0.0 {
                dw.resize(dw.len() + in_dim, 0.0);
            } else {
                dw.extend(x.iter().map(|xi| g * xi));
            }
        }
        dw
    } else {
        let mut dw = vec![0.0; out_dim * in_dim];
        gemm(
            MatRef::new(dy, batch, out_dim).t(),
            MatRef::new(x, batch, in_dim),
            0.0,
            &mut dw,
        );
        dw
    }
}

fn dense_backward_input(w: &[f64], dy: &[f64], batch: usize, in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut dx = vec![0.0; batch * in_dim];
    if batch == 1 {
        for (j, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &w[j * in_dim..(j + 1) * in_dim], &mut dx);
            }
        }
    } else {
        gemm(
            MatRef::new(dy, batch, out_dim),
            MatRef::new(w, out_dim, in_dim),
            0.0,
            &mut dx,
        );
    }
    dx
}
