//! Reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that needs one.
//! Graphs are cheap to build and are thrown away after each step.

use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        /// im2col buffers per sample, kept only when the weight needs a gradient.
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Crop(Var),
    InstanceNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gram(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    SumSquares(Var),
    MeanAbs(Var),
    MeanSqDiffConst(Var, f64),
    LinComb(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or panics if `v` did not require one.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("variable does not require a gradient")
    }
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let spatial = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let spatial = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], add: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    add(t.data_mut());
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable (or differentiated-through) input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds every tensor of a parameter list, in order.
    pub fn bind<'a>(&mut self, tensors: impl IntoIterator<Item = &'a Tensor>, trainable: bool) -> Vec<Var> {
        tensors
            .into_iter()
            .map(|t| {
                if trainable {
                    self.param(t.clone())
                } else {
                    self.constant(t.clone())
                }
            })
            .collect()
    }

    /// 2-D convolution, zero padding, square kernel `[out, in, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, w) = dims4(self.value(input));
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [out, in, k, k]");
        assert_eq!(ws[1], c, "conv expects {} input channels, got {c}", ws[1]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (o, k) = (ws[0], ws[2]);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "input smaller than kernel");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let spatial = ho * wo;
        let keep_cols = self.rg(weight);
        let mut all_cols = if keep_cols {
            vec![0.0; n * ckk * spatial]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0; ckk * spatial];
        let mut out = vec![0.0; n * o * spatial];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            for s in 0..n {
                let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                let cols = if keep_cols {
                    &mut all_cols[s * ckk * spatial..(s + 1) * ckk * spatial]
                } else {
                    &mut scratch[..]
                };
                im2col(xs, c, h, w, k, stride, pad, ho, wo, cols);
                let dst = &mut out[s * o * spatial..(s + 1) * o * spatial];
                gemm(o, ckk, spatial, wt, false, cols, false, dst, 0.0);
            }
            if let Some(b) = bias {
                let bd = self.value(b).data();
                assert_eq!(bd.len(), o, "conv bias length");
                for s in 0..n {
                    for (oc, &bv) in bd.iter().enumerate() {
                        let base = (s * o + oc) * spatial;
                        for v in &mut out[base..base + spatial] {
                            *v += bv;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, o, ho, wo], out).expect("conv output shape");
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols: keep_cols.then_some(all_cols),
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out).expect("pool shape");
        self.push(value, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(plane * ho + oy) * wo + ox] = src[(plane * h + oy / 2) * w + ox / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out).expect("upsample shape");
        self.push(value, Op::Upsample2(x), &[x])
    }

    /// Keeps the top-left `h × w` window of every plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, c, hi, wi) = dims4(self.value(x));
        assert!(h <= hi && w <= wi, "crop {h}x{w} of {hi}x{wi}");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in 0..h {
                let base = (plane * hi + y) * wi;
                out.extend_from_slice(&src[base..base + w]);
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out).expect("crop shape");
        self.push(value, Op::Crop(x), &[x])
    }

    /// Per-sample, per-channel normalization to zero mean and unit (biased) variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let m = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; n * c];
        for plane in 0..n * c {
            let xs = &src[plane * m..(plane + 1) * m];
            let mean = xs.iter().sum::<f64>() / m as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[plane] = is;
            for (o, v) in out[plane * m..(plane + 1) * m].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out).expect("norm shape");
        self.push(value, Op::InstanceNorm { input: x, inv_std }, &[x])
    }

    /// `y[n,c,:,:] = x[n,c,:,:] * scale[n',c] + shift[n',c]`, where `scale` and
    /// `shift` are `[N, C]` or `[1, C]` (broadcast over the batch).
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let m = h * w;
        let ss = self.value(scale).shape().to_vec();
        assert_eq!(ss, self.value(shift).shape(), "scale/shift shapes differ");
        assert!(
            ss.len() == 2 && ss[1] == c && (ss[0] == n || ss[0] == 1),
            "affine parameters {ss:?} do not fit [{n}, {c}]"
        );
        let bcast = ss[0] == 1;
        let src = self.value(x).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut out = vec![0.0; src.len()];
        for s in 0..n {
            for ch in 0..c {
                let pi = if bcast { ch } else { s * c + ch };
                let plane = s * c + ch;
                for i in plane * m..(plane + 1) * m {
                    out[i] = src[i] * sc[pi] + sh[pi];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out).expect("affine shape");
        self.push(value, Op::ChannelAffine { input: x, scale, shift }, &[x, scale, shift])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("add");
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("sub");
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_const(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|v| v + offset);
        self.push(value, Op::AddConst(a), &[a])
    }

    /// Unnormalized Gram matrices `[N, C, C]` of an NCHW feature tensor.
    pub fn gram(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let m = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * c];
        for s in 0..n {
            let f = &src[s * c * m..(s + 1) * c * m];
            gemm(c, m, c, f, false, f, true, &mut out[s * c * c..(s + 1) * c * c], 0.0);
            // mirror the upper triangle so the result is exactly symmetric
            let g = &mut out[s * c * c..(s + 1) * c * c];
            for i in 0..c {
                for j in 0..i {
                    g[i * c + j] = g[j * c + i];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, c], out).expect("gram shape");
        self.push(value, Op::Gram(x), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let m = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / m)
            .collect();
        let value = Tensor::from_vec(&[n, c], out).expect("gap shape");
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    /// `y = x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shapes {xs:?} {ws:?}");
        let (n, o) = (xs[0], ws[0]);
        let mut out = vec![0.0; n * o];
        gemm(n, xs[1], o, self.value(input).data(), false, self.value(weight).data(), true, &mut out, 0.0);
        let b = self.value(bias).data();
        assert_eq!(b.len(), o, "linear bias length");
        for row in out.chunks_mut(o) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::from_vec(&[n, o], out).expect("linear shape");
        self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    /// Columns `start..start+len` of a `[N, K]` matrix.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Var {
        let s = self.value(input).shape().to_vec();
        assert!(s.len() == 2 && start + len <= s[1], "slice {start}+{len} of {s:?}");
        let out = self
            .value(input)
            .data()
            .chunks(s[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::from_vec(&[s[0], len], out).expect("slice shape");
        self.push(value, Op::SliceCols { input, start }, &[input])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(v), Op::SumSquares(x), &[x])
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let v = d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(v), Op::MeanAbs(x), &[x])
    }

    /// `mean((x - target)²)`.
    pub fn mean_sq_diff_const(&mut self, x: Var, target: f64) -> Var {
        let d = self.value(x).data();
        let v = d.iter().map(|v| (v - target) * (v - target)).sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(v), Op::MeanSqDiffConst(x, target), &[x])
    }

    /// Weighted sum of scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(t, c)| c * self.value(t).item()).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(v), Op::LinComb(terms.to_vec()), &inputs)
    }

    /// Gradients of the scalar `loss` with respect to every node requiring one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => {
                let xv = self.value(*input);
                let (n, c, h, w) = dims4(xv);
                let ws = self.value(*weight).shape();
                let (o, k) = (ws[0], ws[2]);
                let (_, _, ho, wo) = dims4(&node.value);
                let spatial = ho * wo;
                let ckk = c * k * k;
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    accumulate(&mut grads[b.0], &[o], |db| {
                        for s in 0..n {
                            for (oc, g) in db.iter_mut().enumerate() {
                                let base = (s * o + oc) * spatial;
                                *g += dyd[base..base + spatial].iter().sum::<f64>();
                            }
                        }
                    });
                }
                if self.rg(*weight) {
                    let cols = cols.as_ref().expect("cols kept for trainable weight");
                    accumulate(&mut grads[weight.0], ws, |dw| {
                        for s in 0..n {
                            gemm(
                                o,
                                spatial,
                                ckk,
                                &dyd[s * o * spatial..(s + 1) * o * spatial],
                                false,
                                &cols[s * ckk * spatial..(s + 1) * ckk * spatial],
                                true,
                                dw,
                                1.0,
                            );
                        }
                    });
                }
                if self.rg(*input) {
                    let wt = self.value(*weight).data();
                    let mut dcols = vec![0.0; ckk * spatial];
                    accumulate(&mut grads[input.0], xv.shape(), |dx| {
                        for s in 0..n {
                            gemm(
                                ckk,
                                o,
                                spatial,
                                wt,
                                true,
                                &dyd[s * o * spatial..(s + 1) * o * spatial],
                                false,
                                &mut dcols,
                                0.0,
                            );
                            let dxs = &mut dx[s * c * h * w..(s + 1) * c * h * w];
                            col2im(&dcols, c, h, w, k, *stride, *pad, ho, wo, dxs);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], xv.shape(), |dx| {
                    for ((g, &v), &d) in dx.iter_mut().zip(xv.data()).zip(dyd) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], xv.shape(), |dx| {
                    for ((g, &v), &d) in dx.iter_mut().zip(xv.data()).zip(dyd) {
                        *g += if v > 0.0 { d } else { slope * d };
                    }
                });
            }
            Op::Tanh(x) => {
                accumulate(&mut grads[x.0], node.value.shape(), |dx| {
                    for ((g, &y), &d) in dx.iter_mut().zip(node.value.data()).zip(dyd) {
                        *g += d * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                accumulate(&mut grads[x.0], node.value.shape(), |dx| {
                    for ((g, &y), &d) in dx.iter_mut().zip(node.value.data()).zip(dyd) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => {
                accumulate(&mut grads[input.0], self.value(*input).shape(), |dx| {
                    for (&src, &d) in argmax.iter().zip(dyd) {
                        dx[src] += d;
                    }
                });
            }
            Op::Upsample2(x) => {
                let (_, _, h, w) = dims4(self.value(*x));
                let (ho, wo) = (2 * h, 2 * w);
                accumulate(&mut grads[x.0], self.value(*x).shape(), |dx| {
                    for (plane, dyp) in dyd.chunks(ho * wo).enumerate() {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                dx[(plane * h + oy / 2) * w + ox / 2] += dyp[oy * wo + ox];
                            }
                        }
                    }
                });
            }
            Op::Crop(x) => {
                let (_, _, hi, wi) = dims4(self.value(*x));
                let (_, _, h, w) = dims4(&node.value);
                accumulate(&mut grads[x.0], self.value(*x).shape(), |dx| {
                    for (plane, dyp) in dyd.chunks(h * w).enumerate() {
                        for y in 0..h {
                            let base = (plane * hi + y) * wi;
                            for (g, d) in dx[base..base + w].iter_mut().zip(&dyp[y * w..(y + 1) * w]) {
                                *g += d;
                            }
                        }
                    }
                });
            }
            Op::InstanceNorm { input, inv_std } => {
                let (_, _, h, w) = dims4(&node.value);
                let m = h * w;
                let xhat = node.value.data();
                accumulate(&mut grads[input.0], node.value.shape(), |dx| {
                    for (plane, &is) in inv_std.iter().enumerate() {
                        let r = plane * m..(plane + 1) * m;
                        let dyp = &dyd[r.clone()];
                        let xh = &xhat[r.clone()];
                        let sum_dy: f64 = dyp.iter().sum();
                        let sum_dy_xh: f64 = dyp.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let mf = m as f64;
                        for ((g, &d), &xv) in dx[r].iter_mut().zip(dyp).zip(xh) {
                            *g += is / mf * (mf * d - sum_dy - xv * sum_dy_xh);
                        }
                    }
                });
            }
            Op::ChannelAffine { input, scale, shift } => {
                let xv = self.value(*input);
                let (n, c, h, w) = dims4(xv);
                let m = h * w;
                let sv = self.value(*scale);
                let bcast = sv.shape()[0] == 1;
                let pidx = |s: usize, ch: usize| if bcast { ch } else { s * c + ch };
                if self.rg(*input) {
                    accumulate(&mut grads[input.0], xv.shape(), |dx| {
                        for s in 0..n {
                            for ch in 0..c {
                                let k = sv.data()[pidx(s, ch)];
                                let plane = s * c + ch;
                                for i in plane * m..(plane + 1) * m {
                                    dx[i] += dyd[i] * k;
                                }
                            }
                        }
                    });
                }
                if self.rg(*scale) {
                    accumulate(&mut grads[scale.0], sv.shape(), |ds| {
                        for s in 0..n {
                            for ch in 0..c {
                                let plane = s * c + ch;
                                let r = plane * m..(plane + 1) * m;
                                ds[pidx(s, ch)] +=
                                    dyd[r.clone()].iter().zip(&xv.data()[r]).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    });
                }
                if self.rg(*shift) {
                    accumulate(&mut grads[shift.0], sv.shape(), |db| {
                        for s in 0..n {
                            for ch in 0..c {
                                let plane = s * c + ch;
                                db[pidx(s, ch)] += dyd[plane * m..(plane + 1) * m].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], dy.shape(), |d| {
                            d.iter_mut().zip(dyd).for_each(|(g, x)| *g += x)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], dy.shape(), |d| {
                        d.iter_mut().zip(dyd).for_each(|(g, x)| *g += x)
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], dy.shape(), |d| {
                        d.iter_mut().zip(dyd).for_each(|(g, x)| *g -= x)
                    });
                }
            }
            Op::Scale(a, f) => {
                accumulate(&mut grads[a.0], dy.shape(), |d| {
                    d.iter_mut().zip(dyd).for_each(|(g, x)| *g += f * x)
                });
            }
            Op::AddConst(a) => {
                accumulate(&mut grads[a.0], dy.shape(), |d| {
                    d.iter_mut().zip(dyd).for_each(|(g, x)| *g += x)
                });
            }
            Op::Gram(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = dims4(xv);
                let m = h * w;
                let mut sym = vec![0.0; c * c];
                accumulate(&mut grads[x.0], xv.shape(), |dx| {
                    for s in 0..n {
                        let dg = &dyd[s * c * c..(s + 1) * c * c];
                        for i in 0..c {
                            for j in 0..c {
                                sym[i * c + j] = dg[i * c + j] + dg[j * c + i];
                            }
                        }
                        let f = &xv.data()[s * c * m..(s + 1) * c * m];
                        gemm(c, c, m, &sym, false, f, false, &mut dx[s * c * m..(s + 1) * c * m], 1.0);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = dims4(self.value(*x));
                let m = h * w;
                accumulate(&mut grads[x.0], self.value(*x).shape(), |dx| {
                    for (plane, &d) in dyd.iter().enumerate() {
                        for g in &mut dx[plane * m..(plane + 1) * m] {
                            *g += d / m as f64;
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.value(*input).shape().to_vec();
                let ws = self.value(*weight).shape().to_vec();
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                if self.rg(*input) {
                    let wt = self.value(*weight).data();
                    accumulate(&mut grads[input.0], &xs, |dx| gemm(n, o, i, dyd, false, wt, false, dx, 1.0));
                }
                if self.rg(*weight) {
                    let xd = self.value(*input).data();
                    accumulate(&mut grads[weight.0], &ws, |dw| gemm(o, n, i, dyd, true, xd, false, dw, 1.0));
                }
                if self.rg(*bias) {
                    accumulate(&mut grads[bias.0], &[o], |db| {
                        for row in dyd.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(g, x)| *g += x);
                        }
                    });
                }
            }
            Op::SliceCols { input, start } => {
                let s = self.value(*input).shape().to_vec();
                let len = node.value.shape()[1];
                accumulate(&mut grads[input.0], &s, |dx| {
                    for (r, row) in dyd.chunks(len).enumerate() {
                        for (j, &d) in row.iter().enumerate() {
                            dx[r * s[1] + start + j] += d;
                        }
                    }
                });
            }
            Op::SumSquares(x) => {
                let g0 = dyd[0];
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], xv.shape(), |dx| {
                    dx.iter_mut().zip(xv.data()).for_each(|(g, v)| *g += 2.0 * g0 * v)
                });
            }
            Op::MeanAbs(x) => {
                let xv = self.value(*x);
                let k = dyd[0] / xv.numel() as f64;
                accumulate(&mut grads[x.0], xv.shape(), |dx| {
                    dx.iter_mut().zip(xv.data()).for_each(|(g, v)| {
                        if *v > 0.0 {
                            *g += k
                        } else if *v < 0.0 {
                            *g -= k
                        }
                    })
                });
            }
            Op::MeanSqDiffConst(x, t) => {
                let xv = self.value(*x);
                let k = 2.0 * dyd[0] / xv.numel() as f64;
                accumulate(&mut grads[x.0], xv.shape(), |dx| {
                    dx.iter_mut().zip(xv.data()).for_each(|(g, v)| *g += k * (v - t))
                });
            }
            Op::LinComb(terms) => {
                for &(t, c) in terms {
                    if self.rg(t) {
                        let shape = self.value(t).shape().to_vec();
                        accumulate(&mut grads[t.0], &shape, |d| d[0] += c * dyd[0]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(leaf) for every leaf element.
    fn check(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.wrt(vars[li]).clone();
            for e in 0..leaf.numel() {
                let eval = |delta: f64| {
                    let mut ls = leaves.clone();
                    ls[li].data_mut()[e] += delta;
                    let mut g = Graph::new();
                    let vs: Vec<Var> = ls.iter().map(|t| g.constant(t.clone())).collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "leaf {li} elem {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 1, 4)] {
            let x = rand_tensor(&mut rng, &[2, 2, 6, 5]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            check(vec![x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                g.sum_squares(y)
            });
        }
    }

    #[test]
    fn pointwise_and_pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        check(vec![x.clone()], |g, v| {
            let a = g.tanh(v[0]);
            let b = g.max_pool2(a);
            let c = g.upsample2(b);
            let c = g.crop(c, 3, 4);
            let c = g.upsample2(c);
            let c = g.crop(c, 4, 4);
            let d = g.sigmoid(c);
            let e = g.leaky_relu(v[0], 0.2);
            let f = g.add(d, e);
            g.sum_squares(f)
        });
    }

    #[test]
    fn normalization_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let sc = rand_tensor(&mut rng, &[2, 3]);
        let sh = rand_tensor(&mut rng, &[2, 3]);
        let target = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        check(vec![x, sc, sh], |g, v| {
            let n = g.instance_norm(v[0], 1e-5);
            let y = g.channel_affine(n, v[1], v[2]);
            let t = g.constant(target.clone());
            let d = g.sub(y, t);
            g.sum_squares(d)
        });
    }

    #[test]
    fn gram_linear_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 3]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        check(vec![x, w, b], |g, v| {
            let gm = g.gram(v[0]);
            let gs = g.sum_squares(gm);
            let p = g.global_avg_pool(v[0]);
            let l = g.linear(p, v[1], v[2]);
            let s = g.slice_cols(l, 1, 2);
            let ma = g.mean_abs(s);
            let ms = g.mean_sq_diff_const(l, 0.3);
            let sc = g.scale(ms, 2.0);
            let ac = g.add_const(sc, 1.0);
            g.lin_comb(&[(gs, 0.1), (ma, 3.0), (ac, -1.5)])
        });
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[1, 7, 5, 5]));
        let gm = g.gram(x);
        let d = g.value(gm).data();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(d[i * 7 + j].to_bits(), d[j * 7 + i].to_bits());
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let l = g.lin_comb(&[(a, 1.0), (b, 2.0)]);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.wrt(b).item(), 2.0);
    }
}
