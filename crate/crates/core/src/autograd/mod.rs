//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a parameter leaf.

pub mod kernels;

use std::collections::HashMap;

pub use kernels::ConvGeom;
use kernels::{
    Affine, broadcast_strides, col2im, conv3x3_same, flip_transpose3x3, for_each_broadcast, gemm, im2col,
    is_same3,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Elu,
    Sigmoid,
    Tanh,
    Log,
    Square,
}

/// Which axis of a `[B, C, T, F]` map becomes the token axis for attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenAxis {
    /// Tokens are time frames with `C*F` features each.
    Time,
    /// Tokens are frequency bins with `C*T` features each.
    Frequency,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Sum(Var),
    Mean(Var),
    Reduce {
        x: Var,
        axis: usize,
        mean: bool,
    },
    Reshape(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    ToTokens {
        x: Var,
        axis: TokenAxis,
    },
    FromTokens {
        x: Var,
        axis: TokenAxis,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    ResizeLast(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into running estimates by the optimizer owner.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    bn_stats: Vec<BnStats>,
    no_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot => *slot = Some(t),
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameter leaves never require gradients.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.no_grad
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf. Repeated calls with the same name return the same
    /// variable, so shared weights accumulate gradient naturally.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        v
    }

    /// Named parameters registered so far, in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    /// Copies the value of `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn_stats
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnStats> {
        std::mem::take(&mut self.bn_stats)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let value = if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(sa.to_vec(), data)?
        } else {
            if sa.len() != sb.len() {
                return Err(shape_err(name, sa, sb));
            }
            let mut out_shape = Vec::with_capacity(sa.len());
            for (&x, &y) in sa.iter().zip(sb) {
                if x == y || y == 1 {
                    out_shape.push(x);
                } else if x == 1 {
                    out_shape.push(y);
                } else {
                    return Err(shape_err(name, sa, sb));
                }
            }
            let st_a = broadcast_strides(sa, &out_shape);
            let st_b = broadcast_strides(sb, &out_shape);
            let mut out = Tensor::zeros(out_shape.clone());
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for_each_broadcast(&out_shape, &st_a, &st_b, |o, ia, ib| od[o] = f(da[ia], db[ib]));
            out
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b }, ng))
    }

    /// Elementwise sum with size-1 broadcasting on equal-rank operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let ng = self.ng(&[x]);
        self.push(value, Op::AddScalar(x), ng)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = match kind {
            UnaryKind::Elu => |v: f64| if v > 0.0 { v } else { v.exp_m1() },
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Log => f64::ln,
            UnaryKind::Square => |v: f64| v * v,
        };
        let value = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(value, Op::Unary { kind, x }, ng)
    }

    /// Exponential linear unit with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Elu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(&[x]);
        self.push(value, Op::Mean(x), ng)
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "reduce axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, dim, inner) = outer_inner(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![0.0; outer * inner];
        let src = self.value(x).data();
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let s = 1.0 / dim as f64;
            out.iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce { x, axis, mean },
            ng,
        ))
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("mse", self.value(a).shape(), self.value(b).shape()));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ---------------------------------------------------------------- convolution

    /// 2-D convolution. `x`: `[B, Cin, H, W]`, `w`: `[Cout, Cin, kh, kw]`,
    /// `b`: `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let [bsz, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if wcin != cin || kh != geom.kh || kw != geom.kw {
            return Err(shape_err("conv2d", self.value(x).shape(), self.value(w).shape()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv2d bias", self.value(b).shape(), &[cout]));
            }
        }
        let (ho, wo) = geom
            .conv_out(h, wd)
            .ok_or_else(|| Error::invalid(format!("conv2d: input {h}x{wd} smaller than kernel")))?;
        let k = cin * kh * kw;
        let npix = ho * wo;
        let mut out = vec![0.0; bsz * cout * npix];
        let direct = is_pointwise(&geom);
        let same3 = is_same3(&geom);
        let mut cols = if direct || same3 { Vec::new() } else { vec![0.0; k * npix] };
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            for bi in 0..bsz {
                let img = &xd[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                let ob = &mut out[bi * cout * npix..(bi + 1) * cout * npix];
                if same3 {
                    conv3x3_same(img, cin, h, wd, wdata, cout, ob, None);
                    continue;
                }
                let src: &[f64] = if direct {
                    img
                } else {
                    im2col(img, cin, h, wd, &geom, ho, wo, &mut cols);
                    &cols
                };
                gemm(cout, k, npix, 1.0, wdata, false, src, false, 0.0, ob);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (chunk, i) in out.chunks_mut(npix).zip((0..cout).cycle()) {
                    let bv = bd[i];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::new([bsz, cout, ho, wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, ng))
    }

    /// Convolution followed by a per-channel affine map and optional ELU, for
    /// inference graphs only. A conv bias must already be folded into `shift`.
    pub fn conv2d_affine(
        &mut self,
        x: Var,
        w: Var,
        geom: ConvGeom,
        post: Affine,
    ) -> Result<Var> {
        if !self.no_grad {
            return Err(Error::invalid("conv2d_affine needs an inference graph"));
        }
        let [bsz, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if !is_same3(&geom) || wcin != cin || kh != 3 || kw != 3 {
            let y = self.conv2d(x, w, None, geom)?;
            let [_, _, ho, wo] = self.value(y).dims4()?;
            if post.scale.len() != cout || post.shift.len() != cout {
                return Err(Error::invalid("conv2d_affine: affine length mismatch"));
            }
            post.apply(self.nodes[y.0].value.data_mut(), cout, ho * wo);
            return Ok(y);
        }
        if post.scale.len() != cout || post.shift.len() != cout {
            return Err(Error::invalid("conv2d_affine: affine length mismatch"));
        }
        let npix = h * wd;
        let mut out = vec![0.0; bsz * cout * npix];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        for bi in 0..bsz {
            let img = &xd[bi * cin * npix..(bi + 1) * cin * npix];
            let ob = &mut out[bi * cout * npix..(bi + 1) * cout * npix];
            conv3x3_same(img, cin, h, wd, wdata, cout, ob, Some(&post));
        }
        Ok(self.constant(Tensor::new([bsz, cout, h, wd], out)?))
    }

    /// Transposed 2-D convolution (the adjoint of [`Graph::conv2d`] with the
    /// same geometry). `w`: `[Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let [bsz, cin, h, wd] = self.value(x).dims4()?;
        let [wcin, cout, kh, kw] = self.value(w).dims4()?;
        if wcin != cin || kh != geom.kh || kw != geom.kw {
            return Err(shape_err(
                "conv_transpose2d",
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        let (ho, wo) = geom
            .transposed_out(h, wd)
            .ok_or_else(|| Error::invalid("conv_transpose2d: degenerate geometry"))?;
        let kk = cout * kh * kw;
        let npix_in = h * wd;
        let mut out = vec![0.0; bsz * cout * ho * wo];
        let mut cols = vec![0.0; kk * npix_in];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            for bi in 0..bsz {
                let img = &xd[bi * cin * npix_in..(bi + 1) * cin * npix_in];
                gemm(kk, cin, npix_in, 1.0, wdata, true, img, false, 0.0, &mut cols);
                let ob = &mut out[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
                col2im(&cols, cout, ho, wo, &geom, h, wd, ob);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (chunk, i) in out.chunks_mut(ho * wo).zip((0..cout).cycle()) {
                    let bv = bd[i];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::new([bsz, cout, ho, wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::ConvTranspose { x, w, b, geom }, ng))
    }

    /// Per-channel batch normalization of a `[B, C, H, W]` map.
    ///
    /// With `running = None` the batch statistics are used and recorded under
    /// `prefix`; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
        prefix: &str,
    ) -> Result<Var> {
        let [bsz, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let plane = h * w;
        let n = (bsz * plane) as f64;
        let xd = self.value(x).data();
        let (means, vars): (Vec<f64>, Vec<f64>) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::invalid("batch_norm: running stats length mismatch"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => (0..c)
                .map(|ci| {
                    let mut s = 0.0;
                    for bi in 0..bsz {
                        let off = (bi * c + ci) * plane;
                        s += xd[off..off + plane].iter().sum::<f64>();
                    }
                    let mean = s / n;
                    let mut q = 0.0;
                    for bi in 0..bsz {
                        let off = (bi * c + ci) * plane;
                        q += xd[off..off + plane]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    (mean, q / n)
                })
                .unzip(),
        };
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let keep = self.ng(&[x, gamma, beta]) && !self.no_grad;
        let mut xhat = if keep { vec![0.0; xd.len()] } else { Vec::new() };
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bsz {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let (m, s) = (means[ci], inv_std[ci]);
                if keep {
                    for i in off..off + plane {
                        let xh = (xd[i] - m) * s;
                        xhat[i] = xh;
                        out[i] = gd[ci] * xh + bd[ci];
                    }
                } else {
                    let (a, b) = (gd[ci] * s, bd[ci] - gd[ci] * s * m);
                    for (o, v) in out[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                        *o = a * v + b;
                    }
                }
            }
        }
        let batch_stats = running.is_none();
        if batch_stats && !prefix.is_empty() {
            let corr = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            self.bn_stats.push(BnStats {
                prefix: prefix.to_string(),
                mean: means,
                var: vars.iter().map(|v| v * corr).collect(),
            });
        }
        let value = Tensor::new([bsz, c, h, w], out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        ))
    }

    /// Fully connected layer: `x` `[B, in]`, `w` `[out, in]`, `b` `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", xs, ws));
        }
        let (bsz, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; bsz * dout];
        gemm(
            bsz,
            din,
            dout,
            1.0,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(shape_err("linear bias", self.value(b).shape(), &[dout]));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::new([bsz, dout], out)?, Op::Linear { x, w, b }, ng))
    }

    // ---------------------------------------------------------------- layout

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", s, &base));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, dim, inner) = outer_inner(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * dim + start) * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Narrow { x, axis, start },
            ng,
        ))
    }

    /// `[B, C, T, F]` to `[B, N, D]` token matrix along `axis`.
    pub fn to_tokens(&mut self, x: Var, axis: TokenAxis) -> Result<Var> {
        let [b, c, t, f] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let out_shape = match axis {
            TokenAxis::Time => {
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            let s = ((bi * c + ci) * t + ti) * f;
                            let d = (bi * t + ti) * c * f + ci * f;
                            out[d..d + f].copy_from_slice(&src[s..s + f]);
                        }
                    }
                }
                [b, t, c * f]
            }
            TokenAxis::Frequency => {
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            let s = ((bi * c + ci) * t + ti) * f;
                            for fi in 0..f {
                                out[(bi * f + fi) * c * t + ci * t + ti] = src[s + fi];
                            }
                        }
                    }
                }
                [b, f, c * t]
            }
        };
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::ToTokens { x, axis }, ng))
    }

    /// Inverse of [`Graph::to_tokens`] back to `shape` = `[B, C, T, F]`.
    pub fn from_tokens(&mut self, x: Var, axis: TokenAxis, shape: [usize; 4]) -> Result<Var> {
        let [b, c, t, f] = shape;
        let expect = match axis {
            TokenAxis::Time => [b, t, c * f],
            TokenAxis::Frequency => [b, f, c * t],
        };
        if self.value(x).shape() != expect {
            return Err(shape_err("from_tokens", self.value(x).shape(), &expect));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        tokens_to_map(src, &mut out, axis, shape);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::FromTokens { x, axis }, ng))
    }

    /// Batched matrix product of rank-3 tensors with optional transposes.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let bsz = sa[0];
        let mut out = vec![0.0; bsz * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..bsz {
            gemm(
                m,
                ka,
                n,
                1.0,
                &ad[bi * m * ka..(bi + 1) * m * ka],
                ta,
                &bd[bi * ka * n..(bi + 1) * ka * n],
                tb,
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::new([bsz, m, n], out)?,
            Op::BatchMatMul { a, b, ta, tb },
            ng,
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Linear interpolation of the last axis to `len` samples, with both
    /// endpoints aligned.
    pub fn resize_last(&mut self, x: Var, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().ok_or_else(|| Error::invalid("resize of scalar"))?;
        if n == 0 || len == 0 {
            return Err(Error::invalid("resize_last: empty axis"));
        }
        let taps = resize_taps(n, len);
        let src = self.value(x).data();
        let rows = src.len() / n;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            let s = &src[r * n..(r + 1) * n];
            for (j, &(i0, i1, fr)) in taps.iter().enumerate() {
                out[r * len + j] = (1.0 - fr) * s[i0] + fr * s[i1];
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::ResizeLast(x), ng))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Ok(Gradients { grads })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let mut ga = self.want(*a).then(|| Tensor::zeros(av.shape().to_vec()));
                let mut gb = self.want(*b).then(|| Tensor::zeros(bv.shape().to_vec()));
                if av.shape() == bv.shape() {
                    if let Some(ga) = &mut ga {
                        let d = ga.data_mut();
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => d.copy_from_slice(g),
                            BinaryKind::Mul => {
                                for ((o, &gy), &y) in d.iter_mut().zip(g).zip(bv.data()) {
                                    *o = gy * y;
                                }
                            }
                        }
                    }
                    if let Some(gb) = &mut gb {
                        let d = gb.data_mut();
                        match kind {
                            BinaryKind::Add => d.copy_from_slice(g),
                            BinaryKind::Sub => {
                                d.iter_mut().zip(g).for_each(|(o, &gy)| *o = -gy);
                            }
                            BinaryKind::Mul => {
                                for ((o, &gy), &x) in d.iter_mut().zip(g).zip(av.data()) {
                                    *o = gy * x;
                                }
                            }
                        }
                    }
                } else {
                    let st_a = broadcast_strides(av.shape(), out_shape);
                    let st_b = broadcast_strides(bv.shape(), out_shape);
                    let (ad, bd) = (av.data(), bv.data());
                    let mut ga_d = ga.as_mut().map(|t| t.data_mut());
                    let mut gb_d = gb.as_mut().map(|t| t.data_mut());
                    for_each_broadcast(out_shape, &st_a, &st_b, |o, ia, ib| {
                        let gy = g[o];
                        match kind {
                            BinaryKind::Add => {
                                if let Some(d) = ga_d.as_deref_mut() {
                                    d[ia] += gy;
                                }
                                if let Some(d) = gb_d.as_deref_mut() {
                                    d[ib] += gy;
                                }
                            }
                            BinaryKind::Sub => {
                                if let Some(d) = ga_d.as_deref_mut() {
                                    d[ia] += gy;
                                }
                                if let Some(d) = gb_d.as_deref_mut() {
                                    d[ib] -= gy;
                                }
                            }
                            BinaryKind::Mul => {
                                if let Some(d) = ga_d.as_deref_mut() {
                                    d[ia] += gy * bd[ib];
                                }
                                if let Some(d) = gb_d.as_deref_mut() {
                                    d[ib] += gy * ad[ia];
                                }
                            }
                        }
                    });
                }
                if let Some(t) = ga {
                    accumulate(grads, *a, t);
                }
                if let Some(t) = gb {
                    accumulate(grads, *b, t);
                }
            }
            Op::Scale(x, s) => {
                let mut t = gy.clone();
                t.scale(*s);
                accumulate(grads, *x, t);
            }
            Op::AddScalar(x) => accumulate(grads, *x, gy.clone()),
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let d: Vec<f64> = match kind {
                    UnaryKind::Elu => g
                        .iter()
                        .zip(xv.iter().zip(y))
                        .map(|(&g, (&x, &y))| if x > 0.0 { g } else { g * (y + 1.0) })
                        .collect(),
                    UnaryKind::Sigmoid => g
                        .iter()
                        .zip(y)
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect(),
                    UnaryKind::Tanh => g.iter().zip(y).map(|(&g, &y)| g * (1.0 - y * y)).collect(),
                    UnaryKind::Log => g.iter().zip(xv).map(|(&g, &x)| g / x).collect(),
                    UnaryKind::Square => g.iter().zip(xv).map(|(&g, &x)| 2.0 * g * x).collect(),
                };
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d).unwrap());
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(shape, g[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g[0] / xv.len() as f64;
                accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), v));
            }
            Op::Reduce { x, axis, mean } => {
                let shape = self.value(*x).shape().to_vec();
                let (outer, dim, inner) = outer_inner(&shape, *axis);
                let s = if *mean { 1.0 / dim as f64 } else { 1.0 };
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for k in 0..dim {
                        let base = (o * dim + k) * inner;
                        for i in 0..inner {
                            d[base + i] = g[o * inner + i] * s;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, gy.clone().reshape(shape).unwrap());
            }
            Op::Conv { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, gy, grads),
            Op::ConvTranspose { x, w, b, geom } => {
                self.conv_transpose_backward(*x, *w, *b, geom, gy, grads)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [bsz, c, h, w] = node.value.dims4().unwrap();
                let plane = h * w;
                let n = (bsz * plane) as f64;
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for i in off..off + plane {
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                if self.want(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            if *batch_stats {
                                let k = gd[ci] * inv_std[ci] / n;
                                for i in off..off + plane {
                                    dx[i] = k * (n * g[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
                                }
                            } else {
                                let k = gd[ci] * inv_std[ci];
                                for i in off..off + plane {
                                    dx[i] = k * g[i];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new([bsz, c, h, w], dx).unwrap());
                }
                if self.want(*gamma) {
                    accumulate(grads, *gamma, Tensor::new([c], dgamma).unwrap());
                }
                if self.want(*beta) {
                    accumulate(grads, *beta, Tensor::new([c], dbeta).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if self.want(*x) {
                    let mut dx = vec![0.0; bsz * din];
                    gemm(bsz, dout, din, 1.0, g, false, wv.data(), false, 0.0, &mut dx);
                    accumulate(grads, *x, Tensor::new([bsz, din], dx).unwrap());
                }
                if self.want(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, bsz, din, 1.0, g, true, xv.data(), false, 0.0, &mut dw);
                    accumulate(grads, *w, Tensor::new([dout, din], dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.want(*b)) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, b, Tensor::new([dout], db).unwrap());
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = outer_inner(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let dim = shape[*axis];
                    if self.want(*p) {
                        let mut d = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g[s..s + dim * inner]);
                        }
                        accumulate(grads, *p, Tensor::new(shape, d).unwrap());
                    }
                    offset += dim;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.value(*x).shape().to_vec();
                let (outer, dim, inner) = outer_inner(&shape, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let off = (o * dim + start) * inner;
                    d[off..off + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::ToTokens { x, axis } => {
                let shape = self.value(*x).dims4().unwrap();
                let mut d = vec![0.0; g.len()];
                tokens_to_map(g, &mut d, *axis, shape);
                accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::FromTokens { x, axis } => {
                let [b, c, t, f] = node.value.dims4().unwrap();
                let shape = self.value(*x).shape().to_vec();
                let mut d = vec![0.0; g.len()];
                map_to_tokens(g, &mut d, *axis, [b, c, t, f]);
                accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = av.shape();
                let sb = bv.shape();
                let bsz = sa[0];
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let (ad, bd) = (av.data(), bv.data());
                if self.want(*a) {
                    let mut d = vec![0.0; ad.len()];
                    for bi in 0..bsz {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        let out = &mut d[bi * m * k..(bi + 1) * m * k];
                        if !*ta {
                            gemm(m, n, k, 1.0, gb, false, bb, !*tb, 0.0, out);
                        } else {
                            gemm(k, n, m, 1.0, bb, *tb, gb, true, 0.0, out);
                        }
                    }
                    accumulate(grads, *a, Tensor::new(sa.to_vec(), d).unwrap());
                }
                if self.want(*b) {
                    let mut d = vec![0.0; bd.len()];
                    for bi in 0..bsz {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        let out = &mut d[bi * k * n..(bi + 1) * k * n];
                        if !*tb {
                            gemm(k, m, n, 1.0, ab, !*ta, gb, false, 0.0, out);
                        } else {
                            gemm(n, m, k, 1.0, gb, true, ab, *ta, 0.0, out);
                        }
                    }
                    accumulate(grads, *b, Tensor::new(sb.to_vec(), d).unwrap());
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d).unwrap());
            }
            Op::ResizeLast(x) => {
                let shape = self.value(*x).shape().to_vec();
                let n = *shape.last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let taps = resize_taps(n, len);
                let rows = g.len() / len;
                let mut d = vec![0.0; rows * n];
                for r in 0..rows {
                    for (j, &(i0, i1, fr)) in taps.iter().enumerate() {
                        let gv = g[r * len + j];
                        d[r * n + i0] += (1.0 - fr) * gv;
                        d[r * n + i1] += fr * gv;
                    }
                }
                accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [bsz, cin, h, wd] = xv.dims4().unwrap();
        let [cout, _, kh, kw] = wv.dims4().unwrap();
        let [_, _, ho, wo] = gy.dims4().unwrap();
        let (k, npix) = (cin * kh * kw, ho * wo);
        let g = gy.data();
        let direct = is_pointwise(geom);
        let same3 = is_same3(geom);
        let need_w = self.want(w);
        let need_x = self.want(x);
        let mut dw = vec![0.0; cout * k];
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut cols = if direct || (same3 && !need_w) { Vec::new() } else { vec![0.0; k * npix] };
        let wt = if same3 && need_x { flip_transpose3x3(wv.data(), cout, cin) } else { Vec::new() };
        for bi in 0..bsz {
            let gb = &g[bi * cout * npix..(bi + 1) * cout * npix];
            let img = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if need_w {
                let src: &[f64] = if direct {
                    img
                } else {
                    im2col(img, cin, h, wd, geom, ho, wo, &mut cols);
                    &cols
                };
                gemm(cout, npix, k, 1.0, gb, false, src, true, 1.0, &mut dw);
            }
            if need_x {
                let out = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if direct {
                    gemm(k, cout, npix, 1.0, wv.data(), true, gb, false, 0.0, out);
                } else if same3 {
                    conv3x3_same(gb, cout, ho, wo, &wt, cin, out, None);
                } else {
                    gemm(k, cout, npix, 1.0, wv.data(), true, gb, false, 0.0, &mut cols);
                    col2im(&cols, cin, h, wd, geom, ho, wo, out);
                }
            }
        }
        if need_x {
            accumulate(grads, x, Tensor::new([bsz, cin, h, wd], dx).unwrap());
        }
        if need_w {
            accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
        }
        if let Some(b) = b.filter(|b| self.want(*b)) {
            let mut db = vec![0.0; cout];
            for (chunk, i) in g.chunks(npix).zip((0..cout).cycle()) {
                db[i] += chunk.iter().sum::<f64>();
            }
            accumulate(grads, b, Tensor::new([cout], db).unwrap());
        }
    }

    fn conv_transpose_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [bsz, cin, h, wd] = xv.dims4().unwrap();
        let [_, cout, kh, kw] = wv.dims4().unwrap();
        let [_, _, ho, wo] = gy.dims4().unwrap();
        let kk = cout * kh * kw;
        let npix_in = h * wd;
        let g = gy.data();
        let need_w = self.want(w);
        let need_x = self.want(x);
        let mut dw = vec![0.0; cin * kk];
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut cols = vec![0.0; kk * npix_in];
        for bi in 0..bsz {
            let gb = &g[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
            im2col(gb, cout, ho, wo, geom, h, wd, &mut cols);
            if need_x {
                let out = &mut dx[bi * cin * npix_in..(bi + 1) * cin * npix_in];
                gemm(cin, kk, npix_in, 1.0, wv.data(), false, &cols, false, 0.0, out);
            }
            if need_w {
                let img = &xv.data()[bi * cin * npix_in..(bi + 1) * cin * npix_in];
                gemm(cin, npix_in, kk, 1.0, img, false, &cols, true, 1.0, &mut dw);
            }
        }
        if need_x {
            accumulate(grads, x, Tensor::new([bsz, cin, h, wd], dx).unwrap());
        }
        if need_w {
            accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
        }
        if let Some(b) = b.filter(|b| self.want(*b)) {
            let mut db = vec![0.0; cout];
            for (chunk, i) in g.chunks(ho * wo).zip((0..cout).cycle()) {
                db[i] += chunk.iter().sum::<f64>();
            }
            accumulate(grads, b, Tensor::new([cout], db).unwrap());
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0
}

fn resize_taps(n: usize, len: usize) -> Vec<(usize, usize, f64)> {
    (0..len)
        .map(|j| {
            if n == 1 || len == 1 {
                return (0, 0, 0.0);
            }
            let pos = j as f64 * (n - 1) as f64 / (len - 1) as f64;
            let i0 = (pos.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn tokens_to_map(src: &[f64], out: &mut [f64], axis: TokenAxis, [b, c, t, f]: [usize; 4]) {
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                let d = ((bi * c + ci) * t + ti) * f;
                match axis {
                    TokenAxis::Time => {
                        let s = (bi * t + ti) * c * f + ci * f;
                        out[d..d + f].copy_from_slice(&src[s..s + f]);
                    }
                    TokenAxis::Frequency => {
                        for fi in 0..f {
                            out[d + fi] = src[(bi * f + fi) * c * t + ci * t + ti];
                        }
                    }
                }
            }
        }
    }
}

fn map_to_tokens(src: &[f64], out: &mut [f64], axis: TokenAxis, [b, c, t, f]: [usize; 4]) {
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                let s = ((bi * c + ci) * t + ti) * f;
                match axis {
                    TokenAxis::Time => {
                        let d = (bi * t + ti) * c * f + ci * f;
                        out[d..d + f].copy_from_slice(&src[s..s + f]);
                    }
                    TokenAxis::Frequency => {
                        for fi in 0..f {
                            out[(bi * f + fi) * c * t + ci * t + ti] = src[s + fi];
                        }
                    }
                }
            }
        }
    }
}
