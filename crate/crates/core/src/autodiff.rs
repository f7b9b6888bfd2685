//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward evaluation. It is a
//! per-call recording context: build it, call [`Tape::backward`], drop it.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// x · sigmoid(x)
    Silu,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatVec {
        w: Var,
        x: Var,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Upsample2x(Var),
    Reshape(Var),
    Act(Var, Activation),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// `c = beta * c + a · b` for row-major operands, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths were asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = ((self.w + self.pad).saturating_sub(kx))
            .div_ceil(self.stride)
            .min(self.w_out);
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch_len() * p];
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        let out = &mut dst[oy * self.w_out..][..self.w_out];
                        let ix0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, o) in out[lo..hi].iter_mut().enumerate() {
                                *o = src[ix0 + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        let inp = &src[oy * self.w_out..][..self.w_out];
                        let ix0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            for (d, s) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(&inp[lo..hi]) {
                                *d += s;
                            }
                        } else {
                            for (j, s) in inp[lo..hi].iter().enumerate() {
                                dst[ix0 + j * self.stride] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose gradient is reported by [`Tape::param_grads`].
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let v = self.push(value.clone(), Op::Leaf);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k))
    }

    /// `W x` for `W: [out, in]`, `x: [in]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (wt, xt) = (self.value(w), self.value(x));
        let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xt.numel(), cols, "matvec inner dimension");
        let out: Vec<f64> = wt
            .data()
            .chunks_exact(cols)
            .map(|row| row.iter().zip(xt.data()).map(|(a, b)| a * b).sum())
            .collect();
        debug_assert_eq!(out.len(), rows);
        self.push(Tensor::from_vec(out), Op::MatVec { w, x })
    }

    /// Adds `bias[c]` to every element of channel `c` of `x: [C, ...]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xt, bt) = (self.value(x), self.value(bias));
        let channels = xt.shape()[0];
        assert_eq!(bt.numel(), channels, "channel_bias width");
        let inner = xt.numel() / channels;
        let mut value = xt.clone();
        for (chunk, &b) in value.data_mut().chunks_exact_mut(inner).zip(bt.data()) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push(value, Op::ChannelBias { x, bias })
    }

    /// Same-padded 2-D convolution of `x: [C_in, H, W]` with
    /// `w: [C_out, C_in, k, k]` (odd k), no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let (xt, wt) = (self.value(x), self.value(w));
        let (c_in, h, width) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (c_out, k) = (wt.shape()[0], wt.shape()[2]);
        assert_eq!(wt.shape()[1], c_in, "conv2d input channels");
        let geom = ConvGeometry::new(c_in, h, width, k, stride);
        let cols = geom.im2col(xt.data());
        let mut out = vec![0.0; c_out * geom.positions()];
        gemm(
            c_out,
            geom.patch_len(),
            geom.positions(),
            wt.data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out).expect("conv shape");
        self.push(value, Op::Conv2d { x, w, geom, cols })
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xt.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out).expect("upsample shape");
        self.push(value, Op::Upsample2x(x))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape element count");
        self.push(value, Op::Reshape(x))
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Silu => self.value(x).map(|v| v * sigmoid(v)),
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
        };
        self.push(value, Op::Act(x, kind))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sq_norm());
        self.push(value, Op::SumSquares(x))
    }

    /// Adjoints of every node with respect to the scalar `out`.
    fn adjoints(&self, out: Var) -> Result<Vec<Option<Vec<f64>>>> {
        contract!(
            self.value(out).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(out).shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (d, s) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += s;
                    }
                    for (d, s) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, s) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += s;
                    }
                    for (d, s) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d -= s;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let da: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    for (d, s) in acc(&mut grads, *a, g.len()).iter_mut().zip(&da) {
                        *d += s;
                    }
                    for (d, s) in acc(&mut grads, *b, g.len()).iter_mut().zip(&db) {
                        *d += s;
                    }
                }
                Op::Scale(a, k) => {
                    for (d, s) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += k * s;
                    }
                }
                Op::MatVec { w, x } => {
                    let (wt, xt) = (self.value(*w), self.value(*x));
                    let cols = wt.shape()[1];
                    let dw = acc(&mut grads, *w, wt.numel());
                    for (row, &gi) in dw.chunks_exact_mut(cols).zip(&g) {
                        for (d, &xj) in row.iter_mut().zip(xt.data()) {
                            *d += gi * xj;
                        }
                    }
                    let dx = acc(&mut grads, *x, cols);
                    for (row, &gi) in wt.data().chunks_exact(cols).zip(&g) {
                        for (d, &wij) in dx.iter_mut().zip(row) {
                            *d += gi * wij;
                        }
                    }
                }
                Op::ChannelBias { x, bias } => {
                    for (d, s) in acc(&mut grads, *x, g.len()).iter_mut().zip(&g) {
                        *d += s;
                    }
                    let channels = self.value(*bias).numel();
                    let inner = g.len() / channels;
                    let db = acc(&mut grads, *bias, channels);
                    for (d, chunk) in db.iter_mut().zip(g.chunks_exact(inner)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let wt = self.value(*w);
                    let c_out = wt.shape()[0];
                    let (pl, p) = (geom.patch_len(), geom.positions());
                    let dw = acc(&mut grads, *w, wt.numel());
                    gemm(c_out, p, pl, &g, false, cols, true, dw, 1.0);
                    let mut dcols = vec![0.0; pl * p];
                    gemm(pl, c_out, p, wt.data(), true, &g, false, &mut dcols, 0.0);
                    let dx = acc(&mut grads, *x, geom.c_in * geom.h * geom.w);
                    geom.col2im_add(&dcols, dx);
                }
                Op::Upsample2x(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let dx = acc(&mut grads, *x, c * h * w);
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    let dx = acc(&mut grads, *x, g.len());
                    for (d, &gi) in dx.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Act(x, kind) => {
                    let xv = self.value(*x).data();
                    let dx = acc(&mut grads, *x, g.len());
                    match kind {
                        Activation::Silu => {
                            for ((d, &gi), &v) in dx.iter_mut().zip(&g).zip(xv) {
                                let s = sigmoid(v);
                                *d += gi * s * (1.0 + v * (1.0 - s));
                            }
                        }
                        Activation::Relu => {
                            for ((d, &gi), &v) in dx.iter_mut().zip(&g).zip(xv) {
                                if v > 0.0 {
                                    *d += gi;
                                }
                            }
                        }
                    }
                }
                Op::SumSquares(x) => {
                    let xv = self.value(*x).data();
                    let dx = acc(&mut grads, *x, xv.len());
                    for (d, &v) in dx.iter_mut().zip(xv) {
                        *d += 2.0 * g[0] * v;
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradient of the scalar `out` with respect to every registered
    /// parameter, in registration order. Parameters that do not influence
    /// `out` receive zeros.
    pub fn param_grads(&self, out: Var) -> Result<Vec<(String, Tensor)>> {
        let grads = self.adjoints(out)?;
        Ok(self
            .params
            .iter()
            .map(|(name, v)| {
                let shape = self.value(*v).shape().to_vec();
                let data = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                (name.clone(), Tensor::new(shape, data).expect("grad shape"))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng.normal_vec(n)).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::from_vec(vec![3.0]));
        let loss = tape.sum_squares(w);
        let g = tape.param_grads(loss).unwrap();
        assert_eq!(g[0].1.data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let _w = tape.param("w", &Tensor::from_vec(vec![3.0, 1.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let g = tape.param_grads(c).unwrap();
        assert_eq!(g[0].1.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::from_vec(vec![3.0, 1.0]));
        assert!(tape.param_grads(w).is_err());
    }

    /// Finite-difference check of every op through a composite scalar.
    #[test]
    fn ops_match_finite_differences() {
        let mut rng = RngStream::new(17, 0);
        let x = randn(&mut rng, &[2, 6, 6]);
        let w1 = randn(&mut rng, &[3, 2, 3, 3]);
        let w2 = randn(&mut rng, &[3, 3, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let m = randn(&mut rng, &[4, 3]);

        let build = |w1: &Tensor, w2: &Tensor, b: &Tensor, m: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let w1v = tape.param("w1", w1);
            let w2v = tape.param("w2", w2);
            let bv = tape.param("b", b);
            let mv = tape.param("m", m);
            let h = tape.conv2d(xv, w1v, 1);
            let h = tape.channel_bias(h, bv);
            let h = tape.act(h, Activation::Silu);
            let d = tape.conv2d(h, w2v, 2);
            let u = tape.upsample2x(d);
            let s = tape.mul(u, h);
            let s = tape.sub(s, h);
            let s = tape.scale(s, 0.3);
            let n = tape.value(s).numel();
            let s = tape.reshape(s, vec![n]);
            let proj = tape.matvec(mv, bv);
            let l1 = tape.sum_squares(s);
            let l2 = tape.sum_squares(proj);
            let out = tape.add(l1, l2);
            (tape, out)
        };

        let (tape, out) = build(&w1, &w2, &b, &m);
        let grads = tape.param_grads(out).unwrap();
        let params = [w1.clone(), w2.clone(), b.clone(), m.clone()];
        let eval = |ps: &[Tensor]| {
            let (t, o) = build(&ps[0], &ps[1], &ps[2], &ps[3]);
            t.value(o).data()[0]
        };
        for (pi, (_, g)) in grads.iter().enumerate() {
            for i in 0..params[pi].numel() {
                let h = 1e-5;
                let mut plus = params.clone();
                plus[pi].data_mut()[i] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-5, "param {pi}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn relu_gradient_is_masked() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::from_vec(vec![-1.0, 2.0]));
        let y = tape.act(x, Activation::Relu);
        let l = tape.sum_squares(y);
        let g = tape.param_grads(l).unwrap();
        assert_eq!(g[0].1.data(), &[0.0, 4.0]);
    }

    #[test]
    fn strided_conv_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[5, 2, 3, 3]));
        let y = tape.conv2d(x, w, 2);
        assert_eq!(tape.value(y).shape(), &[5, 4, 4]);
    }
}
