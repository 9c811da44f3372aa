//! Minimal reverse-mode differentiation engine.
//!
//! A [`Graph`] is an append-only tape of tensor nodes. Builder methods
//! evaluate eagerly and record the producing operation, so node order is
//! already topological: the backward pass walks the tape once in reverse,
//! accumulating vector-Jacobian products into each parent. Only the
//! operations this estimator needs are implemented — elementwise arithmetic,
//! reductions, convolution, bilinear sampling/upsampling, correlation, concat
//! and finite differences — no general graph machinery.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{check_same_shape, Elem, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Elem> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, T),
    MulScalar(Var, T),
    Abs(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    LeakyRelu(Var, T),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Upsample2x(Var),
    Warp {
        feature: Var,
        flow: Var,
    },
    CostVolume {
        q1: Var,
        q2: Var,
        radius: usize,
    },
    ConcatChannels(Vec<Var>),
    DiffX(Var),
    DiffY(Var),
    Shift2d {
        input: Var,
        dy: isize,
        dx: isize,
    },
}

struct Node<T: Elem> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only computation tape.
pub struct Graph<T: Elem = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor that participates as a constant or trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn zip_ew(
        &mut self,
        what: &str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same_shape(what, va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_ew("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_ew("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_ew("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_ew("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.nodes[a.0].value.map(|v| v + c);
        self.push(t, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.nodes[a.0].value.map(|v| v * c);
        self.push(t, Op::MulScalar(a, c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|v| v.abs());
        self.push(t, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|v| v.exp());
        self.push(t, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|v| v.sqrt());
        self.push(t, Op::Sqrt(a))
    }

    /// Reduces to a single-element tensor by summation (fixed order).
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let t = ops::leaky_relu(&self.nodes[a.0].value, slope)?;
        Ok(self.push(t, Op::LeakyRelu(a, slope)))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let t = ops::conv2d(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            stride,
            padding,
        )?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
        ))
    }

    /// Adds a per-channel bias (rank-1, length C) to a BCHW tensor.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[input.0].value.dims4()?;
        let vb = &self.nodes[bias.0].value;
        if vb.shape() != [c] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {c} channels",
                vb.shape()
            )));
        }
        let mut t = self.nodes[input.0].value.clone();
        let hw = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let bv = vb.data()[ci];
                for v in t.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter_mut() {
                    *v += bv;
                }
            }
        }
        Ok(self.push(t, Op::AddBias { input, bias }))
    }

    pub fn upsample_bilinear_2x(&mut self, a: Var) -> Result<Var> {
        let t = ops::upsample_bilinear_2x(&self.nodes[a.0].value)?;
        Ok(self.push(t, Op::Upsample2x(a)))
    }

    pub fn warp(&mut self, feature: Var, flow: Var) -> Result<Var> {
        let t = ops::warp(&self.nodes[feature.0].value, &self.nodes[flow.0].value)?;
        Ok(self.push(t, Op::Warp { feature, flow }))
    }

    pub fn cost_volume(&mut self, q1: Var, q2: Var, radius: usize) -> Result<Var> {
        let t = ops::cost_volume(&self.nodes[q1.0].value, &self.nodes[q2.0].value, radius)?;
        Ok(self.push(t, Op::CostVolume { q1, q2, radius }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let (b, _, h, w) = self.nodes[parts[0].0].value.dims4()?;
        let mut c_total = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = self.nodes[p.0].value.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat operand {:?} incompatible with [{b}, _, {h}, {w}]",
                    self.nodes[p.0].value.shape()
                )));
            }
            c_total += pc;
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, c_total, h, w]);
        for bi in 0..b {
            let mut c_off = 0;
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let pc = v.shape()[1];
                let src = &v.data()[bi * pc * hw..(bi + 1) * pc * hw];
                out.data_mut()[(bi * c_total + c_off) * hw..(bi * c_total + c_off + pc) * hw]
                    .copy_from_slice(src);
                c_off += pc;
            }
        }
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec())))
    }

    /// Forward difference along width: `out(y, x) = in(y, x+1) - in(y, x)`.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[a.0].value.dims4()?;
        if w < 2 {
            return Err(Error::Shape("diff_x needs width >= 2".into()));
        }
        let v = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(&[b, c, h, w - 1]);
        for bc in 0..b * c {
            let plane = &v.data()[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out.data_mut()[bc * h * (w - 1)..(bc + 1) * h * (w - 1)];
            for y in 0..h {
                for x in 0..w - 1 {
                    dst[y * (w - 1) + x] = plane[y * w + x + 1] - plane[y * w + x];
                }
            }
        }
        Ok(self.push(out, Op::DiffX(a)))
    }

    /// Forward difference along height: `out(y, x) = in(y+1, x) - in(y, x)`.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[a.0].value.dims4()?;
        if h < 2 {
            return Err(Error::Shape("diff_y needs height >= 2".into()));
        }
        let v = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(&[b, c, h - 1, w]);
        for bc in 0..b * c {
            let plane = &v.data()[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out.data_mut()[bc * (h - 1) * w..(bc + 1) * (h - 1) * w];
            for y in 0..h - 1 {
                for x in 0..w {
                    dst[y * w + x] = plane[(y + 1) * w + x] - plane[y * w + x];
                }
            }
        }
        Ok(self.push(out, Op::DiffY(a)))
    }

    pub fn shift2d(&mut self, a: Var, dy: isize, dx: isize) -> Result<Var> {
        let t = ops::shift2d(&self.nodes[a.0].value, dy, dx)?;
        Ok(self.push(t, Op::Shift2d { input: a, dy, dx }))
    }

    /// Reverse-mode pass from a scalar loss.
    ///
    /// Walks the tape once in reverse (creation order is topological), so
    /// every node is visited exactly once and values used several times
    /// accumulate all of their gradient contributions. Nodes that the loss
    /// does not depend on end up with no gradient; callers that need a dense
    /// gradient map substitute zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            // Parents always precede idx, so the split borrows are disjoint.
            let (head, tail) = grads.split_at_mut(idx);
            let Some(g) = tail[0].as_ref() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut head[a.0], g.clone());
                    acc(&mut head[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut head[a.0], g.clone());
                    acc(&mut head[b.0], g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = ew(g, &self.nodes[b.0].value, |x, y| x * y);
                    let gb = ew(g, &self.nodes[a.0].value, |x, y| x * y);
                    acc(&mut head[a.0], ga);
                    acc(&mut head[b.0], gb);
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[b.0].value;
                    let ga = ew(g, vb, |x, y| x / y);
                    // d(a/b)/db = -a/b^2 = -out/b
                    let mut gb = ew(g, &node.value, |x, o| x * o);
                    for (d, y) in gb.data_mut().iter_mut().zip(vb.data()) {
                        *d = -*d / *y;
                    }
                    acc(&mut head[a.0], ga);
                    acc(&mut head[b.0], gb);
                }
                Op::AddScalar(a, _) => acc(&mut head[a.0], g.clone()),
                Op::MulScalar(a, c) => acc(&mut head[a.0], g.map(|v| v * *c)),
                Op::Abs(a) => {
                    let ga = ew(g, &self.nodes[a.0].value, |x, v| {
                        if v > T::zero() {
                            x
                        } else if v < T::zero() {
                            -x
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut head[a.0], ga);
                }
                Op::Exp(a) => acc(&mut head[a.0], ew(g, &node.value, |x, o| x * o)),
                Op::Sqrt(a) => {
                    let half = T::from_f64(0.5);
                    acc(&mut head[a.0], ew(g, &node.value, |x, o| x * half / o));
                }
                Op::Sum(a) => {
                    let seed = g.data()[0];
                    acc(
                        &mut head[a.0],
                        Tensor::full(self.nodes[a.0].value.shape(), seed),
                    );
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let ga = ew(g, &self.nodes[a.0].value, |x, v| {
                        if v >= T::zero() {
                            x
                        } else {
                            x * s
                        }
                    });
                    acc(&mut head[a.0], ga);
                }
                Op::Conv2d {
                    input,
                    weight,
                    stride,
                    padding,
                } => {
                    let (gi, gw) = ops::conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        g,
                        *stride,
                        *padding,
                    )?;
                    acc(&mut head[input.0], gi);
                    acc(&mut head[weight.0], gw);
                }
                Op::AddBias { input, bias } => {
                    acc(&mut head[input.0], g.clone());
                    let (b, c, h, w) = self.nodes[input.0].value.dims4()?;
                    let hw = h * w;
                    let mut gb = Tensor::zeros(&[c]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let s: T = g.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                                .iter()
                                .copied()
                                .sum();
                            gb.data_mut()[ci] += s;
                        }
                    }
                    acc(&mut head[bias.0], gb);
                }
                Op::Upsample2x(a) => {
                    let gi = ops::upsample_bilinear_2x_backward(
                        self.nodes[a.0].value.shape(),
                        g,
                    )?;
                    acc(&mut head[a.0], gi);
                }
                Op::Warp { feature, flow } => {
                    let (gf, gl) = ops::warp_backward(
                        &self.nodes[feature.0].value,
                        &self.nodes[flow.0].value,
                        g,
                    )?;
                    acc(&mut head[feature.0], gf);
                    acc(&mut head[flow.0], gl);
                }
                Op::CostVolume { q1, q2, radius } => {
                    let (g1, g2) = ops::cost_volume_backward(
                        &self.nodes[q1.0].value,
                        &self.nodes[q2.0].value,
                        *radius,
                        g,
                    )?;
                    acc(&mut head[q1.0], g1);
                    acc(&mut head[q2.0], g2);
                }
                Op::ConcatChannels(parts) => {
                    let (b, c_total, h, w) = node.value.dims4()?;
                    let hw = h * w;
                    let mut c_off = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.shape()[1];
                        let mut gp = Tensor::zeros(self.nodes[p.0].value.shape());
                        for bi in 0..b {
                            let src = &g.data()
                                [(bi * c_total + c_off) * hw..(bi * c_total + c_off + pc) * hw];
                            gp.data_mut()[bi * pc * hw..(bi + 1) * pc * hw].copy_from_slice(src);
                        }
                        acc(&mut head[p.0], gp);
                        c_off += pc;
                    }
                }
                Op::DiffX(a) => {
                    let (b, c, h, w) = self.nodes[a.0].value.dims4()?;
                    let mut ga = Tensor::zeros(&[b, c, h, w]);
                    for bc in 0..b * c {
                        let gp = &g.data()[bc * h * (w - 1)..(bc + 1) * h * (w - 1)];
                        let dst = &mut ga.data_mut()[bc * h * w..(bc + 1) * h * w];
                        for y in 0..h {
                            for x in 0..w - 1 {
                                let gv = gp[y * (w - 1) + x];
                                dst[y * w + x + 1] += gv;
                                dst[y * w + x] -= gv;
                            }
                        }
                    }
                    acc(&mut head[a.0], ga);
                }
                Op::DiffY(a) => {
                    let (b, c, h, w) = self.nodes[a.0].value.dims4()?;
                    let mut ga = Tensor::zeros(&[b, c, h, w]);
                    for bc in 0..b * c {
                        let gp = &g.data()[bc * (h - 1) * w..(bc + 1) * (h - 1) * w];
                        let dst = &mut ga.data_mut()[bc * h * w..(bc + 1) * h * w];
                        for y in 0..h - 1 {
                            for x in 0..w {
                                let gv = gp[y * w + x];
                                dst[(y + 1) * w + x] += gv;
                                dst[y * w + x] -= gv;
                            }
                        }
                    }
                    acc(&mut head[a.0], ga);
                }
                Op::Shift2d { input, dy, dx } => {
                    let gi = ops::shift2d(g, -dy, -dx)?;
                    acc(&mut head[input.0], gi);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn ew<T: Elem>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(g.shape(), other.shape());
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("shape preserved")
}

fn acc<T: Elem>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(t) => {
            for (d, s) in t.data_mut().iter_mut().zip(delta.data()) {
                *d += *s;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Result of a backward pass: one optional gradient tensor per node.
pub struct Gradients<T: Elem = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` at `x`, one component at a time.
    fn numeric_grad(
        x: &Tensor<f64>,
        eps: f64,
        f: &dyn Fn(&Tensor<f64>) -> f64,
    ) -> Tensor<f64> {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!(
                (x - y).abs() / denom < tol,
                "component {i}: {x} vs {y} (rel {})",
                (x - y).abs() / denom
            );
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(rt(&[1, 1, 2, 3], 1));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        for v in grads.get(w).unwrap().data() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn value_used_twice_accumulates_both_paths() {
        // loss = sum(x*x) + sum(x)  =>  grad = 2x + 1
        let x0 = rt(&[2, 1, 2, 2], 7);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let s1 = g.sum(sq);
        let s2 = g.sum(x);
        let loss = g.add(s1, s2).unwrap();
        let grads = g.backward(loss).unwrap();
        let want = x0.map(|v| 2.0 * v + 1.0);
        assert_close(grads.get(x).unwrap(), &want, 1e-12);

        let numeric = numeric_grad(&x0, 1e-5, &|t| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(t.clone());
            let sq = g.mul(x, x).unwrap();
            let s1 = g.sum(sq);
            let s2 = g.sum(x);
            let loss = g.add(s1, s2).unwrap();
            g.value(loss).data()[0]
        });
        assert_close(grads.get(x).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(rt(&[1, 1, 2, 2], 3));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(rt(&[1, 1, 2, 2], 3));
        let y = g.leaf(rt(&[1, 1, 2, 2], 4));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn leaky_relu_gradient_matches_definition() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-3.0, 0.0, 2.0]).unwrap());
        let y = g.leaky_relu(x, 0.1).unwrap();
        assert_eq!(g.value(y).data(), &[-0.3, 0.0, 2.0]);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.1, 1.0, 1.0]);
    }

    /// Finite-difference check for one input of an arbitrary graph function.
    fn check_input_grad(
        x0: &Tensor<f64>,
        tol: f64,
        build: &dyn Fn(&mut Graph<f64>, Var) -> Var,
    ) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0.clone());
        let out = build(&mut g, x);
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let numeric = numeric_grad(x0, 1e-3, &|t| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(t.clone());
            let out = build(&mut g, x);
            let loss = g.sum(out);
            g.value(loss).data()[0]
        });
        assert_close(&analytic, &numeric, tol);
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let x0 = rt(&[1, 2, 3, 3], 11).map(|v| v + 2.5); // keep away from 0 for abs/sqrt/div
        check_input_grad(&x0, 1e-5, &|g, x| g.abs(x));
        check_input_grad(&x0, 1e-5, &|g, x| g.exp(x));
        check_input_grad(&x0, 1e-5, &|g, x| g.sqrt(x));
        check_input_grad(&x0, 1e-5, &|g, x| {
            let c = g.leaf(rt(&[1, 2, 3, 3], 12).map(|v| v + 3.0));
            g.div(x, c).unwrap()
        });
        check_input_grad(&x0, 1e-5, &|g, x| {
            let c = g.leaf(rt(&[1, 2, 3, 3], 13));
            let y = g.mul(x, c).unwrap();
            g.add_scalar(y, 0.25)
        });
    }

    #[test]
    fn spatial_op_gradients_match_finite_differences() {
        let x0 = rt(&[1, 2, 4, 4], 21);
        check_input_grad(&x0, 1e-4, &|g, x| g.upsample_bilinear_2x(x).unwrap());
        check_input_grad(&x0, 1e-4, &|g, x| g.diff_x(x).unwrap());
        check_input_grad(&x0, 1e-4, &|g, x| g.diff_y(x).unwrap());
        check_input_grad(&x0, 1e-4, &|g, x| g.shift2d(x, 1, -1).unwrap());
        check_input_grad(&x0, 1e-4, &|g, x| {
            let w = g.leaf(rt(&[3, 2, 3, 3], 22));
            g.conv2d(x, w, 1, 1).unwrap()
        });
        check_input_grad(&x0, 1e-4, &|g, x| {
            let w = g.leaf(rt(&[2, 2, 3, 3], 23));
            g.conv2d(x, w, 2, 1).unwrap()
        });
        let w0 = rt(&[3, 2, 3, 3], 24);
        check_input_grad(&w0, 1e-4, &|g, w| {
            let x = g.leaf(rt(&[1, 2, 4, 4], 25));
            g.conv2d(x, w, 1, 1).unwrap()
        });
        let b0 = rt(&[2], 26);
        check_input_grad(&b0, 1e-5, &|g, b| {
            let x = g.leaf(rt(&[2, 2, 3, 3], 27));
            g.add_bias(x, b).unwrap()
        });
    }

    #[test]
    fn warp_and_cost_volume_gradients_match_finite_differences() {
        // non-integer flow keeps the bilinear kernel away from its kinks
        let feat0 = rt(&[1, 2, 5, 5], 31);
        let flow0 = rt(&[1, 2, 5, 5], 32).map(|v| v * 0.7 + 0.13);
        check_input_grad(&feat0, 1e-4, &|g, f| {
            let fl = g.leaf(rt(&[1, 2, 5, 5], 32).map(|v| v * 0.7 + 0.13));
            g.warp(f, fl).unwrap()
        });
        check_input_grad(&flow0, 1e-4, &|g, fl| {
            let f = g.leaf(rt(&[1, 2, 5, 5], 31));
            g.warp(f, fl).unwrap()
        });
        let q0 = rt(&[1, 3, 5, 5], 33);
        check_input_grad(&q0, 1e-4, &|g, q1| {
            let q2 = g.leaf(rt(&[1, 3, 5, 5], 34));
            g.cost_volume(q1, q2, 2).unwrap()
        });
        check_input_grad(&q0, 1e-4, &|g, q2| {
            let q1 = g.leaf(rt(&[1, 3, 5, 5], 34));
            g.cost_volume(q1, q2, 2).unwrap()
        });
    }

    #[test]
    fn concat_routes_gradients_to_parts() {
        let a0 = rt(&[2, 2, 3, 3], 41);
        check_input_grad(&a0, 1e-5, &|g, a| {
            let b = g.leaf(rt(&[2, 3, 3, 3], 42));
            let cat = g.concat_channels(&[a, b]).unwrap();
            let two = g.mul_scalar(cat, 2.0);
            two
        });
    }
}
