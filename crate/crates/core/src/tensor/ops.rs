use super::tape::{Tape, Var};
use super::{binary_op, reduce_to_shape, Scalar, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_C1: f64 = 0.044715;

fn gelu_val<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(SQRT_2_OVER_PI);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(SQRT_2_OVER_PI);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c0 * (S::ONE + three * c1 * x * x)
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("zip_map shapes match")
}

/// Last-two-dims view of a shape: (leading, rows, cols).
fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let n = shape[shape.len() - 1];
    let m = shape[shape.len() - 2];
    let leading = shape[..shape.len() - 2].iter().product::<usize>();
    Some((leading, m, n))
}

impl<S: Scalar> Tensor<S> {
    /// Matrix product. Supports (m,k)x(k,n) and batched (b,m,k)x(b,k,n).
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        match (self.rank(), rhs.rank()) {
            (2, 2) => {
                let (m, k) = (self.shape()[0], self.shape()[1]);
                let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
                if k != k2 {
                    return Err(Error::dim("matmul", self.shape(), rhs.shape()));
                }
                let mut out = vec![S::ZERO; m * n];
                S::gemm(m, k, n, self.data(), false, rhs.data(), false, &mut out);
                Tensor::from_vec(vec![m, n], out)
            }
            (3, 3) => {
                let (b, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
                let (b2, k2, n) = (rhs.shape()[0], rhs.shape()[1], rhs.shape()[2]);
                if b != b2 || k != k2 {
                    return Err(Error::dim("matmul", self.shape(), rhs.shape()));
                }
                let mut out = vec![S::ZERO; b * m * n];
                for i in 0..b {
                    S::gemm(
                        m,
                        k,
                        n,
                        &self.data()[i * m * k..(i + 1) * m * k],
                        false,
                        &rhs.data()[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::from_vec(vec![b, m, n], out)
            }
            _ => Err(Error::dim("matmul", self.shape(), rhs.shape())),
        }
    }

    /// Swap the last two dimensions.
    pub fn transpose_last(&self) -> Result<Tensor<S>> {
        let Some((leading, m, n)) = mat_dims(self.shape()) else {
            return Err(Error::shape("transpose_last", self.shape(), "rank >= 2 required"));
        };
        let mut out = vec![S::ZERO; self.numel()];
        let src = self.data();
        for l in 0..leading {
            let base = l * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = src[base + i * n + j];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Tensor::from_vec(shape, out)
    }

    /// Softmax over the last dimension (max-subtracted for stability).
    pub fn softmax_last(&self) -> Result<Tensor<S>> {
        if self.rank() == 0 {
            return Err(Error::shape("softmax_last", self.shape(), "rank >= 1 required"));
        }
        let n = self.shape()[self.rank() - 1];
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            let mut m = row[0];
            for &v in row.iter() {
                m = m.max(v);
            }
            let mut sum = S::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Tensor::from_vec(self.shape().to_vec(), out)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax_last(&self) -> Result<Tensor<S>> {
        if self.rank() == 0 {
            return Err(Error::shape("log_softmax_last", self.shape(), "rank >= 1 required"));
        }
        let n = self.shape()[self.rank() - 1];
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            let mut m = row[0];
            for &v in row.iter() {
                m = m.max(v);
            }
            let mut sum = S::ZERO;
            for &v in row.iter() {
                sum += (v - m).exp();
            }
            let log_z = m + sum.ln();
            for v in row.iter_mut() {
                *v = *v - log_z;
            }
        }
        Tensor::from_vec(self.shape().to_vec(), out)
    }

    /// Rows scaled to unit L2 norm; `eps` joins the denominator so zero rows
    /// stay zero. Returns the normalized tensor and each row's raw norm.
    pub(crate) fn l2_normalize_raw(&self, eps: f64) -> Result<(Tensor<S>, Vec<S>)> {
        if self.rank() == 0 {
            return Err(Error::shape("l2_normalize", self.shape(), "rank >= 1 required"));
        }
        let n = self.shape()[self.rank() - 1];
        let rows = self.numel() / n;
        let e = S::from_f64(eps);
        let mut out = self.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in out.chunks_mut(n) {
            let mut sq = S::ZERO;
            for &v in row.iter() {
                sq += v * v;
            }
            let r = sq.sqrt();
            let s = r + e;
            for v in row.iter_mut() {
                *v = *v / s;
            }
            norms.push(r);
        }
        Ok((Tensor::from_vec(self.shape().to_vec(), out)?, norms))
    }

    /// Rows scaled to unit L2 norm.
    pub fn l2_normalized(&self, eps: f64) -> Result<Tensor<S>> {
        Ok(self.l2_normalize_raw(eps)?.0)
    }

    /// Mean over rows of a rank-2 tensor: (n, d) -> (d).
    pub fn mean_rows(&self) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::shape("mean_rows", self.shape(), "rank 2 required"));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if n == 0 {
            return Err(Error::shape("mean_rows", self.shape(), "no rows"));
        }
        let mut out = vec![S::ZERO; d];
        for row in self.data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
        let inv = S::ONE / S::from_f64(n as f64);
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        Tensor::from_vec(vec![d], out)
    }
}

// dA = g . B^T for C = A . B (handles 2d and batched 3d).
fn matmul_da<S: Scalar>(g: &Tensor<S>, b: &Tensor<S>, m: usize, k: usize, n: usize) -> Tensor<S> {
    if b.rank() == 2 {
        let mut out = vec![S::ZERO; m * k];
        S::gemm(m, n, k, g.data(), false, b.data(), true, &mut out);
        Tensor::from_vec(vec![m, k], out).expect("matmul_da shape")
    } else {
        let batch = b.shape()[0];
        let mut out = vec![S::ZERO; batch * m * k];
        for i in 0..batch {
            S::gemm(
                m,
                n,
                k,
                &g.data()[i * m * n..(i + 1) * m * n],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                true,
                &mut out[i * m * k..(i + 1) * m * k],
            );
        }
        Tensor::from_vec(vec![batch, m, k], out).expect("matmul_da shape")
    }
}

// dB = A^T . g for C = A . B.
fn matmul_db<S: Scalar>(a: &Tensor<S>, g: &Tensor<S>, m: usize, k: usize, n: usize) -> Tensor<S> {
    if a.rank() == 2 {
        let mut out = vec![S::ZERO; k * n];
        S::gemm(k, m, n, a.data(), true, g.data(), false, &mut out);
        Tensor::from_vec(vec![k, n], out).expect("matmul_db shape")
    } else {
        let batch = a.shape()[0];
        let mut out = vec![S::ZERO; batch * k * n];
        for i in 0..batch {
            S::gemm(
                k,
                m,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                true,
                &g.data()[i * m * n..(i + 1) * m * n],
                false,
                &mut out[i * k * n..(i + 1) * k * n],
            );
        }
        Tensor::from_vec(vec![batch, k, n], out).expect("matmul_db shape")
    }
}

fn split_heads_data<S: Scalar>(x: &Tensor<S>, heads: usize) -> Tensor<S> {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hd = d / heads;
    let src = x.data();
    let mut out = vec![S::ZERO; x.numel()];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let dst = ((bi * heads + h) * t + ti) * hd;
                let from = (bi * t + ti) * d + h * hd;
                out[dst..dst + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    Tensor::from_vec(vec![b * heads, t, hd], out).expect("split_heads shape")
}

fn merge_heads_data<S: Scalar>(x: &Tensor<S>, heads: usize) -> Tensor<S> {
    let (bh, t, hd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let b = bh / heads;
    let d = heads * hd;
    let src = x.data();
    let mut out = vec![S::ZERO; x.numel()];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let from = ((bi * heads + h) * t + ti) * hd;
                let dst = (bi * t + ti) * d + h * hd;
                out[dst..dst + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    Tensor::from_vec(vec![b, t, d], out).expect("merge_heads shape")
}

impl<S: Scalar> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let out = binary_op("add", &av, &bv, |x, y| x + y)?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push(
            out,
            ra || rb,
            Some(Box::new(move |g, grads| {
                if ra {
                    grads.accumulate(a, reduce_to_shape(g, &ash));
                }
                if rb {
                    grads.accumulate(b, reduce_to_shape(g, &bsh));
                }
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let out = binary_op("sub", &av, &bv, |x, y| x - y)?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push(
            out,
            ra || rb,
            Some(Box::new(move |g, grads| {
                if ra {
                    grads.accumulate(a, reduce_to_shape(g, &ash));
                }
                if rb {
                    let neg = g.map(|v| -v);
                    grads.accumulate(b, reduce_to_shape(&neg, &bsh));
                }
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let out = binary_op("mul", &av, &bv, |x, y| x * y)?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push(
            out,
            ra || rb,
            Some(Box::new(move |g, grads| {
                if ra {
                    let ga = binary_op("mul_bwd", g, &bv, |x, y| x * y)
                        .expect("broadcast validated at record time");
                    grads.accumulate(a, reduce_to_shape(&ga, &ash));
                }
                if rb {
                    let gb = binary_op("mul_bwd", g, &av, |x, y| x * y)
                        .expect("broadcast validated at record time");
                    grads.accumulate(b, reduce_to_shape(&gb, &bsh));
                }
            })),
        ))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let ra = self.requires_grad(a);
        self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, g.map(|v| -v));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        let out = self.value(a).map(|x| x * cs);
        let ra = self.requires_grad(a);
        self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, g.map(|v| v * cs));
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        let out = self.value(a).map(|x| x + cs);
        let ra = self.requires_grad(a);
        self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, g.clone());
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let y = out.clone();
        let ra = self.requires_grad(a);
        self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, zip_map(g, &y, |gv, yv| gv * yv));
            })),
        )
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn log(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = av.map(|x| x.ln());
        let ra = self.requires_grad(a);
        self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, zip_map(g, &av, |gv, xv| gv / xv));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = av.map(|x| x.max(S::ZERO));
        let ra = self.requires_grad(a);
        self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(
                    a,
                    zip_map(g, &av, |gv, xv| if xv > S::ZERO { gv } else { S::ZERO }),
                );
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = av.map(gelu_val);
        let ra = self.requires_grad(a);
        self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, zip_map(g, &av, |gv, xv| gv * gelu_grad(xv)));
            })),
        )
    }

    /// Clamp to [lo, hi]; gradient passes through inside the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (ls, hs) = (S::from_f64(lo), S::from_f64(hi));
        let av = self.value_arc(a);
        let out = av.map(|x| if x < ls { ls } else if x > hs { hs } else { x });
        let ra = self.requires_grad(a);
        self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(
                    a,
                    zip_map(g, &av, |gv, xv| {
                        if xv >= ls && xv <= hs {
                            gv
                        } else {
                            S::ZERO
                        }
                    }),
                );
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let out = av.matmul(&bv)?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let r = av.rank();
        let (m, k, n) = (
            av.shape()[r - 2],
            av.shape()[r - 1],
            bv.shape()[bv.rank() - 1],
        );
        Ok(self.push(
            out,
            ra || rb,
            Some(Box::new(move |g, grads| {
                if ra {
                    grads.accumulate(a, matmul_da(g, &bv, m, k, n));
                }
                if rb {
                    grads.accumulate(b, matmul_db(&av, g, m, k, n));
                }
            })),
        ))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose_last()?;
        let ra = self.requires_grad(a);
        Ok(self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, g.transpose_last().expect("rank validated"));
            })),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = self.value_arc(a);
        let out = av.reshaped(shape)?;
        let ra = self.requires_grad(a);
        let orig = av.shape().to_vec();
        Ok(self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, g.reshaped(orig.clone()).expect("numel validated"));
            })),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let mut total = S::ZERO;
        for &v in av.data() {
            total += v;
        }
        let ra = self.requires_grad(a);
        let shape = av.shape().to_vec();
        self.push(
            Tensor::scalar(total),
            ra,
            Some(Box::new(move |g, grads| {
                let gv = g.data()[0];
                grads.accumulate(a, Tensor::full(shape.clone(), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last dimension: (..., n) -> (...).
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value_arc(a);
        if av.rank() == 0 {
            return Err(Error::shape("sum_last", av.shape(), "rank >= 1 required"));
        }
        let n = av.shape()[av.rank() - 1];
        let out_shape = av.shape()[..av.rank() - 1].to_vec();
        let data: Vec<S> = av
            .data()
            .chunks(n)
            .map(|row| {
                let mut s = S::ZERO;
                for &v in row {
                    s += v;
                }
                s
            })
            .collect();
        let out = Tensor::from_vec(out_shape, data)?;
        let ra = self.requires_grad(a);
        let xshape = av.shape().to_vec();
        Ok(self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                let mut gx = vec![S::ZERO; xshape.iter().product()];
                for (i, chunk) in gx.chunks_mut(n).enumerate() {
                    let gv = g.data()[i];
                    for c in chunk {
                        *c = gv;
                    }
                }
                grads.accumulate(a, Tensor::from_vec(xshape.clone(), gx).expect("shape"));
            })),
        ))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_last()?;
        let y = out.clone();
        let n = y.shape()[y.rank() - 1];
        let ra = self.requires_grad(a);
        Ok(self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                let mut gx = vec![S::ZERO; y.numel()];
                for (r, chunk) in gx.chunks_mut(n).enumerate() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mut dot = S::ZERO;
                    for (&gv, &yv) in gr.iter().zip(yr.iter()) {
                        dot += gv * yv;
                    }
                    for ((c, &gv), &yv) in chunk.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                        *c = yv * (gv - dot);
                    }
                }
                grads.accumulate(
                    a,
                    Tensor::from_vec(y.shape().to_vec(), gx).expect("shape"),
                );
            })),
        ))
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log_softmax_last()?;
        let lsm = out.clone();
        let n = lsm.shape()[lsm.rank() - 1];
        let ra = self.requires_grad(a);
        Ok(self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                let mut gx = vec![S::ZERO; lsm.numel()];
                for (r, chunk) in gx.chunks_mut(n).enumerate() {
                    let lr = &lsm.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mut gsum = S::ZERO;
                    for &gv in gr {
                        gsum += gv;
                    }
                    for ((c, &gv), &lv) in chunk.iter_mut().zip(gr.iter()).zip(lr.iter()) {
                        *c = gv - lv.exp() * gsum;
                    }
                }
                grads.accumulate(
                    a,
                    Tensor::from_vec(lsm.shape().to_vec(), gx).expect("shape"),
                );
            })),
        ))
    }

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value_arc(x);
        let gv = self.value_arc(gain);
        let bv = self.value_arc(bias);
        if xv.rank() == 0 {
            return Err(Error::shape("layer_norm", xv.shape(), "rank >= 1 required"));
        }
        let n = xv.shape()[xv.rank() - 1];
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / n;
        let e = S::from_f64(eps);
        let inv_n = S::ONE / S::from_f64(n as f64);
        let mut xhat = vec![S::ZERO; xv.numel()];
        let mut inv = Vec::with_capacity(rows);
        let mut out = vec![S::ZERO; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mut mu = S::ZERO;
            for &v in row {
                mu += v;
            }
            mu = mu * inv_n;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var = var * inv_n;
            let iv = S::ONE / (var + e).sqrt();
            inv.push(iv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mu) * iv;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let xhat = Tensor::from_vec(xv.shape().to_vec(), xhat)?;
        let (rx, rg, rb) = (
            self.requires_grad(x),
            self.requires_grad(gain),
            self.requires_grad(bias),
        );
        let xshape = xv.shape().to_vec();
        Ok(self.push(
            out,
            rx || rg || rb,
            Some(Box::new(move |g, grads| {
                if rg {
                    let mut dg = vec![S::ZERO; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g.data()[r * n + j] * xhat.data()[r * n + j];
                        }
                    }
                    grads.accumulate(gain, Tensor::from_vec(vec![n], dg).expect("shape"));
                }
                if rb {
                    let mut db = vec![S::ZERO; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g.data()[r * n + j];
                        }
                    }
                    grads.accumulate(bias, Tensor::from_vec(vec![n], db).expect("shape"));
                }
                if rx {
                    let mut dx = vec![S::ZERO; rows * n];
                    for r in 0..rows {
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let xr = &xhat.data()[r * n..(r + 1) * n];
                        let mut m1 = S::ZERO;
                        let mut m2 = S::ZERO;
                        let mut dxh = vec![S::ZERO; n];
                        for j in 0..n {
                            dxh[j] = gr[j] * gv.data()[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xr[j];
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        for j in 0..n {
                            dx[r * n + j] = inv[r] * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                    grads.accumulate(x, Tensor::from_vec(xshape.clone(), dx).expect("shape"));
                }
            })),
        ))
    }

    /// Scale rows (last dimension) to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value_arc(a);
        let (out, norms) = av.l2_normalize_raw(eps)?;
        let n = av.shape()[av.rank() - 1];
        let ra = self.requires_grad(a);
        let e = S::from_f64(eps);
        Ok(self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                let rows = av.numel() / n;
                let mut dx = vec![S::ZERO; av.numel()];
                for r in 0..rows {
                    let xr = &av.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let rn = norms[r];
                    let s = rn + e;
                    let mut dot = S::ZERO;
                    for (&gv, &xv) in gr.iter().zip(xr.iter()) {
                        dot += gv * xv;
                    }
                    let factor = if rn > S::ZERO {
                        dot / (s * s * rn)
                    } else {
                        S::ZERO
                    };
                    for j in 0..n {
                        dx[r * n + j] = gr[j] / s - xr[j] * factor;
                    }
                }
                grads.accumulate(
                    a,
                    Tensor::from_vec(av.shape().to_vec(), dx).expect("shape"),
                );
            })),
        ))
    }

    /// Diagonal of a square matrix: (n, n) -> (n).
    pub fn take_diag(&mut self, a: Var) -> Result<Var> {
        let av = self.value_arc(a);
        if av.rank() != 2 || av.shape()[0] != av.shape()[1] {
            return Err(Error::shape("take_diag", av.shape(), "square matrix required"));
        }
        let n = av.shape()[0];
        let data: Vec<S> = (0..n).map(|i| av.data()[i * n + i]).collect();
        let ra = self.requires_grad(a);
        Ok(self.push(
            Tensor::from_vec(vec![n], data)?,
            ra,
            Some(Box::new(move |g, grads| {
                let mut dx = vec![S::ZERO; n * n];
                for i in 0..n {
                    dx[i * n + i] = g.data()[i];
                }
                grads.accumulate(a, Tensor::from_vec(vec![n, n], dx).expect("shape"));
            })),
        ))
    }

    /// Select one row per batch element: (b, t, d) with idx[b] < t -> (b, d).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value_arc(a);
        if av.rank() != 3 {
            return Err(Error::shape("gather_rows", av.shape(), "rank 3 required"));
        }
        let (b, t, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        if idx.len() != b {
            return Err(Error::Input(format!(
                "gather_rows: {} indices for batch of {b}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::Input(format!(
                "gather_rows: index {bad} out of range for {t} rows"
            )));
        }
        let mut out = vec![S::ZERO; b * d];
        for (bi, &ti) in idx.iter().enumerate() {
            let from = (bi * t + ti) * d;
            out[bi * d..(bi + 1) * d].copy_from_slice(&av.data()[from..from + d]);
        }
        let ra = self.requires_grad(a);
        let idx = idx.to_vec();
        Ok(self.push(
            Tensor::from_vec(vec![b, d], out)?,
            ra,
            Some(Box::new(move |g, grads| {
                let mut dx = vec![S::ZERO; b * t * d];
                for (bi, &ti) in idx.iter().enumerate() {
                    let to = (bi * t + ti) * d;
                    for j in 0..d {
                        dx[to + j] += g.data()[bi * d + j];
                    }
                }
                grads.accumulate(a, Tensor::from_vec(vec![b, t, d], dx).expect("shape"));
            })),
        ))
    }

    /// Embedding lookup: table (v, d), ids laid out as `leading` -> leading + [d].
    pub fn embed(&mut self, table: Var, ids: &[usize], leading: &[usize]) -> Result<Var> {
        let tv = self.value_arc(table);
        if tv.rank() != 2 {
            return Err(Error::shape("embed", tv.shape(), "rank 2 table required"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let count: usize = leading.iter().product();
        if ids.len() != count {
            return Err(Error::Input(format!(
                "embed: {} ids but leading shape wants {count}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "embed: id {bad} out of range for vocab {v}"
            )));
        }
        let mut out = vec![S::ZERO; count * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = leading.to_vec();
        shape.push(d);
        let ra = self.requires_grad(table);
        let ids = ids.to_vec();
        Ok(self.push(
            Tensor::from_vec(shape, out)?,
            ra,
            Some(Box::new(move |g, grads| {
                let mut dt = vec![S::ZERO; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[i * d + j];
                    }
                }
                grads.accumulate(table, Tensor::from_vec(vec![v, d], dt).expect("shape"));
            })),
        ))
    }

    /// Prepend a learned token to every sequence: (d) + (b, p, d) -> (b, p+1, d).
    pub fn prepend_token(&mut self, tok: Var, x: Var) -> Result<Var> {
        let tv = self.value_arc(tok);
        let xv = self.value_arc(x);
        if xv.rank() != 3 {
            return Err(Error::shape("prepend_token", xv.shape(), "rank 3 required"));
        }
        let (b, p, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if tv.shape() != [d] {
            return Err(Error::dim("prepend_token", tv.shape(), xv.shape()));
        }
        let mut out = vec![S::ZERO; b * (p + 1) * d];
        for bi in 0..b {
            let base = bi * (p + 1) * d;
            out[base..base + d].copy_from_slice(tv.data());
            out[base + d..base + (p + 1) * d]
                .copy_from_slice(&xv.data()[bi * p * d..(bi + 1) * p * d]);
        }
        let (rt, rx) = (self.requires_grad(tok), self.requires_grad(x));
        Ok(self.push(
            Tensor::from_vec(vec![b, p + 1, d], out)?,
            rt || rx,
            Some(Box::new(move |g, grads| {
                if rt {
                    let mut dt = vec![S::ZERO; d];
                    for bi in 0..b {
                        let base = bi * (p + 1) * d;
                        for j in 0..d {
                            dt[j] += g.data()[base + j];
                        }
                    }
                    grads.accumulate(tok, Tensor::from_vec(vec![d], dt).expect("shape"));
                }
                if rx {
                    let mut dx = vec![S::ZERO; b * p * d];
                    for bi in 0..b {
                        let base = bi * (p + 1) * d + d;
                        dx[bi * p * d..(bi + 1) * p * d]
                            .copy_from_slice(&g.data()[base..base + p * d]);
                    }
                    grads.accumulate(x, Tensor::from_vec(vec![b, p, d], dx).expect("shape"));
                }
            })),
        ))
    }

    /// (b, t, d) -> (b*heads, t, d/heads), splitting the channel dimension.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = self.value_arc(a);
        if av.rank() != 3 {
            return Err(Error::shape("split_heads", av.shape(), "rank 3 required"));
        }
        let d = av.shape()[2];
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "split_heads",
                av.shape(),
                format!("channel dim {d} not divisible by {heads} heads"),
            ));
        }
        let out = split_heads_data(&av, heads);
        let ra = self.requires_grad(a);
        Ok(self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, merge_heads_data(g, heads));
            })),
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = self.value_arc(a);
        if av.rank() != 3 {
            return Err(Error::shape("merge_heads", av.shape(), "rank 3 required"));
        }
        if heads == 0 || av.shape()[0] % heads != 0 {
            return Err(Error::shape(
                "merge_heads",
                av.shape(),
                format!("batch dim {} not divisible by {heads} heads", av.shape()[0]),
            ));
        }
        let out = merge_heads_data(&av, heads);
        let ra = self.requires_grad(a);
        Ok(self.push(
            out,
            ra,
            Some(Box::new(move |g, grads| {
                grads.accumulate(a, split_heads_data(g, heads));
            })),
        ))
    }
}
