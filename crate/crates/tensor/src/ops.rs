//! Differentiable operations on tape variables.
//!
//! Every op validates shapes up front, computes the forward value, and
//! registers a backward closure that accumulates into parent slots. Ops
//! capture cloned input values where the derivative needs them; tapes are
//! short-lived so the extra copies stay bounded.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::TensorError;

/// Reduction applied by fused loss ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// `out = alpha * op(a) * op(b) + beta * out` where `op` is optional
/// transposition expressed through strides. Row-major buffers throughout.
fn gemm_into<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    beta: T,
    out: &mut Tensor<T>,
) {
    let (m, k) = if ta {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (kb, n) = if tb {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    debug_assert_eq!(k, kb);
    debug_assert_eq!(out.rows(), m);
    debug_assert_eq!(out.cols(), n);
    let (rsa, csa) = if ta {
        (1, a.cols() as isize)
    } else {
        (a.cols() as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols() as isize)
    } else {
        (b.cols() as isize, 1)
    };
    let rsc = out.cols() as isize;
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            out.data_mut().as_mut_ptr(),
            rsc,
            1,
        );
    }
}

fn matmul_fresh<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let m = if ta { a.cols() } else { a.rows() };
    let n = if tb { b.rows() } else { b.cols() };
    let mut out = Tensor::zeros(m, n);
    gemm_into(a, ta, b, tb, T::ZERO, &mut out);
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Result<Var<'t, T>, TensorError> {
        let (value, x) = self
            .tape
            .with_values(&[self.idx], |vs| (vs[0].map(&f), vs[0].clone()));
        let idx = self.idx;
        self.tape.push(
            op,
            value,
            Some(Box::new(move |g, sink| {
                let mut contrib = Tensor::zeros(x.rows(), x.cols());
                for ((c, &gv), &xv) in contrib.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *c = gv * df(xv);
                }
                sink.accumulate(idx, contrib);
            })),
        )
    }

    fn binary_same_shape(
        self,
        rhs: Var<'t, T>,
        op: &'static str,
    ) -> Result<(usize, usize), TensorError> {
        self.same_tape(rhs)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok((self.idx, rhs.idx))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (ia, ib) = self.binary_same_shape(rhs, "add")?;
        let value = self.tape.with_values(&[ia, ib], |vs| {
            let mut out = vs[0].clone();
            for (o, &b) in out.data_mut().iter_mut().zip(vs[1].data()) {
                *o += b;
            }
            out
        });
        self.tape.push(
            "add",
            value,
            Some(Box::new(move |g, sink| {
                sink.accumulate(ia, g.clone());
                sink.accumulate(ib, g.clone());
            })),
        )
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (ia, ib) = self.binary_same_shape(rhs, "sub")?;
        let value = self.tape.with_values(&[ia, ib], |vs| {
            let mut out = vs[0].clone();
            for (o, &b) in out.data_mut().iter_mut().zip(vs[1].data()) {
                *o -= b;
            }
            out
        });
        self.tape.push(
            "sub",
            value,
            Some(Box::new(move |g, sink| {
                sink.accumulate(ia, g.clone());
                sink.accumulate(ib, g.map(|x| -x));
            })),
        )
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (ia, ib) = self.binary_same_shape(rhs, "mul")?;
        let (value, a, b) = self.tape.with_values(&[ia, ib], |vs| {
            let mut out = vs[0].clone();
            for (o, &b) in out.data_mut().iter_mut().zip(vs[1].data()) {
                *o *= b;
            }
            (out, vs[0].clone(), vs[1].clone())
        });
        self.tape.push(
            "mul",
            value,
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(a.rows(), a.cols());
                let mut db = Tensor::zeros(b.rows(), b.cols());
                for i in 0..g.data().len() {
                    da.data_mut()[i] = g.data()[i] * b.data()[i];
                    db.data_mut()[i] = g.data()[i] * a.data()[i];
                }
                sink.accumulate(ia, da);
                sink.accumulate(ib, db);
            })),
        )
    }

    /// Adds a `1 x n` row vector to every row of an `m x n` input.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(row)?;
        let (sx, sr) = (self.shape(), row.shape());
        if sr.rows != 1 || sr.cols != sx.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: sx,
                rhs: sr,
            });
        }
        let (ix, ir) = (self.idx, row.idx);
        let value = self.tape.with_values(&[ix, ir], |vs| {
            let mut out = vs[0].clone();
            let cols = out.cols();
            for r in 0..out.rows() {
                for c in 0..cols {
                    let v = out.get(r, c) + vs[1].data()[c];
                    out.set(r, c, v);
                }
            }
            out
        });
        self.tape.push(
            "add_row",
            value,
            Some(Box::new(move |g, sink| {
                sink.accumulate(ix, g.clone());
                let mut dr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dr.data_mut()[c] += g.get(r, c);
                    }
                }
                sink.accumulate(ir, dr);
            })),
        )
    }

    /// Adds a constant tensor (no gradient to the constant). Used for
    /// additive attention masks.
    pub fn add_const(self, konst: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let sx = self.shape();
        if sx != konst.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add_const",
                lhs: sx,
                rhs: konst.shape(),
            });
        }
        let ix = self.idx;
        let value = self.tape.with_values(&[ix], |vs| {
            let mut out = vs[0].clone();
            for (o, &k) in out.data_mut().iter_mut().zip(konst.data()) {
                *o += k;
            }
            out
        });
        self.tape.push(
            "add_const",
            value,
            Some(Box::new(move |g, sink| sink.accumulate(ix, g.clone()))),
        )
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>, TensorError> {
        self.unary("scale", move |x| x * c, move |_| c)
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>, TensorError> {
        self.unary("add_scalar", move |x| x + c, |_| T::ONE)
    }

    pub fn neg(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("neg", |x| -x, |_| -T::ONE)
    }

    pub fn relu(self) -> Result<Var<'t, T>, TensorError> {
        self.unary(
            "relu",
            |x| x.maximum(T::ZERO),
            |x| if x > T::ZERO { T::ONE } else { T::ZERO },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t, T>, TensorError> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        self.unary(
            "gelu",
            move |x| {
                let u = c * (x + a * x * x * x);
                half * x * (T::ONE + u.tanh())
            },
            move |x| {
                let u = c * (x + a * x * x * x);
                let th = u.tanh();
                let du = c * (T::ONE + three * a * x * x);
                half * (T::ONE + th) + half * x * (T::ONE - th * th) * du
            },
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>, TensorError> {
        fn sig<T: Scalar>(x: T) -> T {
            if x >= T::ZERO {
                T::ONE / (T::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::ONE + e)
            }
        }
        self.unary("sigmoid", sig, |x| {
            let s = sig(x);
            s * (T::ONE - s)
        })
    }

    /// Numerically stable `ln(sigmoid(x)) = min(x, 0) - ln(1 + exp(-|x|))`.
    pub fn log_sigmoid(self) -> Result<Var<'t, T>, TensorError> {
        self.unary(
            "log_sigmoid",
            |x| {
                let clipped = if x > T::ZERO { T::ZERO } else { x };
                clipped - (T::ONE + (-x.abs()).exp()).ln()
            },
            |x| {
                // d/dx ln sigma(x) = sigma(-x)
                if x >= T::ZERO {
                    let e = (-x).exp();
                    e / (T::ONE + e)
                } else {
                    T::ONE / (T::ONE + x.exp())
                }
            },
        )
    }

    pub fn tanh_act(self) -> Result<Var<'t, T>, TensorError> {
        self.unary(
            "tanh",
            |x| x.tanh(),
            |x| {
                let t = x.tanh();
                T::ONE - t * t
            },
        )
    }

    pub fn exp_all(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("exp", |x| x.exp(), |x| x.exp())
    }

    pub fn ln_all(self) -> Result<Var<'t, T>, TensorError> {
        self.unary("ln", |x| x.ln(), |x| T::ONE / x)
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(rhs)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.cols != sb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (ia, ib) = (self.idx, rhs.idx);
        let (value, a, b) = self.tape.with_values(&[ia, ib], |vs| {
            (matmul_fresh(vs[0], false, vs[1], false), vs[0].clone(), vs[1].clone())
        });
        self.tape.push(
            "matmul",
            value,
            Some(Box::new(move |g, sink| {
                sink.accumulate(ia, matmul_fresh(g, false, &b, true));
                sink.accumulate(ib, matmul_fresh(&a, true, g, false));
            })),
        )
    }

    /// `A x B^T`: `a[m x k]`, `b[n x k]` -> `[m x n]`. Saves a transpose in
    /// attention score computation.
    pub fn matmul_nt(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(rhs)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.cols != sb.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (ia, ib) = (self.idx, rhs.idx);
        let (value, a, b) = self.tape.with_values(&[ia, ib], |vs| {
            (matmul_fresh(vs[0], false, vs[1], true), vs[0].clone(), vs[1].clone())
        });
        self.tape.push(
            "matmul_nt",
            value,
            Some(Box::new(move |g, sink| {
                sink.accumulate(ia, matmul_fresh(g, false, &b, false));
                sink.accumulate(ib, matmul_fresh(g, true, &a, false));
            })),
        )
    }

    /// `A^T x B`: `a[k x m]`, `b[k x n]` -> `[m x n]`.
    pub fn matmul_tn(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(rhs)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.rows != sb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                lhs: sa,
                rhs: sb,
            });
        }
        let (ia, ib) = (self.idx, rhs.idx);
        let (value, a, b) = self.tape.with_values(&[ia, ib], |vs| {
            (matmul_fresh(vs[0], true, vs[1], false), vs[0].clone(), vs[1].clone())
        });
        self.tape.push(
            "matmul_tn",
            value,
            Some(Box::new(move |g, sink| {
                sink.accumulate(ia, matmul_fresh(&b, false, g, true));
                sink.accumulate(ib, matmul_fresh(&a, false, g, false));
            })),
        )
    }

    pub fn narrow_rows(self, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let s = self.shape();
        if start + len > s.rows {
            return Err(TensorError::IndexOutOfBounds {
                op: "narrow_rows",
                index: start + len,
                limit: s.rows,
            });
        }
        let ix = self.idx;
        let (rows, cols) = (s.rows, s.cols);
        let value = self.tape.with_values(&[ix], |vs| {
            Tensor::from_vec(
                len,
                cols,
                vs[0].data()[start * cols..(start + len) * cols].to_vec(),
            )
            .expect("narrow_rows slice length")
        });
        self.tape.push(
            "narrow_rows",
            value,
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(rows, cols);
                dx.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                sink.accumulate(ix, dx);
            })),
        )
    }

    pub fn narrow_cols(self, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let s = self.shape();
        if start + len > s.cols {
            return Err(TensorError::IndexOutOfBounds {
                op: "narrow_cols",
                index: start + len,
                limit: s.cols,
            });
        }
        let ix = self.idx;
        let (rows, cols) = (s.rows, s.cols);
        let value = self.tape.with_values(&[ix], |vs| {
            let mut out = Tensor::zeros(rows, len);
            for r in 0..rows {
                for c in 0..len {
                    out.set(r, c, vs[0].get(r, start + c));
                }
            }
            out
        });
        self.tape.push(
            "narrow_cols",
            value,
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dx.set(r, start + c, g.get(r, c));
                    }
                }
                sink.accumulate(ix, dx);
            })),
        )
    }

    /// Row lookup by index list; duplicate indices accumulate gradient.
    /// This is the embedding-lookup primitive.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let s = self.shape();
        if let Some(&bad) = ids.iter().find(|&&i| i >= s.rows) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                limit: s.rows,
            });
        }
        let ix = self.idx;
        let (rows, cols) = (s.rows, s.cols);
        let ids: Vec<usize> = ids.to_vec();
        let value = self.tape.with_values(&[ix], |vs| {
            let mut out = Tensor::zeros(ids.len(), cols);
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..cols {
                    out.set(r, c, vs[0].get(id, c));
                }
            }
            out
        });
        self.tape.push(
            "gather_rows",
            value,
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        let v = dx.get(id, c) + g.get(r, c);
                        dx.set(id, c, v);
                    }
                }
                sink.accumulate(ix, dx);
            })),
        )
    }

    pub fn sum_all(self) -> Result<Var<'t, T>, TensorError> {
        let ix = self.idx;
        let s = self.shape();
        let value = self
            .tape
            .with_values(&[ix], |vs| Tensor::scalar(vs[0].data().iter().copied().sum()));
        self.tape.push(
            "sum_all",
            value,
            Some(Box::new(move |g, sink| {
                let gv = g.data()[0];
                sink.accumulate(ix, Tensor::full(s.rows, s.cols, gv));
            })),
        )
    }

    pub fn mean_all(self) -> Result<Var<'t, T>, TensorError> {
        let ix = self.idx;
        let s = self.shape();
        let n = T::from_f64(s.len() as f64);
        let value = self.tape.with_values(&[ix], |vs| {
            Tensor::scalar(vs[0].data().iter().copied().sum::<T>() / n)
        });
        self.tape.push(
            "mean_all",
            value,
            Some(Box::new(move |g, sink| {
                let gv = g.data()[0] / n;
                sink.accumulate(ix, Tensor::full(s.rows, s.cols, gv));
            })),
        )
    }

    /// Per-channel max over non-overlapping 2x2 windows of a grid stored as
    /// `(gh*gw) x d` in row-major grid order. Gradient routes to the argmax
    /// cell; ties go to the first cell in scan order.
    pub fn maxpool2d(self, gh: usize, gw: usize) -> Result<Var<'t, T>, TensorError> {
        let s = self.shape();
        if gh * gw != s.rows {
            return Err(TensorError::InvalidArg {
                op: "maxpool2d",
                msg: format!("grid {gh}x{gw} does not cover {} rows", s.rows),
            });
        }
        if gh % 2 != 0 || gw % 2 != 0 {
            return Err(TensorError::InvalidArg {
                op: "maxpool2d",
                msg: format!("grid {gh}x{gw} must have even sides"),
            });
        }
        let (oh, ow, d) = (gh / 2, gw / 2, s.cols);
        let ix = self.idx;
        let (value, argmax) = self.tape.with_values(&[ix], |vs| {
            let x = vs[0];
            let mut out = Tensor::zeros(oh * ow, d);
            let mut arg = vec![0usize; oh * ow * d];
            for r in 0..oh {
                for c in 0..ow {
                    let orow = r * ow + c;
                    let cells = [
                        2 * r * gw + 2 * c,
                        2 * r * gw + 2 * c + 1,
                        (2 * r + 1) * gw + 2 * c,
                        (2 * r + 1) * gw + 2 * c + 1,
                    ];
                    for j in 0..d {
                        let mut best = cells[0];
                        let mut bv = x.get(cells[0], j);
                        for &cell in &cells[1..] {
                            let v = x.get(cell, j);
                            if v > bv {
                                bv = v;
                                best = cell;
                            }
                        }
                        out.set(orow, j, bv);
                        arg[orow * d + j] = best;
                    }
                }
            }
            (out, arg)
        });
        let rows = s.rows;
        self.tape.push(
            "maxpool2d",
            value,
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(rows, d);
                for orow in 0..oh * ow {
                    for j in 0..d {
                        let cell = argmax[orow * d + j];
                        let v = dx.get(cell, j) + g.get(orow, j);
                        dx.set(cell, j, v);
                    }
                }
                sink.accumulate(ix, dx);
            })),
        )
    }

    /// Applies a precomputed dropout mask (entries 0 or 1/(1-rate)).
    pub fn dropout_with_mask(self, mask: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let s = self.shape();
        if s != mask.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: s,
                rhs: mask.shape(),
            });
        }
        let ix = self.idx;
        let mask = mask.clone();
        let value = self.tape.with_values(&[ix], |vs| {
            let mut out = vs[0].clone();
            for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
                *o *= m;
            }
            out
        });
        self.tape.push(
            "dropout",
            value,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                    *d *= m;
                }
                sink.accumulate(ix, dx);
            })),
        )
    }

    /// Train-mode dropout: samples a keep mask and rescales survivors.
    /// Rate 0 is the eval mode and is an exact identity.
    pub fn dropout<R: rand::Rng>(self, rate: f64, rng: &mut R) -> Result<Var<'t, T>, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArg {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(self);
        }
        let s = self.shape();
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mut mask = Tensor::zeros(s.rows, s.cols);
        for m in mask.data_mut() {
            if rng.random::<f64>() >= rate {
                *m = keep;
            }
        }
        self.dropout_with_mask(&mask)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(self) -> Result<Var<'t, T>, TensorError> {
        let ix = self.idx;
        let value = self.tape.with_values(&[ix], |vs| softmax_rows_value(vs[0]));
        let y = value.clone();
        self.tape.push(
            "softmax_rows",
            value,
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mut dot = T::ZERO;
                    for c in 0..y.cols() {
                        dot += g.get(r, c) * y.get(r, c);
                    }
                    for c in 0..y.cols() {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                sink.accumulate(ix, dx);
            })),
        )
    }

    /// Row-wise layer normalization with learned gain/bias (`1 x d` each).
    pub fn layer_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: f64,
    ) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let s = self.shape();
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            let ps = p.shape();
            if ps.rows != 1 || ps.cols != s.cols {
                return Err(TensorError::InvalidArg {
                    op: "layer_norm",
                    msg: format!("{name} shape {ps} does not match input {s}"),
                });
            }
        }
        let (ix, ig, ib) = (self.idx, gamma.idx, beta.idx);
        let epsv = T::from_f64(eps);
        let (value, xhat, inv_sigma, gvals) = self.tape.with_values(&[ix, ig, ib], |vs| {
            let (x, g, b) = (vs[0], vs[1], vs[2]);
            let d = T::from_f64(x.cols() as f64);
            let mut out = Tensor::zeros(x.rows(), x.cols());
            let mut xh = Tensor::zeros(x.rows(), x.cols());
            let mut inv = vec![T::ZERO; x.rows()];
            for r in 0..x.rows() {
                let mut mu = T::ZERO;
                for c in 0..x.cols() {
                    mu += x.get(r, c);
                }
                mu /= d;
                let mut var = T::ZERO;
                for c in 0..x.cols() {
                    let dv = x.get(r, c) - mu;
                    var += dv * dv;
                }
                var /= d;
                let is = T::ONE / (var + epsv).sqrt();
                inv[r] = is;
                for c in 0..x.cols() {
                    let h = (x.get(r, c) - mu) * is;
                    xh.set(r, c, h);
                    out.set(r, c, h * g.data()[c] + b.data()[c]);
                }
            }
            (out, xh, inv, g.clone())
        });
        self.tape.push(
            "layer_norm",
            value,
            Some(Box::new(move |g, sink| {
                let (rows, cols) = (xhat.rows(), xhat.cols());
                let d = T::from_f64(cols as f64);
                let mut dx = Tensor::zeros(rows, cols);
                let mut dgamma = Tensor::zeros(1, cols);
                let mut dbeta = Tensor::zeros(1, cols);
                for r in 0..rows {
                    // h = gamma (.) dy; dx = (h - mean(h) - xhat * mean(h (.) xhat)) / sigma
                    let mut mean_h = T::ZERO;
                    let mut mean_hx = T::ZERO;
                    for c in 0..cols {
                        let h = gvals.data()[c] * g.get(r, c);
                        mean_h += h;
                        mean_hx += h * xhat.get(r, c);
                        dgamma.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        dbeta.data_mut()[c] += g.get(r, c);
                    }
                    mean_h /= d;
                    mean_hx /= d;
                    for c in 0..cols {
                        let h = gvals.data()[c] * g.get(r, c);
                        dx.set(r, c, (h - mean_h - xhat.get(r, c) * mean_hx) * inv_sigma[r]);
                    }
                }
                sink.accumulate(ix, dx);
                sink.accumulate(ig, dgamma);
                sink.accumulate(ib, dbeta);
            })),
        )
    }

    /// Fused softmax + negative log-likelihood over rows.
    pub fn cross_entropy(
        self,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var<'t, T>, TensorError> {
        let s = self.shape();
        if targets.len() != s.rows {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy",
                msg: format!("{} targets for {} rows", targets.len(), s.rows),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= s.cols) {
            return Err(TensorError::IndexOutOfBounds {
                op: "cross_entropy",
                index: bad,
                limit: s.cols,
            });
        }
        let ix = self.idx;
        let targets: Vec<usize> = targets.to_vec();
        let (value, probs) = self.tape.with_values(&[ix], |vs| {
            let x = vs[0];
            let p = softmax_rows_value(x);
            let mut total = T::ZERO;
            for (r, &t) in targets.iter().enumerate() {
                // -ln p computed from shifted logits to avoid ln(0)
                let mut mx = x.get(r, 0);
                for c in 1..x.cols() {
                    mx = mx.maximum(x.get(r, c));
                }
                let mut lse = T::ZERO;
                for c in 0..x.cols() {
                    lse += (x.get(r, c) - mx).exp();
                }
                total += lse.ln() - (x.get(r, t) - mx);
            }
            if reduction == Reduction::Mean {
                total /= T::from_f64(x.rows() as f64);
            }
            (Tensor::scalar(total), p)
        });
        let scale = match reduction {
            Reduction::Mean => T::ONE / T::from_f64(s.rows as f64),
            Reduction::Sum => T::ONE,
        };
        self.tape.push(
            "cross_entropy",
            value,
            Some(Box::new(move |g, sink| {
                let gv = g.data()[0] * scale;
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = dx.get(r, t) - T::ONE;
                    dx.set(r, t, v);
                }
                for v in dx.data_mut() {
                    *v *= gv;
                }
                sink.accumulate(ix, dx);
            })),
        )
    }

    /// Binary cross-entropy on logits against constant targets in [0, 1],
    /// mean over all elements. Stable softplus form.
    pub fn bce_with_logits(self, targets: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let s = self.shape();
        if s != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: s,
                rhs: targets.shape(),
            });
        }
        let ix = self.idx;
        let y = targets.clone();
        let n = T::from_f64(s.len() as f64);
        let (value, x) = self.tape.with_values(&[ix], |vs| {
            let x = vs[0];
            let mut total = T::ZERO;
            for (&xv, &yv) in x.data().iter().zip(y.data()) {
                // softplus(x) - x*y, softplus(x) = max(x,0) + ln(1+exp(-|x|))
                let sp = xv.maximum(T::ZERO) + (T::ONE + (-xv.abs()).exp()).ln();
                total += sp - xv * yv;
            }
            (Tensor::scalar(total / n), x.clone())
        });
        self.tape.push(
            "bce_with_logits",
            value,
            Some(Box::new(move |g, sink| {
                let gv = g.data()[0] / n;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.data().len() {
                    let xv = x.data()[i];
                    let s = if xv >= T::ZERO {
                        T::ONE / (T::ONE + (-xv).exp())
                    } else {
                        let e = xv.exp();
                        e / (T::ONE + e)
                    };
                    dx.data_mut()[i] = gv * (s - y.data()[i]);
                }
                sink.accumulate(ix, dx);
            })),
        )
    }

    /// Mean squared error against a constant target, mean over all elements.
    pub fn mse(self, target: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let s = self.shape();
        if s != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: s,
                rhs: target.shape(),
            });
        }
        let ix = self.idx;
        let t = target.clone();
        let n = T::from_f64(s.len() as f64);
        let (value, x) = self.tape.with_values(&[ix], |vs| {
            let x = vs[0];
            let mut total = T::ZERO;
            for (&xv, &tv) in x.data().iter().zip(t.data()) {
                let d = xv - tv;
                total += d * d;
            }
            (Tensor::scalar(total / n), x.clone())
        });
        self.tape.push(
            "mse",
            value,
            Some(Box::new(move |g, sink| {
                let gv = g.data()[0] / n;
                let two = T::from_f64(2.0);
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.data().len() {
                    dx.data_mut()[i] = gv * two * (x.data()[i] - t.data()[i]);
                }
                sink.accumulate(ix, dx);
            })),
        )
    }
}

fn softmax_rows_value<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let mut mx = x.get(r, 0);
        for c in 1..x.cols() {
            mx = mx.maximum(x.get(r, c));
        }
        let mut sum = T::ZERO;
        for c in 0..x.cols() {
            let e = (x.get(r, c) - mx).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..x.cols() {
            let v = out.get(r, c) / sum;
            out.set(r, c, v);
        }
    }
    out
}

/// Vertical stack of same-width parts.
pub fn concat_rows<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>, TensorError> {
    let Some(&first) = parts.first() else {
        return Err(TensorError::InvalidArg {
            op: "concat_rows",
            msg: "empty part list".into(),
        });
    };
    let cols = first.cols();
    let mut row_spans = Vec::with_capacity(parts.len());
    let mut total = 0usize;
    for p in parts {
        first.same_tape(*p)?;
        let s = p.shape();
        if s.cols != cols {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: first.shape(),
                rhs: s,
            });
        }
        row_spans.push((p.idx(), total, s.rows));
        total += s.rows;
    }
    let idxs: Vec<usize> = parts.iter().map(|p| p.idx()).collect();
    let value = first.tape.with_values(&idxs, |vs| {
        let mut out = Tensor::zeros(total, cols);
        let mut at = 0usize;
        for v in vs {
            out.data_mut()[at * cols..(at + v.rows()) * cols].copy_from_slice(v.data());
            at += v.rows();
        }
        out
    });
    first.tape.push(
        "concat_rows",
        value,
        Some(Box::new(move |g, sink| {
            for &(idx, start, rows) in &row_spans {
                let part =
                    Tensor::from_vec(rows, cols, g.data()[start * cols..(start + rows) * cols].to_vec())
                        .expect("concat_rows grad slice");
                sink.accumulate(idx, part);
            }
        })),
    )
}

/// Horizontal stack of same-height parts. Used to rejoin attention heads.
pub fn concat_cols<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>, TensorError> {
    let Some(&first) = parts.first() else {
        return Err(TensorError::InvalidArg {
            op: "concat_cols",
            msg: "empty part list".into(),
        });
    };
    let rows = first.rows();
    let mut col_spans = Vec::with_capacity(parts.len());
    let mut total = 0usize;
    for p in parts {
        first.same_tape(*p)?;
        let s = p.shape();
        if s.rows != rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: first.shape(),
                rhs: s,
            });
        }
        col_spans.push((p.idx(), total, s.cols));
        total += s.cols;
    }
    let idxs: Vec<usize> = parts.iter().map(|p| p.idx()).collect();
    let value = first.tape.with_values(&idxs, |vs| {
        let mut out = Tensor::zeros(rows, total);
        let mut at = 0usize;
        for v in vs {
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, at + c, v.get(r, c));
                }
            }
            at += v.cols();
        }
        out
    });
    first.tape.push(
        "concat_cols",
        value,
        Some(Box::new(move |g, sink| {
            for &(idx, start, cols) in &col_spans {
                let mut part = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        part.set(r, c, g.get(r, start + c));
                    }
                }
                sink.accumulate(idx, part);
            }
        })),
    )
}

/// Plain (non-tape) matrix product for inference-time helpers.
pub fn matmul_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.cols() != b.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(matmul_fresh(a, false, b, false))
}

/// Non-tape row-wise softmax, shared with inference paths.
pub fn softmax_rows_plain<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    softmax_rows_value(x)
}

#[allow(unused)]
fn _tape_type_holds<T: Scalar>(_t: &Tape<T>) {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn t64(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_oracle() {
        let tape = Tape::<f64>::new();
        let i2 = tape.leaf(t64(2, 2, &[1., 0., 0., 1.]));
        let a = tape.leaf(t64(2, 2, &[1., 2., 3., 4.]));
        let b = tape.leaf(t64(2, 2, &[5., 6., 7., 8.]));
        assert_eq!(i2.matmul(a).unwrap().value().data(), &[1., 2., 3., 4.]);
        assert_eq!(a.matmul(b).unwrap().value().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn cross_entropy_uniform_logits_sum() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(3, 4));
        let loss = logits
            .cross_entropy(&[0, 1, 2], Reduction::Sum)
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - 3.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_prediction() {
        let tape = Tape::<f64>::new();
        let mut x = Tensor::zeros(1, 4);
        x.set(0, 2, 1e9);
        let logits = tape.leaf(x);
        let loss = logits
            .cross_entropy(&[2], Reduction::Mean)
            .unwrap()
            .item()
            .unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let tape = Tape::<f64>::new();
        let vals = [0.3, -1.2, 0.7, 2.0, -0.5, 0.1];
        let logits = tape.leaf(t64(2, 3, &vals));
        let loss = logits
            .cross_entropy(&[2, 0], Reduction::Mean)
            .unwrap()
            .item()
            .unwrap();
        let mut direct = 0.0;
        for (r, &t) in [2usize, 0].iter().enumerate() {
            let row = &vals[r * 3..(r + 1) * 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            direct += -(row[t].exp() / z).ln();
        }
        direct /= 2.0;
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn maxpool_forced_maximum() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(4, 1, &[1., 2., 3., 4.]));
        let y = x.maxpool2d(2, 2).unwrap();
        assert_eq!(y.value().data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant_input() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(16, 3, 2.5));
        let y = x.maxpool2d(4, 4).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_scan_order() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(4, 1, 1.0));
        let y = x.maxpool2d(2, 2).unwrap().sum_all().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(2, 3, &[1., -2., 0.5, 10., 10., -3.]));
        let y = x.softmax_rows().unwrap().value();
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| y.get(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(2, 2, &[1., 2., 3., 4.]));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(y.idx(), x.idx());
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let y = x.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(y.value().data(), &[3., 4., 3., 4., 1., 2.]);
        let loss = y.sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1., 1., 2., 2., 0., 0.]);
    }

    #[test]
    fn masked_attention_scores_block_future() {
        // A -1e9 additive mask drives softmax weight to ~0.
        let tape = Tape::<f64>::new();
        let scores = tape.leaf(t64(1, 2, &[0.0, 0.0]));
        let mask = t64(1, 2, &[0.0, -1e9]);
        let p = scores.add_const(&mask).unwrap().softmax_rows().unwrap().value();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(p.get(0, 1).abs() < 1e-12);
    }
}
