//! Composite neural layers built from tape primitives.
//!
//! Layers are lightweight descriptors: they own a dotted name prefix and
//! dimensions, declare their parameters into a [`ParamStore`], and build
//! graph nodes through a [`Binder`] at apply time.

use crate::ops::concat_cols;
use crate::params::{Binder, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::TensorError;

/// Additive mask value for blocked attention positions.
pub const MASK_NEG: f64 = -1e9;

pub struct Linear {
    name: String,
    pub d_in: usize,
    pub d_out: usize,
    bias: bool,
    zero_init: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear {
            name: name.into(),
            d_in,
            d_out,
            bias: true,
            zero_init: false,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Zero-initialized weight and bias; the layer starts as the zero map.
    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<(), TensorError> {
        let w_init = if self.zero_init { Init::Zeros } else { Init::Xavier };
        ps.declare(&format!("{}.w", self.name), self.d_in, self.d_out, w_init)?;
        if self.bias {
            ps.declare(&format!("{}.b", self.name), 1, self.d_out, Init::Zeros)?;
        }
        Ok(())
    }

    pub fn apply<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let w = bd.var(&format!("{}.w", self.name))?;
        let y = x.matmul(w)?;
        if self.bias {
            let b = bd.var(&format!("{}.b", self.name))?;
            y.add_row(b)
        } else {
            Ok(y)
        }
    }
}

pub struct LayerNorm {
    name: String,
    pub d: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        LayerNorm {
            name: name.into(),
            d,
            eps: 1e-5,
        }
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<(), TensorError> {
        ps.declare(&format!("{}.g", self.name), 1, self.d, Init::Ones)?;
        ps.declare(&format!("{}.b", self.name), 1, self.d, Init::Zeros)
    }

    pub fn apply<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let g = bd.var(&format!("{}.g", self.name))?;
        let b = bd.var(&format!("{}.b", self.name))?;
        x.layer_norm(g, b, self.eps)
    }
}

/// Two-layer MLP with GELU, `d -> hidden -> d_out`.
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(name: impl Into<String>, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let name = name.into();
        FeedForward {
            fc1: Linear::new(format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<(), TensorError> {
        self.fc1.declare(ps)?;
        self.fc2.declare(ps)
    }

    pub fn apply<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let h = self.fc1.apply(bd, x)?.gelu()?;
        self.fc2.apply(bd, h)
    }
}

/// Attention probability maps captured during a forward pass, one entry per
/// recorded call, each `Lq x Lk` averaged over heads.
#[derive(Default)]
pub struct AttnRecord<T: Scalar> {
    pub maps: Vec<Tensor<T>>,
}

impl<T: Scalar> AttnRecord<T> {
    pub fn new() -> Self {
        AttnRecord { maps: Vec::new() }
    }
}

pub struct MultiHeadAttention {
    name: String,
    pub d: usize,
    pub heads: usize,
    zero_init_out: bool,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, d: usize, heads: usize) -> Self {
        MultiHeadAttention {
            name: name.into(),
            d,
            heads,
            zero_init_out: false,
        }
    }

    /// Zero-initialized output projection: the whole block starts as the
    /// zero map, so adding it residually is an exact identity at init.
    pub fn zero_init_out(mut self) -> Self {
        self.zero_init_out = true;
        self
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<(), TensorError> {
        if self.d % self.heads != 0 {
            return Err(TensorError::InvalidArg {
                op: "multi_head_attention",
                msg: format!("d={} not divisible by heads={}", self.d, self.heads),
            });
        }
        for proj in ["wq", "wk", "wv"] {
            Linear::new(format!("{}.{proj}", self.name), self.d, self.d).declare(ps)?;
        }
        let mut out = Linear::new(format!("{}.wo", self.name), self.d, self.d);
        if self.zero_init_out {
            out = out.zero_init();
        }
        out.declare(ps)
    }

    /// Scaled dot-product attention, queries from `q_in`, keys/values from
    /// `kv_in`. `mask` is additive over scores (`Lq x Lk`). When `record`
    /// is given, the head-averaged probability map is appended to it.
    pub fn apply<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        q_in: Var<'t, T>,
        kv_in: Var<'t, T>,
        mask: Option<&Tensor<T>>,
        mut record: Option<&mut AttnRecord<T>>,
    ) -> Result<Var<'t, T>, TensorError> {
        if self.d % self.heads != 0 {
            return Err(TensorError::InvalidArg {
                op: "multi_head_attention",
                msg: format!("d={} not divisible by heads={}", self.d, self.heads),
            });
        }
        let dh = self.d / self.heads;
        let q = Linear::new(format!("{}.wq", self.name), self.d, self.d).apply(bd, q_in)?;
        let k = Linear::new(format!("{}.wk", self.name), self.d, self.d).apply(bd, kv_in)?;
        let v = Linear::new(format!("{}.wv", self.name), self.d, self.d).apply(bd, kv_in)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut prob_sum: Option<Tensor<T>> = None;
        for h in 0..self.heads {
            let qh = q.narrow_cols(h * dh, dh)?;
            let kh = k.narrow_cols(h * dh, dh)?;
            let vh = v.narrow_cols(h * dh, dh)?;
            let mut scores = qh.matmul_nt(kh)?.scale(scale)?;
            if let Some(m) = mask {
                scores = scores.add_const(m)?;
            }
            let probs = scores.softmax_rows()?;
            if record.is_some() {
                let pv = probs.value();
                match &mut prob_sum {
                    Some(acc) => {
                        for (a, &p) in acc.data_mut().iter_mut().zip(pv.data()) {
                            *a += p;
                        }
                    }
                    None => prob_sum = Some(pv),
                }
            }
            head_outs.push(probs.matmul(vh)?);
        }
        if let (Some(rec), Some(mut sum)) = (record.as_deref_mut(), prob_sum) {
            let inv = T::from_f64(1.0 / self.heads as f64);
            for v in sum.data_mut() {
                *v *= inv;
            }
            rec.maps.push(sum);
        }
        let merged = concat_cols(&head_outs)?;
        Linear::new(format!("{}.wo", self.name), self.d, self.d).apply(bd, merged)
    }
}

/// Additive mask where position `i` may attend to `j` iff `j < n_prefix` or
/// `j <= i`. With `n_prefix = 1` this is the standard causal mask.
pub fn prefix_lm_mask<T: Scalar>(n: usize, n_prefix: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(n, n);
    let neg = T::from_f64(MASK_NEG);
    for i in 0..n {
        for j in 0..n {
            if !(j < n_prefix || j <= i) {
                m.set(i, j, neg);
            }
        }
    }
    m
}

pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    prefix_lm_mask(n, 1)
}

/// Learned additive positional table for sequences up to `n_max`.
pub struct LearnedPos1d {
    name: String,
    pub n_max: usize,
    pub d: usize,
}

impl LearnedPos1d {
    pub fn new(name: impl Into<String>, n_max: usize, d: usize) -> Self {
        LearnedPos1d {
            name: name.into(),
            n_max,
            d,
        }
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<(), TensorError> {
        ps.declare(&format!("{}.pos", self.name), self.n_max, self.d, Init::Normal(0.02))
    }

    pub fn apply<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let n = x.rows();
        if n > self.n_max {
            return Err(TensorError::IndexOutOfBounds {
                op: "learned_pos_1d",
                index: n,
                limit: self.n_max,
            });
        }
        let table = bd.var(&format!("{}.pos", self.name))?;
        x.add(table.narrow_rows(0, n)?)
    }
}

/// Learned additive 2-D positional table: separate row and column embeddings
/// summed per grid cell. Cell `(r, c)` of a `gh x gw` grid maps to sequence
/// row `r * gw + c`.
pub struct LearnedPos2d {
    name: String,
    pub gh: usize,
    pub gw: usize,
    pub d: usize,
}

impl LearnedPos2d {
    pub fn new(name: impl Into<String>, gh: usize, gw: usize, d: usize) -> Self {
        LearnedPos2d {
            name: name.into(),
            gh,
            gw,
            d,
        }
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<(), TensorError> {
        ps.declare(&format!("{}.row", self.name), self.gh, self.d, Init::Normal(0.02))?;
        ps.declare(&format!("{}.col", self.name), self.gw, self.d, Init::Normal(0.02))
    }

    /// Positional rows for an arbitrary list of grid cells.
    pub fn lookup<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        cells: &[usize],
    ) -> Result<Var<'t, T>, TensorError> {
        if let Some(&bad) = cells.iter().find(|&&c| c >= self.gh * self.gw) {
            return Err(TensorError::IndexOutOfBounds {
                op: "learned_pos_2d",
                index: bad,
                limit: self.gh * self.gw,
            });
        }
        let rows: Vec<usize> = cells.iter().map(|&c| c / self.gw).collect();
        let cols: Vec<usize> = cells.iter().map(|&c| c % self.gw).collect();
        let re = bd.var(&format!("{}.row", self.name))?.gather_rows(&rows)?;
        let ce = bd.var(&format!("{}.col", self.name))?.gather_rows(&cols)?;
        re.add(ce)
    }

    /// Adds the positional table to a full-grid input of `gh*gw` rows.
    pub fn apply<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        if x.rows() != self.gh * self.gw {
            return Err(TensorError::InvalidArg {
                op: "learned_pos_2d",
                msg: format!("input rows {} != grid {}x{}", x.rows(), self.gh, self.gw),
            });
        }
        let cells: Vec<usize> = (0..self.gh * self.gw).collect();
        x.add(self.lookup(bd, &cells)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn linear_shapes() {
        let mut ps = ParamStore::<f64>::new(5);
        let lin = Linear::new("l", 3, 4);
        lin.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let x = tape.leaf(Tensor::zeros(2, 3));
        let y = lin.apply(&bd, x).unwrap();
        assert_eq!((y.rows(), y.cols()), (2, 4));
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let mut ps = ParamStore::<f64>::new(5);
        let mha = MultiHeadAttention::new("a", 6, 4);
        assert!(mha.declare(&mut ps).is_err());
    }

    #[test]
    fn mha_single_key_ignores_query_content() {
        let mut ps = ParamStore::<f64>::new(5);
        let mha = MultiHeadAttention::new("a", 4, 2);
        mha.declare(&mut ps).unwrap();

        let run = |qdata: &[f64]| {
            let tape = Tape::new();
            let bd = Binder::new(&tape, &ps);
            let q = tape.leaf(Tensor::from_vec(1, 4, qdata.to_vec()).unwrap());
            let kv = tape.leaf(Tensor::from_vec(1, 4, vec![0.3, -0.7, 1.1, 0.2]).unwrap());
            mha.apply(&bd, q, kv, None, None).unwrap().value()
        };
        let a = run(&[1.0, 2.0, 3.0, 4.0]);
        let b = run(&[-9.0, 0.0, 2.5, 7.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut ps = ParamStore::<f64>::new(5);
        let mha = MultiHeadAttention::new("a", 4, 2);
        mha.declare(&mut ps).unwrap();

        let run = |second_row: &[f64]| {
            let tape = Tape::new();
            let bd = Binder::new(&tape, &ps);
            let mut x = Tensor::zeros(2, 4);
            for c in 0..4 {
                x.set(0, c, 0.1 * (c as f64 + 1.0));
                x.set(1, c, second_row[c]);
            }
            let xv = tape.leaf(x);
            let mask = causal_mask::<f64>(2);
            let out = mha.apply(&bd, xv, xv, Some(&mask), None).unwrap().value();
            (0..4).map(|c| out.get(0, c)).collect::<Vec<_>>()
        };
        let a = run(&[1.0, 1.0, 1.0, 1.0]);
        let b = run(&[-5.0, 3.0, 0.0, 2.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_mask_matches_causal_at_one() {
        let p: Tensor<f64> = prefix_lm_mask(5, 1);
        let c: Tensor<f64> = causal_mask(5);
        assert_eq!(p, c);
    }

    #[test]
    fn zero_init_attention_outputs_zero() {
        let mut ps = ParamStore::<f64>::new(5);
        let mha = MultiHeadAttention::new("z", 4, 2).zero_init_out();
        mha.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        let x = tape.leaf(Tensor::full(3, 4, 0.8));
        let y = mha.apply(&bd, x, x, None, None).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pos2d_lookup_splits_row_col() {
        let mut ps = ParamStore::<f64>::new(5);
        let pos = LearnedPos2d::new("p", 2, 3, 4);
        pos.declare(&mut ps).unwrap();
        let tape = Tape::new();
        let bd = Binder::new(&tape, &ps);
        // cell 4 of a 2x3 grid is (row 1, col 1)
        let v = pos.lookup(&bd, &[4]).unwrap().value();
        let re = ps.get("p.row").unwrap();
        let ce = ps.get("p.col").unwrap();
        for c in 0..4 {
            assert_eq!(v.get(0, c), re.get(1, c) + ce.get(1, c));
        }
    }
}
