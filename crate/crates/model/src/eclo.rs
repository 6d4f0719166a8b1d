//! Low-level supervision: entity existence and location.
//!
//! A learned query per entity type cross-attends over the visual tokens.
//! An existence head scores each query with a sigmoid; a location head
//! projects each query and scores it against a learned position table,
//! contrasting the true position with sampled negatives.

use crate::config::{ClsForm, LocForm, ModelConfig};
use crate::{ModelError, Result};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use strata_tensor::nn::{Linear, MultiHeadAttention};
use strata_tensor::{concat_rows, Binder, Init, ParamStore, Reduction, Scalar, Tensor, Var};

/// Probability clamp for the existence log terms.
const CLS_EPS: f64 = 1e-7;

pub struct EntityHeads {
    attn: MultiHeadAttention,
    exist: Linear,
    loc_proj: Linear,
    pub q: usize,
    pub p: usize,
    pub d: usize,
}

pub struct EntityPrediction<'t, T: Scalar> {
    /// Attended query states, `Q x d`.
    pub h: Var<'t, T>,
    /// Existence logits, `Q x 1`.
    pub logits: Var<'t, T>,
    /// Existence probabilities, `Q x 1`.
    pub s_hat: Var<'t, T>,
    /// Projected location queries, `Q x d`.
    pub p_hat: Var<'t, T>,
}

impl EntityHeads {
    const QUERIES: &'static str = "eclo.queries";
    const POSITIONS: &'static str = "eclo.positions";

    pub fn new(cfg: &ModelConfig) -> Self {
        EntityHeads {
            attn: MultiHeadAttention::new("eclo.attn", cfg.d, cfg.heads),
            exist: Linear::new("eclo.exist", cfg.d, 1),
            loc_proj: Linear::new("eclo.loc", cfg.d, cfg.d),
            q: cfg.num_entities,
            p: cfg.num_positions,
            d: cfg.d,
        }
    }

    pub fn declare<T: Scalar>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        ps.declare(Self::QUERIES, self.q, self.d, Init::Normal(0.02))?;
        ps.declare(Self::POSITIONS, self.p, self.d, Init::Normal(0.02))?;
        self.attn.declare(ps)?;
        self.exist.declare(ps)?;
        self.loc_proj.declare(ps)?;
        Ok(())
    }

    /// The learned `P x d` position table.
    pub fn position_table<'t, T: Scalar>(&self, bd: &Binder<'_, 't, T>) -> Result<Var<'t, T>> {
        Ok(bd.var(Self::POSITIONS)?)
    }

    /// Queries attend over `f_v` (residually, so each slot keeps its
    /// identity), then the existence and location heads read the result.
    pub fn predict<'t, T: Scalar>(
        &self,
        bd: &Binder<'_, 't, T>,
        f_v: Var<'t, T>,
    ) -> Result<EntityPrediction<'t, T>> {
        let queries = bd.var(Self::QUERIES)?;
        let h = queries.add(self.attn.apply(bd, queries, f_v, None, None)?)?;
        let logits = self.exist.apply(bd, h)?;
        let s_hat = logits.sigmoid()?;
        let p_hat = self.loc_proj.apply(bd, h)?;
        Ok(EntityPrediction { h, logits, s_hat, p_hat })
    }
}

/// `Q x 1` 0/1 vector marking which entity types appear in the scene.
pub fn existence_targets<T: Scalar>(entities: &[(usize, usize)], q: usize) -> Result<Tensor<T>> {
    let mut y = Tensor::zeros(q, 1);
    for &(e, _) in entities {
        if e >= q {
            return Err(ModelError::Input(format!("entity id {e} outside Q={q}")));
        }
        y.set(e, 0, T::ONE);
    }
    Ok(y)
}

/// Existence loss over predicted probabilities `s_hat` (`Q x 1`).
///
/// Probabilities are squashed into `[eps, 1-eps]` by an affine map before
/// the logs, which keeps the loss finite and differentiable at 0 and 1.
pub fn existence_loss<'t, T: Scalar>(
    s_hat: Var<'t, T>,
    targets: &Tensor<T>,
    form: ClsForm,
) -> Result<Var<'t, T>> {
    if s_hat.shape() != targets.shape() || s_hat.cols() != 1 {
        return Err(ModelError::Input(format!(
            "existence shapes {:?} vs {:?}",
            s_hat.shape(),
            targets.shape()
        )));
    }
    let tape = s_hat.tape();
    let s = s_hat
        .scale(T::from_f64(1.0 - 2.0 * CLS_EPS))?
        .add_scalar(T::from_f64(CLS_EPS))?;
    let ln_s = s.ln_all()?;
    let pos = ln_s.mul(tape.leaf(targets.clone()))?;
    let total = match form {
        ClsForm::Literal => pos,
        ClsForm::Full => {
            let ln_1ms = s.neg()?.add_scalar(T::ONE)?.ln_all()?;
            let mut ym = targets.clone();
            for v in ym.data_mut() {
                *v = T::ONE - *v;
            }
            let neg = ln_1ms.mul(tape.leaf(ym))?;
            pos.add(neg)?
        }
    };
    Ok(total.sum_all()?.neg()?)
}

/// `m` distinct positions from `0..p` excluding `true_pos`, in draw order.
pub fn draw_negatives<R: Rng>(true_pos: usize, p: usize, m: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(true_pos < p && m < p);
    index_sample(rng, p - 1, m)
        .iter()
        .map(|i| if i >= true_pos { i + 1 } else { i })
        .collect()
}

/// Location loss with caller-provided negatives. Each entry is
/// `(query_row, true_position, negatives)`; the true position always sits
/// in score column 0.
pub fn location_loss_with_negatives<'t, T: Scalar>(
    p_hat: Var<'t, T>,
    p_tab: Var<'t, T>,
    entries: &[(usize, usize, Vec<usize>)],
    form: LocForm,
) -> Result<Var<'t, T>> {
    if entries.is_empty() {
        return Err(ModelError::Input("location loss needs at least one entity".into()));
    }
    let m = entries[0].2.len();
    let mut rows = Vec::with_capacity(entries.len());
    for (k, t, negs) in entries {
        if negs.len() != m {
            return Err(ModelError::Input("ragged negative lists".into()));
        }
        if negs.contains(t) {
            return Err(ModelError::Input(format!("true position {t} among its negatives")));
        }
        let mut ids = Vec::with_capacity(m + 1);
        ids.push(*t);
        ids.extend_from_slice(negs);
        let cand = p_tab.gather_rows(&ids)?;
        let query = p_hat.narrow_rows(*k, 1)?;
        rows.push(query.matmul_nt(cand)?);
    }
    let scores = concat_rows(&rows)?;
    match form {
        LocForm::Infonce => {
            Ok(scores.cross_entropy(&vec![0; entries.len()], Reduction::Mean)?)
        }
        LocForm::Literal => {
            let probs = scores.softmax_rows()?;
            Ok(probs.narrow_cols(0, 1)?.mean_all()?.neg()?)
        }
    }
}

/// Draws `m` negatives per present entity and scores the contrast. Returns
/// `None` for scenes with no entities (no location signal to learn from).
pub fn location_loss<'t, T: Scalar, R: Rng>(
    p_hat: Var<'t, T>,
    p_tab: Var<'t, T>,
    entities: &[(usize, usize)],
    m: usize,
    form: LocForm,
    rng: &mut R,
) -> Result<Option<Var<'t, T>>> {
    if entities.is_empty() {
        return Ok(None);
    }
    let p = p_tab.rows();
    if m >= p {
        return Err(ModelError::Config(format!("{m} negatives need at least {} positions", m + 1)));
    }
    let entries: Vec<(usize, usize, Vec<usize>)> = entities
        .iter()
        .map(|&(e, t)| (e, t, draw_negatives(t, p, m, rng)))
        .collect();
    Ok(Some(location_loss_with_negatives(p_hat, p_tab, &entries, form)?))
}
