//! Cross-modal interaction: each modality attends over its own tokens
//! using queries from the other, and a parameter-free scalar gate blends
//! the two attended sequences.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_HEADS: usize = 4;

/// Multi-head attention projections. Head `i` uses columns
/// `i * d_k .. (i + 1) * d_k` of the query, key and value matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Mha {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    heads: usize,
    dim: usize,
}

impl Mha {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "embedding width {dim} must be a positive multiple of the head count {heads}"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            query: b.uniform("query", &[dim, dim], bound)?,
            key: b.uniform("key", &[dim, dim], bound)?,
            value: b.uniform("value", &[dim, dim], bound)?,
            output: b.uniform("output", &[dim, dim], bound)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_count(&self) -> usize {
        4 * self.dim * self.dim
    }

    /// Queries from `q_in`, keys and values from `kv_in`; both `[M, E]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        q_in: Var<'t, T>,
        kv_in: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (qs, ks) = (q_in.shape(), kv_in.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.dim || ks[1] != self.dim {
            return Err(Error::shape("mha", &qs, &ks));
        }
        let q = q_in.matmul(b.var(self.query))?;
        let k = kv_in.matmul(b.var(self.key))?;
        let v = kv_in.matmul(b.var(self.value))?;
        let dk = self.head_dim();
        let scale = T::one() / T::from_usize_lossy(dk).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dk, dk)?;
            let kh = k.slice_cols(h * dk, dk)?;
            let vh = v.slice_cols(h * dk, dk)?;
            let attn = qh.matmul(kh.transpose()?)?.scale(scale).softmax();
            heads.push(attn.matmul(vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat_cols(&heads)?
        };
        cat.matmul(b.var(self.output))
    }
}

/// How the gate collapses `y_rgb ⊙ y_event` to one logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateReduction {
    /// Average over all `M * E` entries.
    #[default]
    Mean,
    /// Plain sum; saturates quickly for long or wide sequences.
    Sum,
}

/// Gated fusion result; the attended components are kept so the blend can
/// be checked.
#[derive(Clone, Copy, Debug)]
pub struct FusedSequence<'t, T: Scalar> {
    pub h: Var<'t, T>,
    /// Shape `[1]`, strictly inside `(0, 1)`.
    pub alpha: Var<'t, T>,
    pub attended_rgb: Var<'t, T>,
    pub attended_event: Var<'t, T>,
}

impl<T: Scalar> FusedSequence<'_, T> {
    pub fn alpha_value(&self) -> T {
        self.alpha.value().data()[0]
    }
}

/// `y'_rgb = mha_rgb(q = y_event, kv = y_rgb)` and symmetrically for events.
pub fn cross_interact<'t, T: Scalar>(
    b: &Binder<'t, '_, T>,
    rgb_weights: &Mha,
    event_weights: &Mha,
    y_rgb: Var<'t, T>,
    y_event: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (rs, es) = (y_rgb.shape(), y_event.shape());
    if rs.len() != 2 || es.len() != 2 || rs[0] != es[0] {
        return Err(Error::contract(format!(
            "cross interaction needs equal-length sequences, got {rs:?} and {es:?}"
        )));
    }
    Ok((
        rgb_weights.forward(b, y_event, y_rgb)?,
        event_weights.forward(b, y_rgb, y_event)?,
    ))
}

/// `alpha = sigmoid(reduce(y_rgb ⊙ y_event))`, `H = alpha y'_rgb + (1 - alpha) y'_event`.
pub fn gate_fuse<'t, T: Scalar>(
    y_rgb: Var<'t, T>,
    y_event: Var<'t, T>,
    attended_rgb: Var<'t, T>,
    attended_event: Var<'t, T>,
    reduction: GateReduction,
) -> Result<FusedSequence<'t, T>> {
    let shape = y_rgb.shape();
    for s in [
        y_event.shape(),
        attended_rgb.shape(),
        attended_event.shape(),
    ] {
        if s != shape {
            return Err(Error::shape("gate_fuse", &shape, &s));
        }
    }
    let prod = y_rgb.mul(y_event)?;
    let logit = match reduction {
        GateReduction::Mean => prod.mean(),
        GateReduction::Sum => prod.sum(),
    };
    let alpha = logit.sigmoid();
    let rest = alpha.neg().add_scalar(T::one());
    let h = attended_rgb.mul(alpha)?.add(attended_event.mul(rest)?)?;
    Ok(FusedSequence {
        h,
        alpha,
        attended_rgb,
        attended_event,
    })
}

/// Plain-value output of [`Mcib::forward_values`]: fused sequence, gate
/// weight, and the two attended modality sequences.
pub type GateValues<T> = (Tensor<T>, T, Tensor<T>, Tensor<T>);

/// Both attention blocks plus the gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Mcib {
    pub rgb: Mha,
    pub event: Mha,
    pub reduction: GateReduction,
}

impl Mcib {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        dim: usize,
        heads: usize,
        reduction: GateReduction,
    ) -> Result<Self> {
        Ok(Self {
            rgb: Mha::new(&mut b.scope("rgb"), dim, heads)?,
            event: Mha::new(&mut b.scope("event"), dim, heads)?,
            reduction,
        })
    }

    pub fn param_count(&self) -> usize {
        self.rgb.param_count() + self.event.param_count()
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        y_rgb: Var<'t, T>,
        y_event: Var<'t, T>,
    ) -> Result<FusedSequence<'t, T>> {
        let (ar, ae) = cross_interact(b, &self.rgb, &self.event, y_rgb, y_event)?;
        gate_fuse(y_rgb, y_event, ar, ae, self.reduction)
    }

    /// Value-level forward: `(H, alpha, y'_rgb, y'_event)`.
    pub fn forward_values<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        y_rgb: &Tensor<T>,
        y_event: &Tensor<T>,
    ) -> Result<GateValues<T>> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, store);
        let f = self.forward(
            &b,
            tape.constant(y_rgb.clone()),
            tape.constant(y_event.clone()),
        )?;
        Ok((
            (*f.h.value()).clone(),
            f.alpha_value(),
            (*f.attended_rgb.value()).clone(),
            (*f.attended_event.value()).clone(),
        ))
    }
}
