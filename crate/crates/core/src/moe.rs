//! Mixture of structurally different experts behind an attention router.
//!
//! The router self-attends over the fused sequence, pools it, and scores
//! every expert. Only the `k` best experts run; their class logits are
//! blended with the renormalized router probabilities.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mcib::Mha;
use crate::params::{Binder, LayerNormParams, Linear, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Tensor};

pub const DEFAULT_EXPERTS: usize = 8;
pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_DEPTH: usize = 2;
pub const DEFAULT_DROPOUT: f64 = 0.1;
/// Hidden width multiplier of a deep block.
pub const EXPANSION: usize = 4;
const FOCAL_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpertKind {
    Deep,
    Attention,
    Focal,
}

impl ExpertKind {
    pub fn code(self) -> char {
        match self {
            ExpertKind::Deep => 'D',
            ExpertKind::Attention => 'A',
            ExpertKind::Focal => 'F',
        }
    }
}

/// Ordered expert types, written as a string such as `DDDAAAFF`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertLayout(Vec<ExpertKind>);

impl ExpertLayout {
    pub fn new(kinds: Vec<ExpertKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::config("expert layout must not be empty"));
        }
        Ok(Self(kinds))
    }

    /// All three types: `3/8` deep, `3/8` attention, the rest focal.
    pub fn heterogeneous(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::config(
                "a heterogeneous pool needs at least 3 experts",
            ));
        }
        let share = (3 * n / 8).max(1);
        let mut kinds = vec![ExpertKind::Deep; share];
        kinds.extend(vec![ExpertKind::Attention; share]);
        kinds.extend(vec![ExpertKind::Focal; n - 2 * share]);
        Self::new(kinds)
    }

    /// Deep and attention experts, half each.
    pub fn two_types(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("a two-type pool needs at least 2 experts"));
        }
        let mut kinds = vec![ExpertKind::Deep; n.div_ceil(2)];
        kinds.extend(vec![ExpertKind::Attention; n / 2]);
        Self::new(kinds)
    }

    pub fn single_type(n: usize) -> Result<Self> {
        Self::new(vec![ExpertKind::Deep; n])
    }

    pub fn kinds(&self) -> &[ExpertKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ExpertLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|k| write!(f, "{}", k.code()))
    }
}

impl FromStr for ExpertLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kinds = s
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'D' => Ok(ExpertKind::Deep),
                'A' => Ok(ExpertKind::Attention),
                'F' => Ok(ExpertKind::Focal),
                other => Err(Error::config(format!(
                    "unknown expert code `{other}` in layout `{s}`"
                ))),
            })
            .collect::<Result<_>>()?;
        Self::new(kinds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub embed_dim: usize,
    pub classes: usize,
    pub layout: ExpertLayout,
    pub top_k: usize,
    pub depth: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl MoeConfig {
    pub fn new(embed_dim: usize, classes: usize) -> Self {
        Self {
            embed_dim,
            classes,
            layout: ExpertLayout::heterogeneous(DEFAULT_EXPERTS).expect("8 experts"),
            top_k: DEFAULT_TOP_K,
            depth: DEFAULT_DEPTH,
            heads: crate::mcib::DEFAULT_HEADS,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn experts(&self) -> usize {
        self.layout.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.experts() {
            return Err(Error::config(format!(
                "top-k must lie in 1..={}, got {}",
                self.experts(),
                self.top_k
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("deep expert depth must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.classes == 0 {
            return Err(Error::config("class count must be at least 1"));
        }
        Ok(())
    }

    fn expert_param_count(&self, kind: ExpertKind) -> usize {
        let (e, j) = (self.embed_dim, self.classes);
        let head = e * j + j;
        match kind {
            ExpertKind::Deep => self.depth * (2 * EXPANSION * e * e + EXPANSION * e + e) + head,
            ExpertKind::Attention => 4 * e * e + 2 * e + head,
            ExpertKind::Focal => FOCAL_KERNEL * e * e + e + head,
        }
    }

    /// Closed-form scalar parameter count of router plus experts.
    pub fn param_count(&self) -> usize {
        let (e, n) = (self.embed_dim, self.experts());
        let router = 4 * e * e + 2 * e + (e * e + e) + (e * n + n);
        router
            + self
                .layout
                .kinds()
                .iter()
                .map(|&k| self.expert_param_count(k))
                .sum::<usize>()
    }
}

/// Experts chosen for one sample and their blend weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSelection<T> {
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

/// Top-`k` of a probability vector, ties to the lower index, weights
/// renormalized to sum to one.
pub fn select_top_k<T: Scalar>(probs: &[T], k: usize) -> Result<GateSelection<T>> {
    if k == 0 || k > probs.len() {
        return Err(Error::config(format!(
            "top-k must lie in 1..={}, got {k}",
            probs.len()
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps lower indices first among equals
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let indices = order[..k].to_vec();
    let total = indices
        .iter()
        .map(|&i| probs[i])
        .fold(T::zero(), |a, b| a + b);
    let weights = indices.iter().map(|&i| probs[i] / total).collect();
    Ok(GateSelection { indices, weights })
}

/// Softmax then [`select_top_k`].
pub fn select_from_logits<T: Scalar>(logits: &Tensor<T>, k: usize) -> Result<GateSelection<T>> {
    let probs = softmax(logits, 0)?;
    select_top_k(probs.data(), k)
}

/// Inverted dropout applied only while a random source is supplied.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn apply_dropout<'t, T: Scalar>(
    x: Var<'t, T>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var<'t, T>> {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let keep = T::lit(1.0 / (1.0 - d.rate));
            let mask = Tensor::from_fn(x.shape(), |_| {
                if d.rng.gen::<f64>() < d.rate {
                    T::zero()
                } else {
                    keep
                }
            });
            x.mul(x.tape().constant(mask))
        }
        _ => Ok(x),
    }
}

fn pooled_head<'t, T: Scalar>(
    b: &Binder<'t, '_, T>,
    head: &Linear,
    tokens: Var<'t, T>,
) -> Result<Var<'t, T>> {
    head.forward(b, tokens)?.mean_rows()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepExpert {
    /// `(expand, compress)` per block.
    pub blocks: Vec<(Linear, Linear)>,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExpert {
    pub mha: Mha,
    pub norm: LayerNormParams,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FocalExpert {
    /// Kernel-3 token convolution as a `[3E, E]` map over unfolded rows.
    pub local: Linear,
    /// Kernel-1 convolution to class channels.
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expert {
    Deep(DeepExpert),
    Attention(AttentionExpert),
    Focal(FocalExpert),
}

impl Expert {
    fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        kind: ExpertKind,
        cfg: &MoeConfig,
    ) -> Result<Self> {
        let (e, j) = (cfg.embed_dim, cfg.classes);
        Ok(match kind {
            ExpertKind::Deep => {
                let blocks = (0..cfg.depth)
                    .map(|l| {
                        Ok((
                            b.linear(&format!("block{l}.expand"), e, EXPANSION * e, true)?,
                            b.linear(&format!("block{l}.compress"), EXPANSION * e, e, true)?,
                        ))
                    })
                    .collect::<Result<_>>()?;
                Expert::Deep(DeepExpert {
                    blocks,
                    head: b.linear("head", e, j, true)?,
                })
            }
            ExpertKind::Attention => Expert::Attention(AttentionExpert {
                mha: Mha::new(&mut b.scope("mha"), e, cfg.heads)?,
                norm: b.layer_norm("norm", e)?,
                head: b.linear("head", e, j, true)?,
            }),
            ExpertKind::Focal => Expert::Focal(FocalExpert {
                local: b.linear("local", FOCAL_KERNEL * e, e, true)?,
                head: b.linear("head", e, j, true)?,
            }),
        })
    }

    pub fn kind(&self) -> ExpertKind {
        match self {
            Expert::Deep(_) => ExpertKind::Deep,
            Expert::Attention(_) => ExpertKind::Attention,
            Expert::Focal(_) => ExpertKind::Focal,
        }
    }

    pub fn head(&self) -> &Linear {
        match self {
            Expert::Deep(x) => &x.head,
            Expert::Attention(x) => &x.head,
            Expert::Focal(x) => &x.head,
        }
    }

    /// `[M, E] -> [J]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        h: Var<'t, T>,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var<'t, T>> {
        match self {
            Expert::Deep(x) => {
                let mut z = h;
                for (expand, compress) in &x.blocks {
                    let inner = apply_dropout(expand.forward(b, z)?.silu(), dropout)?;
                    z = compress.forward(b, inner)?.add(z)?;
                }
                pooled_head(b, &x.head, z)
            }
            Expert::Attention(x) => {
                let z = x.norm.forward(b, x.mha.forward(b, h, h)?.add(h)?)?;
                pooled_head(b, &x.head, z)
            }
            Expert::Focal(x) => {
                let local = x
                    .local
                    .forward(b, h.unfold_rows(FOCAL_KERNEL, FOCAL_KERNEL / 2)?)?
                    .silu();
                pooled_head(b, &x.head, local)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub mha: Mha,
    pub norm: LayerNormParams,
    pub hidden: Linear,
    pub score: Linear,
}

impl Router {
    /// Expert logits `[N_e]` for a fused sequence `[M, E]`.
    pub fn logits<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        h: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let m = h.shape()[0];
        if m == 0 {
            return Err(Error::contract("router needs at least one token"));
        }
        let pooled = self
            .norm
            .forward(b, self.mha.forward(b, h, h)?.add(h)?)?
            .mean_rows()?;
        let e = pooled.shape()[0];
        let z = self.hidden.forward(b, pooled.reshape([1, e])?)?.sigmoid();
        let s = self.score.forward(b, z)?;
        s.reshape([self.score.fan_out])
    }
}

/// How experts are picked for a forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum Routing {
    /// Top-k of the router probabilities.
    #[default]
    Learned,
    /// Use these experts regardless of the router; weights still come from
    /// the router logits, so gradients reach it.
    Fixed(Vec<usize>),
}

pub struct MoeOutput<'t, T: Scalar> {
    /// `[J]`.
    pub logits: Var<'t, T>,
    pub router_logits: Var<'t, T>,
    pub selection: GateSelection<T>,
    /// Number of experts actually run.
    pub evaluated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moe {
    config: MoeConfig,
    pub router: Router,
    pub experts: Vec<Expert>,
}

impl Moe {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: MoeConfig) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let router = {
            let mut r = b.scope("router");
            Router {
                mha: Mha::new(&mut r.scope("mha"), e, config.heads)?,
                norm: r.layer_norm("norm", e)?,
                hidden: r.linear("hidden", e, e, true)?,
                score: r.linear("score", e, config.experts(), true)?,
            }
        };
        let experts = config
            .layout
            .kinds()
            .iter()
            .enumerate()
            .map(|(i, &kind)| Expert::new(&mut b.scope(&format!("expert{i}")), kind, &config))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            router,
            experts,
        })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, '_, T>,
        h: Var<'t, T>,
        routing: &Routing,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<MoeOutput<'t, T>> {
        let router_logits = self.router.logits(b, h)?;
        let indices = match routing {
            Routing::Learned => {
                select_from_logits(&router_logits.value(), self.config.top_k)?.indices
            }
            Routing::Fixed(ix) => {
                let mut seen = vec![false; self.experts.len()];
                for &i in ix {
                    if i >= self.experts.len() || std::mem::replace(&mut seen[i], true) {
                        return Err(Error::config(format!("invalid fixed routing {ix:?}")));
                    }
                }
                if ix.is_empty() {
                    return Err(Error::config("fixed routing needs at least one expert"));
                }
                ix.clone()
            }
        };
        let weights = router_logits.gather(&indices)?.softmax();
        let selection = GateSelection {
            indices: indices.clone(),
            weights: weights.value().data().to_vec(),
        };
        let mut logits: Option<Var<'t, T>> = None;
        for (slot, &i) in indices.iter().enumerate() {
            let out = self.experts[i].forward(b, h, &mut dropout)?;
            let term = out.mul(weights.gather(&[slot])?)?;
            logits = Some(match logits {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
        Ok(MoeOutput {
            logits: logits.expect("at least one expert"),
            router_logits,
            selection,
            evaluated: indices.len(),
        })
    }

    /// Value-level evaluation (no dropout).
    pub fn forward_values<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        routing: &Routing,
    ) -> Result<(Tensor<T>, GateSelection<T>)> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, store);
        let out = self.forward(&b, tape.constant(h.clone()), routing, None)?;
        Ok(((*out.logits.value()).clone(), out.selection))
    }
}

/// Running count of how often each expert was selected.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteStats {
    pub counts: Vec<u64>,
    pub samples: u64,
}

impl RouteStats {
    pub fn new(experts: usize) -> Self {
        Self {
            counts: vec![0; experts],
            samples: 0,
        }
    }

    pub fn record<T>(&mut self, selection: &GateSelection<T>) {
        for &i in &selection.indices {
            if i >= self.counts.len() {
                self.counts.resize(i + 1, 0);
            }
            self.counts[i] += 1;
        }
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &RouteStats) {
        if other.counts.len() > self.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.samples += other.samples;
    }

    /// `{"0": count, "1": count, ...}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.counts
                .iter()
                .enumerate()
                .map(|(i, &c)| (i.to_string(), c.into()))
                .collect(),
        )
    }
}
