//! Training objectives: temporal consistency terms, cross-entropy, their weighted
//! combination over a batch, and the exclusive (instance memory bank) baseline.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor, NORM_EPS};
use crate::corpus::Tracklet;
use crate::model::{BoundModel, ModelError};
use crate::sampling::{sample_mini_tracklets, sample_negative, SamplerConfig, SamplingError};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("memory bank slot for tracklet {0} is not initialized")]
    UninitializedBank(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Which terms enter the objective besides the supervised cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Intra- and inter-sequence consistency.
    Full,
    #[serde(alias = "intra")]
    IntraOnly,
    #[serde(alias = "inter")]
    InterOnly,
    CeOnly,
    /// Exclusive loss against a per-instance memory bank instead of consistency.
    #[serde(alias = "exclusive")]
    ExclusiveBaseline,
}

impl LossVariant {
    pub fn uses_intra(self) -> bool {
        matches!(self, LossVariant::Full | LossVariant::IntraOnly)
    }

    pub fn uses_inter(self) -> bool {
        matches!(self, LossVariant::Full | LossVariant::InterOnly)
    }

    pub fn uses_memory_bank(self) -> bool {
        self == LossVariant::ExclusiveBaseline
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Full => "full",
            LossVariant::IntraOnly => "intra-only",
            LossVariant::InterOnly => "inter-only",
            LossVariant::CeOnly => "ce-only",
            LossVariant::ExclusiveBaseline => "exclusive-baseline",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "full" => LossVariant::Full,
            "intra" | "intra-only" => LossVariant::IntraOnly,
            "inter" | "inter-only" => LossVariant::InterOnly,
            "ce-only" => LossVariant::CeOnly,
            "exclusive" | "exclusive-baseline" => LossVariant::ExclusiveBaseline,
            other => return Err(format!("unknown loss variant `{other}`")),
        })
    }
}

/// Consistency weight `λ` and triplet margin `α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1.0, alpha: 0.3 }
    }
}

fn same_dims<S: Scalar>(g: &Graph<S>, a: NodeId, b: NodeId) -> Result<(), LossError> {
    let (la, lb) = (g.value(a).len(), g.value(b).len());
    if la != lb || g.value(a).rank() != 1 || g.value(b).rank() != 1 {
        return Err(LossError::DimensionMismatch(la, lb));
    }
    Ok(())
}

/// `‖e_a − e_p‖₂` between the embeddings of two mini-tracklets of one tracklet.
pub fn intra_consistency_loss<S: Scalar>(g: &mut Graph<S>, anchor: NodeId, positive: NodeId) -> Result<NodeId, LossError> {
    same_dims(g, anchor, positive)?;
    let diff = g.sub(anchor, positive)?;
    Ok(g.l2_norm(diff)?)
}

/// `max{0, ‖e_a − e_p‖₂ − ‖e_a − e_n‖₂ + α}`.
pub fn inter_consistency_loss<S: Scalar>(
    g: &mut Graph<S>,
    anchor: NodeId,
    positive: NodeId,
    negative: NodeId,
    alpha: S,
) -> Result<NodeId, LossError> {
    same_dims(g, anchor, positive)?;
    same_dims(g, anchor, negative)?;
    let dp = g.sub(anchor, positive)?;
    let dp = g.l2_norm(dp)?;
    let dn = g.sub(anchor, negative)?;
    let dn = g.l2_norm(dn)?;
    let gap = g.sub(dp, dn)?;
    let margin = g.scalar(alpha);
    let shifted = g.add(gap, margin)?;
    Ok(g.hinge(shifted)?)
}

fn one_hot<S: Scalar>(len: usize, index: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); len];
    data[index] = S::one();
    Tensor::vector(data)
}

/// `−log softmax(Z)[y]`.
pub fn cross_entropy_loss<S: Scalar>(g: &mut Graph<S>, logits: NodeId, label: usize) -> Result<NodeId, LossError> {
    let classes = g.value(logits).len();
    if label >= classes {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    let log_probs = g.log_softmax(logits)?;
    let pick = g.leaf(one_hot(classes, label));
    let picked = g.dot(pick, log_probs)?;
    Ok(g.scale(-S::one(), picked)?)
}

/// Per-instance feature memory `v_i` with temperature `τ`.
///
/// A slot accepts one update per epoch; later writes in the same epoch are
/// dropped and counted in [`MemoryBank::rejected_updates`].
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<S> {
    tau: S,
    ids: Vec<usize>,
    slot_of: HashMap<usize, usize>,
    vectors: Vec<Option<Vec<S>>>,
    written: Vec<bool>,
    rejected: usize,
}

impl<S: Scalar> MemoryBank<S> {
    /// One empty slot per tracklet id; slot order follows `ids`.
    pub fn new(ids: &[usize], tau: S) -> Self {
        assert!(tau > S::zero(), "temperature must be positive");
        Self {
            tau,
            ids: ids.to_vec(),
            slot_of: ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            vectors: vec![None; ids.len()],
            written: vec![false; ids.len()],
            rejected: 0,
        }
    }

    pub fn tau(&self) -> S {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slot(&self, id: usize) -> Option<usize> {
        self.slot_of.get(&id).copied()
    }

    pub fn get(&self, id: usize) -> Option<&[S]> {
        self.slot(id).and_then(|s| self.vectors[s].as_deref())
    }

    pub fn is_initialized(&self) -> bool {
        self.vectors.iter().all(Option::is_some)
    }

    /// Seeds a slot without consuming its per-epoch update.
    pub fn initialize(&mut self, id: usize, value: Vec<S>) {
        let slot = self.slot(id).expect("tracklet id has a bank slot");
        self.vectors[slot] = Some(value);
    }

    pub fn begin_epoch(&mut self) {
        self.written.iter_mut().for_each(|w| *w = false);
    }

    /// `v_j ← value`; returns `false` if the slot was already written this epoch.
    pub fn update(&mut self, id: usize, value: &[S]) -> bool {
        debug_assert!(value.iter().all(|v| v.is_finite()));
        let slot = self.slot(id).expect("tracklet id has a bank slot");
        if self.written[slot] {
            self.rejected += 1;
            log::warn!("memory bank slot {id} already updated this epoch");
            return false;
        }
        self.written[slot] = true;
        self.vectors[slot] = Some(value.to_vec());
        true
    }

    pub fn rejected_updates(&self) -> usize {
        self.rejected
    }

    /// Places the whole bank on the graph as a constant `(N, d)` matrix of unit rows.
    pub fn bind(&self, g: &mut Graph<S>) -> Result<BoundBank, LossError> {
        let eps = S::lit(NORM_EPS);
        let mut rows = Vec::with_capacity(self.len());
        for (slot, v) in self.vectors.iter().enumerate() {
            let v = v.as_deref().ok_or(LossError::UninitializedBank(self.ids[slot]))?;
            let norm = (v.iter().map(|&x| x * x).sum::<S>() + eps).sqrt();
            rows.push(v.iter().map(|&x| x / norm).collect::<Vec<S>>());
        }
        let matrix = Tensor::from_rows(rows.iter().map(Vec::as_slice))?;
        Ok(BoundBank {
            node: g.leaf(matrix),
            slots: self.slot_of.clone(),
            tau: self.tau.widen(),
        })
    }
}

/// A memory bank frozen onto one graph.
#[derive(Debug, Clone)]
pub struct BoundBank {
    node: NodeId,
    slots: HashMap<usize, usize>,
    tau: f64,
}

/// `−log P(j | X_j)` with `P(i | X) = softmax_i(v̂_iᵀ f̂(X) / τ)` over unit-normalised
/// bank rows and embedding; bank vectors are constants.
pub fn exclusive_baseline_loss<S: Scalar>(
    g: &mut Graph<S>,
    bank: &BoundBank,
    id: usize,
    embedding: NodeId,
) -> Result<NodeId, LossError> {
    let slot = *bank.slots.get(&id).ok_or(LossError::UninitializedBank(id))?;
    let width = g.value(bank.node).shape()[1];
    let found = g.value(embedding).len();
    if width != found {
        return Err(LossError::DimensionMismatch(width, found));
    }
    let unit = g.l2_normalize(embedding)?;
    let sims = g.matmul(bank.node, unit)?;
    let logits = g.scale(S::lit(1.0 / bank.tau), sims)?;
    cross_entropy_loss(g, logits, slot)
}

/// `v_j ← value` if the slot has not been written this epoch.
pub fn memory_update<S: Scalar>(bank: &mut MemoryBank<S>, id: usize, value: &[S]) -> bool {
    bank.update(id, value)
}

/// Supervision available for one batch member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    Labeled(usize),
    Pseudo(usize),
    None,
}

/// Raw (unweighted) sub-sums of the objective plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce_labeled: f64,
    pub ce_pseudo: f64,
    pub intra: f64,
    pub inter: f64,
    pub exclusive: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.ce_labeled += other.ce_labeled;
        self.ce_pseudo += other.ce_pseudo;
        self.intra += other.intra;
        self.inter += other.inter;
        self.exclusive += other.exclusive;
        self.total += other.total;
    }
}

/// What [`joint_loss`] optimises and how consistency terms are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub variant: LossVariant,
    pub weights: LossWeights,
}

#[derive(Debug, Clone)]
pub struct JointLoss<S> {
    pub root: NodeId,
    pub breakdown: LossBreakdown,
    /// Each member's own terms; the inter term is attributed to its anchor.
    pub per_tracklet: Vec<(usize, LossBreakdown)>,
    /// Members whose consistency terms were skipped (too short, or batch too small for a negative).
    pub skipped: usize,
    /// Full-tracklet embedding values, in batch order.
    pub embeddings: Vec<(usize, Vec<S>)>,
}

/// The batch objective
/// `Σ_{D_l} CE(X, y) + Σ_{D_p} CE(X, ŷ) + λ·Σ_batch (L_intra(X) + L_inter(X))`.
///
/// Consistency terms are computed for every member regardless of supervision.
/// For the exclusive baseline the consistency sum is replaced by the exclusive
/// loss against `bank`. Terms are summed in batch order.
pub fn joint_loss<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    model: &BoundModel,
    batch: &[(&Tracklet, Supervision)],
    objective: &Objective,
    sampler: &SamplerConfig,
    rng: &mut R,
    bank: Option<&BoundBank>,
) -> Result<JointLoss<S>, LossError> {
    let variant = objective.variant;
    let alpha = S::lit(objective.weights.alpha);

    let mut full = Vec::with_capacity(batch.len());
    for (t, _) in batch {
        full.push(model.embed(g, t)?);
    }
    let embeddings: Vec<(usize, Vec<S>)> = batch
        .iter()
        .zip(&full)
        .map(|((t, _), &node)| (t.id, g.value(node).data().to_vec()))
        .collect();
    let node_of: HashMap<usize, NodeId> = batch.iter().zip(&full).map(|((t, _), &n)| (t.id, n)).collect();

    let mut ce_labeled = Vec::new();
    let mut ce_pseudo = Vec::new();
    let mut consistency = Vec::new();
    let mut per_tracklet = Vec::with_capacity(batch.len());
    let mut skipped = 0;

    for (i, &(t, supervision)) in batch.iter().enumerate() {
        let mut own = LossBreakdown::default();
        match supervision {
            Supervision::Labeled(y) | Supervision::Pseudo(y) => {
                let z = model.classify(g, full[i])?;
                let ce = cross_entropy_loss(g, z, y)?;
                let v = g.value(ce).item().widen();
                if matches!(supervision, Supervision::Labeled(_)) {
                    own.ce_labeled = v;
                    ce_labeled.push(ce);
                } else {
                    own.ce_pseudo = v;
                    ce_pseudo.push(ce);
                }
            }
            Supervision::None => {}
        }

        if variant.uses_intra() || variant.uses_inter() {
            match sample_mini_tracklets(t.len(), sampler, rng) {
                Ok(pair) => {
                    let ea = model.embed(g, &t.slice(pair.anchor))?;
                    let ep = model.embed(g, &t.slice(pair.positive))?;
                    if variant.uses_intra() {
                        let l = intra_consistency_loss(g, ea, ep)?;
                        own.intra = g.value(l).item().widen();
                        consistency.push(l);
                    }
                    if variant.uses_inter() {
                        let anchor = g.value(ea).data().to_vec();
                        let candidates: Vec<(usize, &[S])> =
                            embeddings.iter().map(|(id, e)| (*id, e.as_slice())).collect();
                        match sample_negative(t.id, &anchor, &candidates, sampler, rng) {
                            Ok(neg) => {
                                let l = inter_consistency_loss(g, ea, ep, node_of[&neg], alpha)?;
                                own.inter = g.value(l).item().widen();
                                consistency.push(l);
                            }
                            Err(SamplingError::InsufficientBatch { .. }) => skipped += 1,
                            Err(e) => return Err(e.into()),
                        }
                    }
                }
                Err(SamplingError::TooShort(_) | SamplingError::DegeneratePartition { .. }) => skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }

        if variant.uses_memory_bank() {
            let bank = bank.expect("exclusive baseline needs a memory bank");
            let l = exclusive_baseline_loss(g, bank, t.id, full[i])?;
            own.exclusive = g.value(l).item().widen();
            consistency.push(l);
        }
        per_tracklet.push((t.id, own));
    }

    let lambda = objective.weights.lambda;
    let mut parts = Vec::new();
    parts.extend(g.add_all(&ce_labeled)?);
    parts.extend(g.add_all(&ce_pseudo)?);
    if let Some(c) = g.add_all(&consistency)? {
        parts.push(g.scale(S::lit(lambda), c)?);
    }
    let root = match g.add_all(&parts)? {
        Some(root) => root,
        None => g.scalar(S::zero()),
    };

    let mut breakdown = LossBreakdown::default();
    for (_, own) in &per_tracklet {
        breakdown.accumulate(own);
    }
    breakdown.total = g.value(root).item().widen();
    for (_, own) in per_tracklet.iter_mut() {
        own.total = own.ce_labeled + own.ce_pseudo + lambda * (own.intra + own.inter + own.exclusive);
    }

    Ok(JointLoss {
        root,
        breakdown,
        per_tracklet,
        skipped,
        embeddings,
    })
}
