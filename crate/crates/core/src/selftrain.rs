//! Alternating representation learning and progressive pseudo-label selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Sgd, Tensor};
use crate::corpus::{Corpus, EvalSplit, LabelStatus, Tracklet};
use crate::evaluation::{evaluate_split, label_estimation_accuracy, EvalError, EvalReport};
use crate::losses::{joint_loss, LossBreakdown, LossError, LossVariant, LossWeights, MemoryBank, Objective, Supervision};
use crate::model::{init_model, Model, ModelDims, ModelError};
use crate::sampling::{epoch_batches, euclidean_distance, floor_slack, SamplerConfig, SamplingError};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TcplError {
    #[error("no labeled tracklets to propagate labels from")]
    EmptyLabeledSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}, epoch {epoch}: {source}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        #[source]
        source: LossError,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<AutodiffError> for TcplError {
    fn from(e: AutodiffError) -> Self {
        TcplError::Loss(LossError::Autodiff(e))
    }
}

/// A transferred label and its reliability (distance to the nearest labeled embedding).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoLabel {
    pub tracklet_id: usize,
    /// Label index of the nearest labeled tracklet.
    pub label: usize,
    /// Lower is more confident.
    pub confidence: f64,
}

/// Labels every `unlabeled` embedding with the label of its nearest `labeled`
/// embedding `(id, label, embedding)`; distance ties go to the smaller labeled id.
pub fn nearest_labeled(
    unlabeled: &[(usize, Vec<f64>)],
    labeled: &[(usize, usize, Vec<f64>)],
) -> Result<Vec<PseudoLabel>, TcplError> {
    if labeled.is_empty() {
        return Err(TcplError::EmptyLabeledSet);
    }
    Ok(unlabeled
        .iter()
        .map(|(id, e)| {
            let mut best: Option<(usize, usize, f64)> = None;
            for (lid, label, le) in labeled {
                let d = euclidean_distance(e, le);
                let better = match best {
                    None => true,
                    Some((bid, _, bd)) => d < bd || (d == bd && *lid < bid),
                };
                if better {
                    best = Some((*lid, *label, d));
                }
            }
            let (_, label, confidence) = best.expect("labeled set is non-empty");
            PseudoLabel {
                tracklet_id: *id,
                label,
                confidence,
            }
        })
        .collect())
}

fn embed_all<S: Scalar>(model: &Model<S>, tracklets: impl Iterator<Item = Tracklet>) -> Result<Vec<(usize, Vec<f64>)>, ModelError> {
    tracklets
        .map(|t| Ok((t.id, model.embed(&t)?.into_iter().map(Scalar::widen).collect())))
        .collect()
}

/// Nearest-labeled-neighbour pseudo-labels for all of `D_u`, in ascending id order.
pub fn assign_pseudo_labels<S: Scalar>(model: &Model<S>, corpus: &Corpus) -> Result<Vec<PseudoLabel>, TcplError> {
    if corpus.labeled().is_empty() {
        return Err(TcplError::EmptyLabeledSet);
    }
    let fetch = |id: &usize| corpus.get(*id).expect("split ids belong to the corpus").clone();
    let labeled: Vec<(usize, usize, Vec<f64>)> = embed_all(model, corpus.labeled().keys().map(fetch))?
        .into_iter()
        .map(|(id, e)| (id, corpus.labeled()[&id], e))
        .collect();
    let unlabeled = embed_all(model, corpus.unlabeled().iter().map(fetch))?;
    nearest_labeled(&unlabeled, &labeled)
}

/// Progressive selection counter: `n_t = min(n_u, ⌊t·p·n_u⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleState {
    pub p: f64,
    pub t: usize,
    pub n_t: usize,
    pub n_u: usize,
}

impl ScheduleState {
    pub fn new(p: f64, n_u: usize) -> Self {
        assert!(p > 0.0 && p <= 1.0, "enlarging factor must lie in (0, 1]");
        Self { p, t: 0, n_t: 0, n_u }
    }

    /// `⌊1/p⌋ + 1` steps; a single step when `p = 1`.
    pub fn total_steps(&self) -> usize {
        total_steps(self.p)
    }

    pub fn is_finished(&self) -> bool {
        self.t >= self.total_steps()
    }
}

pub fn total_steps(p: f64) -> usize {
    if p >= 1.0 {
        1
    } else {
        floor_slack(1.0 / p) + 1
    }
}

/// Advances `t` and recomputes `n_t` from the closed form, so repeated steps
/// never accumulate rounding drift.
pub fn next_sampling_size(state: ScheduleState) -> ScheduleState {
    let t = state.t + 1;
    let target = floor_slack(t as f64 * state.p * state.n_u as f64);
    ScheduleState {
        t,
        n_t: target.min(state.n_u),
        ..state
    }
}

/// The `n_t` most confident pseudo-labels, ordered by (distance, tracklet id).
pub fn select_confident(pseudo: &[PseudoLabel], n_t: usize) -> Vec<PseudoLabel> {
    let mut sorted = pseudo.to_vec();
    sorted.sort_by(|a, b| {
        a.confidence
            .partial_cmp(&b.confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.tracklet_id.cmp(&b.tracklet_id))
    });
    sorted.truncate(n_t);
    sorted
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcplConfig {
    /// Enlarging factor `p`.
    pub enlarging_factor: f64,
    pub epochs_per_step: usize,
    pub variant: LossVariant,
    pub lambda: f64,
    pub alpha: f64,
    pub rho: f64,
    pub rank: usize,
    pub batch_size: usize,
    /// Exclusive-loss temperature.
    pub tau: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Share of each step's epochs (at the end) trained with `λ = 0` and a reduced learning rate.
    pub final_phase_fraction: f64,
    pub final_lr_factor: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub normalize_embeddings: bool,
    pub cross_camera_filter: bool,
    pub seed: u64,
}

impl Default for TcplConfig {
    fn default() -> Self {
        Self {
            enlarging_factor: 0.1,
            epochs_per_step: 10,
            variant: LossVariant::Full,
            lambda: 1.0,
            alpha: 0.3,
            rho: 0.2,
            rank: 3,
            batch_size: 16,
            tau: 0.1,
            learning_rate: 0.003,
            momentum: 0.5,
            weight_decay: 0.0005,
            final_phase_fraction: 0.2,
            final_lr_factor: 0.1,
            hidden_dim: 64,
            embed_dim: 32,
            normalize_embeddings: false,
            cross_camera_filter: true,
            seed: 0,
        }
    }
}

impl TcplConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            rho: self.rho,
            rank: self.rank,
            batch_size: self.batch_size,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            alpha: self.alpha,
        }
    }

    /// Returns `(key, message)` for the first out-of-range field.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        let p = self.enlarging_factor;
        if !(p > 0.0 && p <= 1.0) {
            return Err(("enlarging_factor", format!("{p} must lie in (0, 1]")));
        }
        if self.epochs_per_step < 1 {
            return Err(("epochs_per_step", "must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(("lambda", "must be finite and ≥ 0".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(("alpha", "must be finite and > 0".into()));
        }
        if let Err(SamplingError::InvalidConfig(msg)) = self.sampler().validate() {
            let key = if msg.starts_with("rho") {
                "rho"
            } else if msg.starts_with("rank") {
                "rank"
            } else {
                "batch_size"
            };
            return Err((key, msg));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(("tau", "must be finite and > 0".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(("learning_rate", "must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(("momentum", "must lie in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(("weight_decay", "must be finite and ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.final_phase_fraction) {
            return Err(("final_phase_fraction", "must lie in [0, 1]".into()));
        }
        if !(self.final_lr_factor > 0.0 && self.final_lr_factor <= 1.0) {
            return Err(("final_lr_factor", "must lie in (0, 1]".into()));
        }
        if self.hidden_dim < 1 {
            return Err(("hidden_dim", "must be at least 1".into()));
        }
        if self.embed_dim < 1 {
            return Err(("embed_dim", "must be at least 1".into()));
        }
        Ok(())
    }

    /// Epochs at the end of each step that run in the final phase.
    pub fn final_phase_epochs(&self) -> usize {
        floor_slack(self.final_phase_fraction * self.epochs_per_step as f64).min(self.epochs_per_step)
    }
}

/// What one optimisation step saw; handed to [`Trainer::train_epoch_with`] observers.
pub struct IterationRecord<'a, S> {
    pub batch: &'a [usize],
    /// Parameters the iteration's forward pass used.
    pub model_before: &'a Model<S>,
    pub breakdown: &'a LossBreakdown,
}

/// Per-epoch totals; loss fields are iteration means of the weighted terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EpochStats {
    pub iterations: usize,
    pub losses: LossBreakdown,
    pub skipped: usize,
}

/// Owns the model, optimizer, RNG streams and (for the exclusive baseline) the memory bank.
///
/// Batch order and consistency sampling use separate ChaCha streams, so the batch
/// sequence is the same for every loss variant given the seed.
pub struct Trainer<S: Scalar> {
    pub model: Model<S>,
    optimizer: Sgd<S>,
    batch_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    bank: Option<MemoryBank<S>>,
    config: TcplConfig,
}

const BATCH_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

impl<S: Scalar> Trainer<S> {
    pub fn new(corpus: &Corpus, config: &TcplConfig) -> Result<Self, TcplError> {
        config
            .check()
            .map_err(|(key, msg)| TcplError::InvalidConfig(format!("{key}: {msg}")))?;
        if corpus.num_labels() == 0 {
            return Err(TcplError::EmptyLabeledSet);
        }
        let dims = ModelDims {
            input: corpus.feature_dim(),
            hidden: config.hidden_dim,
            embed: config.embed_dim,
        };
        let mut model = init_model::<S>(config.seed, dims, corpus.num_labels());
        model.encoder.normalize = config.normalize_embeddings;
        let optimizer = Sgd::new(
            &model.params(),
            S::lit(config.learning_rate),
            S::lit(config.momentum),
            S::lit(config.weight_decay),
        );
        let stream = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(s);
            rng
        };
        let mut trainer = Self {
            model,
            optimizer,
            batch_rng: stream(BATCH_STREAM),
            sample_rng: stream(SAMPLE_STREAM),
            bank: None,
            config: config.clone(),
        };
        if config.variant.uses_memory_bank() {
            let ids: Vec<usize> = corpus.ids().collect();
            let mut bank = MemoryBank::new(&ids, S::lit(config.tau));
            for t in corpus.tracklets() {
                bank.initialize(t.id, trainer.model.embed(t)?);
            }
            trainer.bank = Some(bank);
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TcplConfig {
        &self.config
    }

    pub fn bank(&self) -> Option<&MemoryBank<S>> {
        self.bank.as_ref()
    }

    pub fn batch_rng(&self) -> &ChaCha8Rng {
        &self.batch_rng
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer.reset_velocity();
    }

    pub fn train_epoch(
        &mut self,
        corpus: &Corpus,
        pseudo: &BTreeMap<usize, usize>,
        learning_rate: f64,
        lambda: f64,
    ) -> Result<EpochStats, LossError> {
        self.train_epoch_with(corpus, pseudo, learning_rate, lambda, |_| {})
    }

    /// One pass over all of `D` in random batches.
    ///
    /// `pseudo` maps selected `D_p` tracklet ids to labels. Returns the mean
    /// weighted loss terms per iteration.
    pub fn train_epoch_with(
        &mut self,
        corpus: &Corpus,
        pseudo: &BTreeMap<usize, usize>,
        learning_rate: f64,
        lambda: f64,
        mut observe: impl FnMut(&IterationRecord<'_, S>),
    ) -> Result<EpochStats, LossError> {
        self.optimizer.learning_rate = S::lit(learning_rate);
        let objective = Objective {
            variant: self.config.variant,
            weights: LossWeights {
                lambda,
                alpha: self.config.alpha,
            },
        };
        let sampler = self.config.sampler();
        if let Some(bank) = self.bank.as_mut() {
            bank.begin_epoch();
        }
        let ids: Vec<usize> = corpus.ids().collect();
        let mut stats = EpochStats::default();
        for batch_ids in epoch_batches(&ids, sampler.batch_size, &mut self.batch_rng) {
            let batch: Vec<(&Tracklet, Supervision)> = batch_ids
                .iter()
                .map(|&id| {
                    let t = corpus.get(id).expect("batch ids come from the corpus");
                    let sup = match corpus.status(id) {
                        LabelStatus::Labeled(y) => Supervision::Labeled(y),
                        LabelStatus::Unlabeled => match pseudo.get(&id) {
                            Some(&y) => Supervision::Pseudo(y),
                            None => Supervision::None,
                        },
                    };
                    (t, sup)
                })
                .collect();

            let mut graph = Graph::new();
            let bound = self.model.bind(&mut graph);
            let bound_bank = self.bank.as_ref().map(|b| b.bind(&mut graph)).transpose()?;
            let loss = joint_loss(
                &mut graph,
                &bound,
                &batch,
                &objective,
                &sampler,
                &mut self.sample_rng,
                bound_bank.as_ref(),
            )?;
            if !loss.breakdown.total.is_finite() {
                return Err(LossError::Autodiff(AutodiffError::NonFiniteLoss));
            }
            graph.backward(loss.root)?;
            let grads: Vec<Tensor<S>> = bound.ids().iter().map(|&id| graph.grad(id).clone()).collect();
            drop(graph);

            let b = &loss.breakdown;
            let weighted = LossBreakdown {
                ce_labeled: b.ce_labeled,
                ce_pseudo: b.ce_pseudo,
                intra: lambda * b.intra,
                inter: lambda * b.inter,
                exclusive: lambda * b.exclusive,
                total: b.total,
            };
            observe(&IterationRecord {
                batch: &batch_ids,
                model_before: &self.model,
                breakdown: &weighted,
            });

            let mut params = self.model.params_mut();
            self.optimizer.step(&mut params, &grads)?;
            if let Some(bank) = self.bank.as_mut() {
                for (id, e) in &loss.embeddings {
                    bank.update(*id, e);
                }
            }
            stats.iterations += 1;
            stats.losses.accumulate(&weighted);
            stats.skipped += loss.skipped;
        }
        let n = stats.iterations.max(1) as f64;
        let l = &mut stats.losses;
        for v in [&mut l.ce_labeled, &mut l.ce_pseudo, &mut l.intra, &mut l.inter, &mut l.exclusive, &mut l.total] {
            *v /= n;
        }
        Ok(stats)
    }
}

/// One row of the per-step log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    /// 0-based row index.
    pub step: usize,
    /// 1-based schedule counter.
    pub t: usize,
    pub n_t: usize,
    /// Unlabeled tracklets whose assigned label changed since the previous step.
    pub churn: usize,
    pub label_acc_selected: Option<f64>,
    pub label_acc_unlabeled: Option<f64>,
    /// Iteration means over every epoch of the step, consistency terms weighted by the λ in force.
    pub losses: LossBreakdown,
    pub skipped: usize,
    pub eval: Option<EvalReport>,
}

/// Result of [`run_tcpl`].
#[derive(Debug, Clone)]
pub struct TcplRun<S> {
    pub best_model: Model<S>,
    /// 0-based index into `steps`.
    pub best_step: usize,
    pub final_model: Model<S>,
    pub steps: Vec<StepMetrics>,
    pub final_selection: Vec<PseudoLabel>,
}

impl<S> TcplRun<S> {
    pub fn best(&self) -> &StepMetrics {
        &self.steps[self.best_step]
    }

    pub fn last(&self) -> &StepMetrics {
        self.steps.last().expect("a run has at least one step")
    }
}

fn better(candidate: &EvalReport, incumbent: &EvalReport) -> bool {
    candidate.rank1 > incumbent.rank1 || (candidate.rank1 == incumbent.rank1 && candidate.map > incumbent.map)
}

/// Runs the full alternating schedule: for `t = 1..=⌊1/p⌋+1`, train on
/// `D_l ∪ D_p` plus the self-supervised terms over all of `D`, then relabel
/// `D_u` and keep the `n_t` most confident pseudo-labels.
///
/// When `validation` is given, each step's model is scored on it and the best
/// Rank-1 (then mAP, then earliest) step is returned as `best_model`; otherwise
/// the last step wins. `on_step` sees every row with the model that produced it.
pub fn run_tcpl<S: Scalar>(
    corpus: &Corpus,
    validation: Option<&EvalSplit>,
    config: &TcplConfig,
    mut on_step: impl FnMut(&StepMetrics, &Model<S>),
) -> Result<TcplRun<S>, TcplError> {
    let mut trainer = Trainer::<S>::new(corpus, config)?;
    let mut schedule = ScheduleState::new(config.enlarging_factor, corpus.num_unlabeled());
    let epochs = config.epochs_per_step;
    let final_epochs = config.final_phase_epochs();

    let mut selection: Vec<PseudoLabel> = Vec::new();
    let mut previous: Option<BTreeMap<usize, usize>> = None;
    let mut steps = Vec::new();
    let mut best: Option<(usize, EvalReport, Model<S>)> = None;

    while !schedule.is_finished() {
        let step = steps.len();
        trainer.reset_optimizer();
        let pseudo: BTreeMap<usize, usize> = selection.iter().map(|p| (p.tracklet_id, p.label)).collect();

        let mut losses = LossBreakdown::default();
        let mut skipped = 0;
        let mut iterations = 0;
        for epoch in 0..epochs {
            let final_phase = epoch >= epochs - final_epochs;
            let (lr, lambda) = if final_phase {
                (config.learning_rate * config.final_lr_factor, 0.0)
            } else {
                (config.learning_rate, config.lambda)
            };
            let stats = trainer
                .train_epoch(corpus, &pseudo, lr, lambda)
                .map_err(|source| TcplError::NonFiniteLoss { step, epoch, source })?;
            let mut weighted = stats.losses;
            for v in [
                &mut weighted.ce_labeled,
                &mut weighted.ce_pseudo,
                &mut weighted.intra,
                &mut weighted.inter,
                &mut weighted.exclusive,
                &mut weighted.total,
            ] {
                *v *= stats.iterations as f64;
            }
            losses.accumulate(&weighted);
            iterations += stats.iterations;
            skipped += stats.skipped;
        }
        let n = iterations.max(1) as f64;
        for v in [
            &mut losses.ce_labeled,
            &mut losses.ce_pseudo,
            &mut losses.intra,
            &mut losses.inter,
            &mut losses.exclusive,
            &mut losses.total,
        ] {
            *v /= n;
        }

        let eval = validation
            .map(|split| evaluate_split(&trainer.model, split, config.cross_camera_filter))
            .transpose()?;

        let assignments = assign_pseudo_labels(&trainer.model, corpus)?;
        schedule = next_sampling_size(schedule);
        selection = select_confident(&assignments, schedule.n_t);

        let current: BTreeMap<usize, usize> = assignments.iter().map(|p| (p.tracklet_id, p.label)).collect();
        let churn = previous
            .as_ref()
            .map(|prev| current.iter().filter(|(id, l)| prev.get(id) != Some(l)).count())
            .unwrap_or(0);
        previous = Some(current);

        let row = StepMetrics {
            step,
            t: schedule.t,
            n_t: schedule.n_t,
            churn,
            label_acc_selected: label_estimation_accuracy(&selection, corpus)?,
            label_acc_unlabeled: label_estimation_accuracy(&assignments, corpus)?,
            losses,
            skipped,
            eval,
        };
        log::info!(
            "step {} (t = {}): n_t = {}, rank1 = {:?}, label acc = {:?}",
            step,
            row.t,
            row.n_t,
            eval.map(|e| e.rank1),
            row.label_acc_selected
        );
        on_step(&row, &trainer.model);

        let replace = match (&best, &eval) {
            (None, _) => true,
            (Some((_, incumbent, _)), Some(e)) => better(e, incumbent),
            (Some(_), None) => validation.is_none(),
        };
        if replace {
            best = Some((step, eval.unwrap_or(EvalReport { rank1: 0.0, rank5: 0.0, rank20: 0.0, map: 0.0 }), trainer.model.clone()));
        }
        steps.push(row);
    }

    let (best_step, _, best_model) = best.expect("at least one step runs");
    Ok(TcplRun {
        best_model,
        best_step,
        final_model: trainer.model,
        steps,
        final_selection: selection,
    })
}
