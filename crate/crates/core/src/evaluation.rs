//! Retrieval protocol: gallery ranking, CMC, mAP, and pseudo-label accuracy.

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::corpus::{Corpus, EvalSplit, Tracklet};
use crate::model::{Model, ModelError};
use crate::sampling::euclidean_distance;
use crate::scalar::Scalar;
use crate::selftrain::PseudoLabel;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("probe {0}: gallery is empty after cross-camera filtering")]
    EmptyGalleryAfterFilter(usize),
    #[error("no probes to evaluate")]
    NoProbes,
    #[error("probe {0} has no correct match in its ranking")]
    ProbeWithoutMatch(usize),
    #[error("tracklet {0} has no ground-truth identity")]
    MissingGroundTruth(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Embedding of one probe or gallery tracklet, with the metadata ranking needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedTracklet {
    pub id: usize,
    pub identity: Option<usize>,
    pub camera: usize,
    pub embedding: Vec<f64>,
}

impl EmbeddedTracklet {
    pub fn new<S: Scalar>(model: &Model<S>, tracklet: &Tracklet) -> Result<Self, ModelError> {
        Ok(Self {
            id: tracklet.id,
            identity: tracklet.identity,
            camera: tracklet.camera,
            embedding: model.embed(tracklet)?.into_iter().map(Scalar::widen).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEntry {
    pub gallery_id: usize,
    pub distance: f64,
    pub is_match: bool,
}

/// Gallery entries in ascending distance from one probe, ties by gallery id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingList {
    pub probe_id: usize,
    pub entries: Vec<RankEntry>,
}

impl RankingList {
    /// 1-based positions of the correct matches.
    pub fn match_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_match)
            .map(|(i, _)| i + 1)
    }
}

fn same_identity(a: Option<usize>, b: Option<usize>) -> bool {
    matches!((a, b), (Some(x), Some(y)) if x == y)
}

/// Ranks `gallery` by Euclidean distance to `probe`.
///
/// With `cross_camera_filter`, gallery entries sharing both identity and camera
/// with the probe are dropped (as is the probe itself if present).
pub fn rank_by_embeddings(
    probe: &EmbeddedTracklet,
    gallery: &[EmbeddedTracklet],
    cross_camera_filter: bool,
) -> Result<RankingList, EvalError> {
    let mut entries: Vec<RankEntry> = gallery
        .iter()
        .filter(|g| {
            !(cross_camera_filter
                && (g.id == probe.id || (same_identity(g.identity, probe.identity) && g.camera == probe.camera)))
        })
        .map(|g| RankEntry {
            gallery_id: g.id,
            distance: euclidean_distance(&probe.embedding, &g.embedding),
            is_match: same_identity(g.identity, probe.identity),
        })
        .collect();
    if entries.is_empty() {
        return Err(EvalError::EmptyGalleryAfterFilter(probe.id));
    }
    entries.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(Ordering::Equal)
            .then(a.gallery_id.cmp(&b.gallery_id))
    });
    Ok(RankingList {
        probe_id: probe.id,
        entries,
    })
}

/// Embeds `probe` and `gallery` with `model` and ranks them.
pub fn rank_gallery<S: Scalar>(
    model: &Model<S>,
    probe: &Tracklet,
    gallery: &[Tracklet],
    cross_camera_filter: bool,
) -> Result<RankingList, EvalError> {
    let p = EmbeddedTracklet::new(model, probe)?;
    let g = gallery
        .iter()
        .map(|t| EmbeddedTracklet::new(model, t))
        .collect::<Result<Vec<_>, _>>()?;
    rank_by_embeddings(&p, &g, cross_camera_filter)
}

/// Fraction of probes whose first correct match sits within the top `k`, for each `k`.
/// A ranking without any match counts as a miss at every `k`.
pub fn compute_cmc(rankings: &[RankingList], ks: &[usize]) -> Result<Vec<f64>, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::NoProbes);
    }
    let first: Vec<Option<usize>> = rankings.iter().map(|r| r.match_positions().next()).collect();
    let n = rankings.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| first.iter().filter(|p| matches!(p, Some(pos) if *pos <= k)).count() as f64 / n)
        .collect())
}

/// Mean over probes of `(1/G) Σ_i i / p_i`, with `p_i` the position of the `i`-th correct match.
pub fn compute_map(rankings: &[RankingList]) -> Result<f64, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::NoProbes);
    }
    let mut total = 0.0;
    for r in rankings {
        let mut hits = 0usize;
        let mut ap = 0.0;
        for pos in r.match_positions() {
            hits += 1;
            ap += hits as f64 / pos as f64;
        }
        if hits == 0 {
            return Err(EvalError::ProbeWithoutMatch(r.probe_id));
        }
        total += ap / hits as f64;
    }
    Ok(total / rankings.len() as f64)
}

/// Fraction of `selected` whose assigned identity matches ground truth;
/// `None` when nothing is selected.
pub fn label_estimation_accuracy(selected: &[PseudoLabel], corpus: &Corpus) -> Result<Option<f64>, EvalError> {
    if selected.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for p in selected {
        let truth = corpus
            .get(p.tracklet_id)
            .and_then(|t| t.identity)
            .ok_or(EvalError::MissingGroundTruth(p.tracklet_id))?;
        if corpus.identity_of_label(p.label) == Some(truth) {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / selected.len() as f64))
}

/// CMC at ranks 1, 5, 20 and mAP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank20: f64,
    pub map: f64,
}

impl EvalReport {
    pub fn from_rankings(rankings: &[RankingList]) -> Result<Self, EvalError> {
        let cmc = compute_cmc(rankings, &[1, 5, 20])?;
        Ok(Self {
            rank1: cmc[0],
            rank5: cmc[1],
            rank20: cmc[2],
            map: compute_map(rankings)?,
        })
    }
}

/// Rankings for every probe of `split`, gallery embedded once.
pub fn rank_split<S: Scalar>(
    model: &Model<S>,
    split: &EvalSplit,
    cross_camera_filter: bool,
) -> Result<Vec<RankingList>, EvalError> {
    let gallery = split
        .gallery
        .iter()
        .map(|t| EmbeddedTracklet::new(model, t))
        .collect::<Result<Vec<_>, _>>()?;
    split
        .probe
        .iter()
        .map(|p| rank_by_embeddings(&EmbeddedTracklet::new(model, p)?, &gallery, cross_camera_filter))
        .collect()
}

pub fn evaluate_split<S: Scalar>(
    model: &Model<S>,
    split: &EvalSplit,
    cross_camera_filter: bool,
) -> Result<EvalReport, EvalError> {
    EvalReport::from_rankings(&rank_split(model, split, cross_camera_filter)?)
}

/// One line per probe: `probe_id: gallery ids in rank order`, matches marked with `*`.
pub fn write_ranking_dump<W: Write>(mut out: W, rankings: &[RankingList]) -> std::io::Result<()> {
    for r in rankings {
        write!(out, "{}:", r.probe_id)?;
        for e in &r.entries {
            write!(out, " {}{}", e.gallery_id, if e.is_match { "*" } else { "" })?;
        }
        writeln!(out)?;
    }
    Ok(())
}
