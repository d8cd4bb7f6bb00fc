//! Tracklets, the labeled/unlabeled corpus, and the probe/gallery evaluation split.

mod io;
mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use io::{load_eval_split, load_feature_corpus, read_tracklets, save_eval_split, save_feature_corpus, write_tracklets};
pub use split::{one_shot_split, SplitMode};
pub use synthetic::{generate_synthetic_corpus, GeneratorConfig, SyntheticCorpus};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("tracklet {0} has no ground-truth identity")]
    MissingIdentity(usize),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: frame has {found} features, corpus uses {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("tracklet {id}: frame has {found} features, expected {expected}")]
    InconsistentFrames { id: usize, expected: usize, found: usize },
    #[error("tracklet {0} has no frames")]
    EmptyTracklet(usize),
    #[error("tracklet id {0} appears more than once")]
    DuplicateId(usize),
    #[error("unknown tracklet id {0}")]
    UnknownId(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A camera-specific sequence of per-frame feature vectors of one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: usize,
    /// Ground truth; hidden from training, used by the generator, splits and metrics.
    pub identity: Option<usize>,
    /// 1-based camera index.
    pub camera: usize,
    pub frames: Vec<Vec<f64>>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.frames.first().map(Vec::len)
    }

    /// A mini-tracklet made of the frames in `range`; keeps the source id.
    pub fn slice(&self, range: Range<usize>) -> Tracklet {
        Tracklet {
            id: self.id,
            identity: self.identity,
            camera: self.camera,
            frames: self.frames[range].to_vec(),
        }
    }

    pub fn frame_mean(&self) -> Vec<f64> {
        let dim = self.dim().unwrap_or(0);
        let mut acc = vec![0.0; dim];
        for frame in &self.frames {
            for (a, v) in acc.iter_mut().zip(frame) {
                *a += v;
            }
        }
        let n = self.frames.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

fn check_tracklets(tracklets: &[Tracklet]) -> Result<Option<usize>, CorpusError> {
    let mut seen = BTreeSet::new();
    let mut dim = None;
    for t in tracklets {
        if !seen.insert(t.id) {
            return Err(CorpusError::DuplicateId(t.id));
        }
        if t.frames.is_empty() {
            return Err(CorpusError::EmptyTracklet(t.id));
        }
        for frame in &t.frames {
            let expected = *dim.get_or_insert(frame.len());
            if frame.len() != expected {
                return Err(CorpusError::InconsistentFrames {
                    id: t.id,
                    expected,
                    found: frame.len(),
                });
            }
        }
    }
    Ok(dim)
}

/// Label status of a training tracklet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelStatus {
    Labeled(usize),
    Unlabeled,
}

/// The training set `D` split into the labeled part `D_l` and the unlabeled pool `D_u`.
///
/// Labels are indices `0..m_l` into [`Corpus::label_identities`], assigned in
/// ascending ground-truth identity order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    tracklets: Vec<Tracklet>,
    index: HashMap<usize, usize>,
    labeled: BTreeMap<usize, usize>,
    unlabeled: BTreeSet<usize>,
    label_identities: Vec<usize>,
    feature_dim: usize,
}

impl Corpus {
    /// Wraps tracklets with every tracklet unlabeled.
    pub fn new(tracklets: Vec<Tracklet>) -> Result<Self, CorpusError> {
        let feature_dim = check_tracklets(&tracklets)?.unwrap_or(0);
        let index = tracklets.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
        let unlabeled = tracklets.iter().map(|t| t.id).collect();
        Ok(Self {
            tracklets,
            index,
            labeled: BTreeMap::new(),
            unlabeled,
            label_identities: Vec::new(),
            feature_dim,
        })
    }

    /// Labels the given tracklet ids; every other tracklet joins `D_u`.
    pub fn with_labels(
        tracklets: Vec<Tracklet>,
        labeled: BTreeMap<usize, usize>,
        label_identities: Vec<usize>,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Self::new(tracklets)?;
        for (&id, &label) in &labeled {
            if !corpus.index.contains_key(&id) {
                return Err(CorpusError::UnknownId(id));
            }
            if label >= label_identities.len() {
                return Err(CorpusError::InvalidSplit(format!(
                    "tracklet {id} has label {label} but only {} labels exist",
                    label_identities.len()
                )));
            }
            corpus.unlabeled.remove(&id);
        }
        corpus.labeled = labeled;
        corpus.label_identities = label_identities;
        Ok(corpus)
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn into_tracklets(self) -> Vec<Tracklet> {
        self.tracklets
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn get(&self, id: usize) -> Option<&Tracklet> {
        self.index.get(&id).map(|&i| &self.tracklets[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tracklets.iter().map(|t| t.id)
    }

    /// `D_l` as tracklet id → label index.
    pub fn labeled(&self) -> &BTreeMap<usize, usize> {
        &self.labeled
    }

    /// `D_u` tracklet ids, ascending.
    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn label_identities(&self) -> &[usize] {
        &self.label_identities
    }

    /// Number of labeled identities `m_l`.
    pub fn num_labels(&self) -> usize {
        self.label_identities.len()
    }

    /// Size of the unlabeled pool `m_u`.
    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn status(&self, id: usize) -> LabelStatus {
        match self.labeled.get(&id) {
            Some(&label) => LabelStatus::Labeled(label),
            None => LabelStatus::Unlabeled,
        }
    }

    /// Ground-truth identity behind a label index.
    pub fn identity_of_label(&self, label: usize) -> Option<usize> {
        self.label_identities.get(label).copied()
    }
}

/// Probe and gallery tracklets for retrieval evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSplit {
    pub probe: Vec<Tracklet>,
    pub gallery: Vec<Tracklet>,
}

impl EvalSplit {
    /// Probes whose identity has no gallery entry under a different camera.
    pub fn probes_without_cross_camera_match(&self) -> Vec<usize> {
        self.probe
            .iter()
            .filter(|p| {
                !self
                    .gallery
                    .iter()
                    .any(|g| g.identity.is_some() && g.identity == p.identity && g.camera != p.camera)
            })
            .map(|p| p.id)
            .collect()
    }
}
