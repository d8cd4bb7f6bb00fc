use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Tracklet};

/// How `D_l` is drawn from the training tracklets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SplitMode {
    /// One tracklet per identity, taken from the lowest-indexed camera that saw it.
    OneShot,
    /// A random `q`-fraction of all tracklets, at least one per identity.
    Fraction { q: f64 },
}

/// Splits tracklets into `D_l` and `D_u` under the one-shot or few-example protocol.
pub fn one_shot_split(tracklets: Vec<Tracklet>, mode: SplitMode, seed: u64) -> Result<Corpus, CorpusError> {
    if let SplitMode::Fraction { q } = mode {
        if !(q > 0.0 && q <= 1.0) {
            return Err(CorpusError::InvalidSplit(format!("fraction q = {q} must lie in (0, 1]")));
        }
    }
    // identity -> camera -> tracklet ids, all ordered for determinism
    let mut by_identity: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for t in &tracklets {
        let identity = t.identity.ok_or(CorpusError::MissingIdentity(t.id))?;
        by_identity
            .entry(identity)
            .or_default()
            .entry(t.camera)
            .or_default()
            .push(t.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label_identities: Vec<usize> = by_identity.keys().copied().collect();
    let mut labeled = BTreeMap::new();

    // Camera 1 first, then the next camera that recorded the identity.
    for (label, cams) in by_identity.values().enumerate() {
        let (_, ids) = cams.iter().next().expect("identity has at least one tracklet");
        let id = *ids.choose(&mut rng).expect("non-empty camera bucket");
        labeled.insert(id, label);
    }

    if let SplitMode::Fraction { q } = mode {
        let n = tracklets.len();
        let target = ((q * n as f64).round() as usize).clamp(labeled.len(), n);
        let label_of: BTreeMap<usize, usize> = label_identities
            .iter()
            .enumerate()
            .map(|(label, &identity)| (identity, label))
            .collect();
        let chosen: BTreeSet<usize> = labeled.keys().copied().collect();
        let mut rest: Vec<&Tracklet> = tracklets.iter().filter(|t| !chosen.contains(&t.id)).collect();
        rest.shuffle(&mut rng);
        for t in rest.into_iter().take(target - labeled.len()) {
            let identity = t.identity.expect("checked above");
            labeled.insert(t.id, label_of[&identity]);
        }
    }

    Corpus::with_labels(tracklets, labeled, label_identities)
}
