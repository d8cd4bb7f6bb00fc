use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CorpusError, EvalSplit, Tracklet};

/// Parameters of the additive-Gaussian multi-camera tracklet model.
///
/// Frame `t` of a tracklet of identity `y` seen by camera `k` is
/// `R_k μ_y + c_k + σ_drift·w_s(t) + σ_noise·ε_t`, where `w_s` is a
/// per-segment drift vector that stays constant over a contiguous run of frames
/// and `R_k` is the identity unless `camera_rotation` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Training identities `M`.
    pub identities: usize,
    /// Identities reserved for the probe/gallery split, disjoint from training.
    pub eval_identities: usize,
    pub cameras: usize,
    pub tracklets_per_camera: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    pub sigma_identity: f64,
    pub sigma_camera: f64,
    pub sigma_drift: f64,
    pub sigma_noise: f64,
    /// Number of constant-drift segments in each tracklet.
    pub drift_segments: usize,
    /// Rank of the shared subspace holding camera offsets and drift;
    /// `0` or `feature_dim` means isotropic in the full feature space.
    pub nuisance_dim: usize,
    pub camera_rotation: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            identities: 30,
            eval_identities: 30,
            cameras: 3,
            tracklets_per_camera: 2,
            min_frames: 10,
            max_frames: 20,
            feature_dim: 16,
            sigma_identity: 1.0,
            sigma_camera: 1.5,
            sigma_drift: 1.5,
            sigma_noise: 0.1,
            drift_segments: 2,
            nuisance_dim: 2,
            camera_rotation: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: &str| Err(CorpusError::InvalidConfig(msg.to_string()));
        if self.identities < 2 {
            return bad("identities must be at least 2");
        }
        if self.eval_identities < 1 {
            return bad("eval_identities must be at least 1");
        }
        if self.cameras < 2 {
            return bad("cameras must be at least 2");
        }
        if self.tracklets_per_camera < 1 {
            return bad("tracklets_per_camera must be at least 1");
        }
        if self.min_frames < 2 {
            return bad("min_frames must be at least 2");
        }
        if self.max_frames < self.min_frames {
            return bad("max_frames must be at least min_frames");
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be at least 1");
        }
        if self.drift_segments < 1 || self.drift_segments > self.min_frames {
            return bad("drift_segments must lie in [1, min_frames]");
        }
        if self.nuisance_dim > self.feature_dim {
            return bad("nuisance_dim must not exceed feature_dim");
        }
        let sigmas = [
            self.sigma_identity,
            self.sigma_camera,
            self.sigma_drift,
            self.sigma_noise,
        ];
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("noise must be ≥ 0");
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// Training tracklets `D`, ids `0..`, unsplit.
    pub train: Vec<Tracklet>,
    /// Probe/gallery split over the held-out identities.
    pub eval: EvalSplit,
    /// Identity prototypes `μ_y`, indexed by identity (training first, then eval).
    pub prototypes: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gram-Schmidt on Gaussian draws; returns `rank` orthonormal rows.
fn random_orthonormal(rng: &mut ChaCha8Rng, rank: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

struct Nuisance {
    /// `None` when the nuisance is isotropic.
    basis: Option<Vec<Vec<f64>>>,
    dim: usize,
}

impl Nuisance {
    fn draw(&self, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        match &self.basis {
            None => gaussian(rng, self.dim).into_iter().map(|z| z * scale).collect(),
            Some(basis) => {
                let coeffs = gaussian(rng, basis.len());
                let mut v = vec![0.0; self.dim];
                for (c, b) in coeffs.iter().zip(basis) {
                    v.iter_mut().zip(b).for_each(|(x, y)| *x += c * scale * y);
                }
                v
            }
        }
    }
}

fn apply_rotation(rotation: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    rotation
        .iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Draws identity prototypes, camera offsets and tracklets; deterministic in `seed`.
///
/// Every random quantity is drawn from a standard distribution and then scaled,
/// so changing a `sigma_*` leaves all other draws untouched.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticCorpus, CorpusError> {
    cfg.validate()?;
    let dim = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let rank = if cfg.nuisance_dim == 0 { dim } else { cfg.nuisance_dim };
    let nuisance = Nuisance {
        basis: (rank < dim).then(|| random_orthonormal(&mut rng, rank, dim)),
        dim,
    };
    let rotations: Option<Vec<Vec<Vec<f64>>>> = cfg
        .camera_rotation
        .then(|| (0..cfg.cameras).map(|_| random_orthonormal(&mut rng, dim, dim)).collect());
    let offsets: Vec<Vec<f64>> = (0..cfg.cameras)
        .map(|_| nuisance.draw(&mut rng, cfg.sigma_camera))
        .collect();
    let total_identities = cfg.identities + cfg.eval_identities;
    let prototypes: Vec<Vec<f64>> = (0..total_identities)
        .map(|_| {
            gaussian(&mut rng, dim)
                .into_iter()
                .map(|z| z * cfg.sigma_identity)
                .collect()
        })
        .collect();

    let mut tracklets = Vec::new();
    for (identity, proto) in prototypes.iter().enumerate() {
        for cam in 0..cfg.cameras {
            let base: Vec<f64> = match &rotations {
                Some(r) => apply_rotation(&r[cam], proto),
                None => proto.clone(),
            };
            let base: Vec<f64> = base.iter().zip(&offsets[cam]).map(|(a, b)| a + b).collect();
            for _ in 0..cfg.tracklets_per_camera {
                let n = rng.random_range(cfg.min_frames..=cfg.max_frames);
                let drifts: Vec<Vec<f64>> = (0..cfg.drift_segments)
                    .map(|_| nuisance.draw(&mut rng, cfg.sigma_drift))
                    .collect();
                let frames = (0..n)
                    .map(|t| {
                        let drift = &drifts[t * cfg.drift_segments / n];
                        let noise = gaussian(&mut rng, dim);
                        base.iter()
                            .zip(drift)
                            .zip(&noise)
                            .map(|((b, w), e)| b + w + e * cfg.sigma_noise)
                            .collect()
                    })
                    .collect();
                tracklets.push(Tracklet {
                    id: tracklets.len(),
                    identity: Some(identity),
                    camera: cam + 1,
                    frames,
                });
            }
        }
    }

    let (train, held_out): (Vec<_>, Vec<_>) = tracklets
        .into_iter()
        .partition(|t| t.identity.expect("generated") < cfg.identities);

    let mut eval = EvalSplit::default();
    let per_identity = cfg.cameras * cfg.tracklets_per_camera;
    for group in held_out.chunks(per_identity) {
        let probe_pos = (0..group.len())
            .collect::<Vec<_>>()
            .choose(&mut rng)
            .copied()
            .expect("identity has tracklets");
        for (pos, t) in group.iter().enumerate() {
            if pos == probe_pos {
                eval.probe.push(t.clone());
            } else {
                eval.gallery.push(t.clone());
            }
        }
    }

    Ok(SyntheticCorpus {
        train,
        eval,
        prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_frames_equal_prototypes() {
        let cfg = GeneratorConfig {
            identities: 4,
            eval_identities: 2,
            sigma_camera: 0.0,
            sigma_drift: 0.0,
            sigma_noise: 0.0,
            ..Default::default()
        };
        let data = generate_synthetic_corpus(&cfg, 5).unwrap();
        for t in data.train.iter().chain(&data.eval.probe).chain(&data.eval.gallery) {
            let proto = &data.prototypes[t.identity.unwrap()];
            assert!(t.frames.iter().all(|f| f == proto));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = GeneratorConfig::default();
        let a = generate_synthetic_corpus(&cfg, 9).unwrap();
        let b = generate_synthetic_corpus(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&cfg, 10).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = GeneratorConfig::default();
        let data = generate_synthetic_corpus(&cfg, 1).unwrap();
        assert_eq!(data.train.len(), 30 * 3 * 2);
        assert_eq!(data.eval.probe.len(), 30);
        assert_eq!(data.eval.gallery.len(), 30 * 5);
        for t in &data.train {
            assert!(t.identity.unwrap() < 30);
            assert!((cfg.min_frames..=cfg.max_frames).contains(&t.len()));
            assert!(t.frames.iter().all(|f| f.len() == 16));
        }
        assert!(data.eval.probe.iter().all(|t| t.identity.unwrap() >= 30));
    }

    #[test]
    fn every_probe_has_a_cross_camera_match() {
        for seed in 0..20 {
            let cfg = GeneratorConfig {
                tracklets_per_camera: 1 + seed as usize % 3,
                cameras: 2 + seed as usize % 3,
                ..Default::default()
            };
            let data = generate_synthetic_corpus(&cfg, seed).unwrap();
            assert!(data.eval.probes_without_cross_camera_match().is_empty());
        }
    }

    #[test]
    fn rejects_negative_noise() {
        let cfg = GeneratorConfig {
            sigma_noise: -0.1,
            ..Default::default()
        };
        match generate_synthetic_corpus(&cfg, 0) {
            Err(CorpusError::InvalidConfig(msg)) => assert_eq!(msg, "noise must be ≥ 0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nuisance_lives_in_a_subspace() {
        let cfg = GeneratorConfig {
            sigma_identity: 0.0,
            sigma_noise: 0.0,
            nuisance_dim: 2,
            ..Default::default()
        };
        let data = generate_synthetic_corpus(&cfg, 4).unwrap();
        // With no identity signal or noise, frames are camera offset plus drift only.
        let frames: Vec<&Vec<f64>> = data.train.iter().flat_map(|t| t.frames.iter()).take(40).collect();
        let basis = random_orthonormal(&mut ChaCha8Rng::seed_from_u64(4), 2, 16);
        for f in frames {
            let mut residual = f.clone();
            for b in &basis {
                let proj: f64 = residual.iter().zip(b).map(|(x, y)| x * y).sum();
                residual.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
            assert!(residual.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-9);
        }
    }
}
