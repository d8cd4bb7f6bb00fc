#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcpl::autodiff::{check_gradients, Tensor};
use tcpl::corpus::Tracklet;
use tcpl::losses::{joint_loss, LossError, LossVariant, LossWeights, Objective, Supervision};
use tcpl::model::{init_model, BoundModel, ModelDims};
use tcpl::sampling::SamplerConfig;

pub fn random_tracklet(rng: &mut impl Rng, id: usize, dim: usize, frames: usize) -> Tracklet {
    Tracklet {
        id,
        identity: Some(id),
        camera: 1,
        frames: (0..frames)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    }
}

/// A random joint-loss problem: model dims, parameters, batch and sampler settings.
pub struct LossProblem {
    pub dims: ModelDims,
    pub params: Vec<Tensor<f64>>,
    pub batch: Vec<(Tracklet, Supervision)>,
    pub sampler: SamplerConfig,
    pub objective: Objective,
    pub sample_seed: u64,
}

impl LossProblem {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            input: rng.random_range(2..=8),
            hidden: rng.random_range(2..=8),
            embed: rng.random_range(2..=8),
        };
        let labels = rng.random_range(2..=3);
        let model = init_model::<f64>(rng.random(), dims, labels);
        let mut params: Vec<Tensor<f64>> = model.params().iter().map(|p| (*p).clone()).collect();
        // non-zero biases so every parameter entry carries gradient
        for b in [1, 3, 5] {
            for v in params[b].data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let size = rng.random_range(3..=6);
        let batch = (0..size)
            .map(|i| {
                let frames = rng.random_range(5..=12);
                let t = random_tracklet(&mut rng, i, dims.input, frames);
                // member 0 always carries a label; see `unsupervised_batch_gradients` for the rest
                let kind = if i == 0 { 0 } else { rng.random_range(0..3) };
                let sup = match kind {
                    0 => Supervision::Labeled(rng.random_range(0..labels)),
                    1 => Supervision::Pseudo(rng.random_range(0..labels)),
                    _ => Supervision::None,
                };
                (t, sup)
            })
            .collect();
        Self {
            dims,
            params,
            batch,
            sampler: SamplerConfig {
                rho: 0.2,
                rank: rng.random_range(1..=2),
                batch_size: size,
            },
            objective: Objective {
                variant: LossVariant::Full,
                weights: LossWeights {
                    lambda: rng.random_range(0.5..2.0),
                    alpha: 0.3,
                },
            },
            sample_seed: rng.random(),
        }
    }

    /// Max relative error between reverse-mode and central-difference gradients.
    pub fn gradient_error(&self) -> f64 {
        check_gradients::<f64, LossError, _>(
            |g, ids| {
                let bound = BoundModel::from_ids(ids.try_into().unwrap(), self.dims, false);
                let batch: Vec<(&Tracklet, Supervision)> = self.batch.iter().map(|(t, s)| (t, *s)).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
                Ok(joint_loss(g, &bound, &batch, &self.objective, &self.sampler, &mut rng, None)?.root)
            },
            &self.params,
            1e-5,
        )
        .unwrap()
    }
}
