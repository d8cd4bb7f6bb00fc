//! Temporal-pooling MLP encoder and the linear classifier head.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::corpus::Tracklet;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("tracklet {0} has no frames")]
    EmptyTracklet(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `(d_in, h, d)`: frame features, hidden width, embedding size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
}

/// `f_θ(X) = relu(mean(X)·W1 + b1)·W2 + b2`, optionally L2-normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub normalize: bool,
}

/// `g_W(e) = Wᵀe + b` with `W: d × m_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub encoder: Encoder<S>,
    pub classifier: Classifier<S>,
}

fn uniform_tensor<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases; deterministic in `seed`.
pub fn init_model<S: Scalar>(seed: u64, dims: ModelDims, num_labels: usize) -> Model<S> {
    assert!(
        dims.input >= 1 && dims.hidden >= 1 && dims.embed >= 1 && num_labels >= 1,
        "model dimensions must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder {
        w1: uniform_tensor(&mut rng, dims.input, dims.hidden, dims.input),
        b1: Tensor::zeros(&[dims.hidden]),
        w2: uniform_tensor(&mut rng, dims.hidden, dims.embed, dims.hidden),
        b2: Tensor::zeros(&[dims.embed]),
        normalize: false,
    };
    let classifier = Classifier {
        weight: uniform_tensor(&mut rng, dims.embed, num_labels, dims.embed),
        bias: Tensor::zeros(&[num_labels]),
    };
    Model { encoder, classifier }
}

impl<S: Scalar> Encoder<S> {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.w1.shape()[0],
            hidden: self.w1.shape()[1],
            embed: self.w2.shape()[1],
        }
    }
}

impl<S: Scalar> Model<S> {
    pub fn dims(&self) -> ModelDims {
        self.encoder.dims()
    }

    pub fn num_labels(&self) -> usize {
        self.classifier.bias.len()
    }

    /// Parameter tensors in a fixed order: encoder `w1, b1, w2, b2`, then classifier `W, b`.
    pub fn params(&self) -> [&Tensor<S>; 6] {
        [
            &self.encoder.w1,
            &self.encoder.b1,
            &self.encoder.w2,
            &self.encoder.b2,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<S>; 6] {
        [
            &mut self.encoder.w1,
            &mut self.encoder.b1,
            &mut self.encoder.w2,
            &mut self.encoder.b2,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }

    /// Places the parameters on `graph` as leaves.
    pub fn bind(&self, graph: &mut Graph<S>) -> BoundModel {
        let ids = self.params().map(|p| graph.leaf(p.clone()));
        BoundModel::from_ids(ids, self.dims(), self.encoder.normalize)
    }

    /// Evaluation-mode embedding of a whole tracklet.
    pub fn embed(&self, tracklet: &Tracklet) -> Result<Vec<S>, ModelError> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let e = bound.embed(&mut graph, tracklet)?;
        Ok(graph.value(e).data().to_vec())
    }
}

/// Graph handles of a model's parameters, used to build one loss.
#[derive(Debug, Clone, Copy)]
pub struct BoundModel {
    ids: [NodeId; 6],
    dims: ModelDims,
    normalize: bool,
}

impl BoundModel {
    /// `ids` in [`Model::params`] order.
    pub fn from_ids(ids: [NodeId; 6], dims: ModelDims, normalize: bool) -> Self {
        Self { ids, dims, normalize }
    }

    pub fn ids(&self) -> [NodeId; 6] {
        self.ids
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    /// `f_θ` on a tracklet: temporal mean of the frames, then the MLP.
    pub fn embed<S: Scalar>(&self, graph: &mut Graph<S>, tracklet: &Tracklet) -> Result<NodeId, ModelError> {
        if tracklet.frames.is_empty() {
            return Err(ModelError::EmptyTracklet(tracklet.id));
        }
        let width = self.dims.input;
        let mut data = Vec::with_capacity(tracklet.len() * width);
        for frame in &tracklet.frames {
            if frame.len() != width {
                return Err(ModelError::DimensionMismatch {
                    expected: width,
                    found: frame.len(),
                });
            }
            data.extend(frame.iter().map(|&v| S::lit(v)));
        }
        let frames = graph.leaf(Tensor::matrix(tracklet.len(), width, data)?);
        let pooled = graph.mean_over_axis(frames, 0)?;
        self.mlp(graph, pooled)
    }

    /// The MLP part of `f_θ` applied to an already pooled `d_in` vector.
    pub fn mlp<S: Scalar>(&self, graph: &mut Graph<S>, pooled: NodeId) -> Result<NodeId, ModelError> {
        let [w1, b1, w2, b2, _, _] = self.ids;
        let h = graph.matmul(pooled, w1)?;
        let h = graph.add(h, b1)?;
        let h = graph.relu(h)?;
        let e = graph.matmul(h, w2)?;
        let e = graph.add(e, b2)?;
        if self.normalize {
            Ok(graph.l2_normalize(e)?)
        } else {
            Ok(e)
        }
    }

    /// Raw logits `Z = Wᵀe + b`.
    pub fn classify<S: Scalar>(&self, graph: &mut Graph<S>, embedding: NodeId) -> Result<NodeId, ModelError> {
        classify(graph, self.ids[4], self.ids[5], embedding)
    }
}

/// `Z = Wᵀe + b` for classifier leaves `weight: d × m_l` and `bias: m_l`.
pub fn classify<S: Scalar>(
    graph: &mut Graph<S>,
    weight: NodeId,
    bias: NodeId,
    embedding: NodeId,
) -> Result<NodeId, ModelError> {
    let d = graph.value(weight).shape()[0];
    let found = graph.value(embedding).len();
    if graph.value(embedding).rank() != 1 || found != d {
        return Err(ModelError::DimensionMismatch { expected: d, found });
    }
    let z = graph.matmul(embedding, weight)?;
    Ok(graph.add(z, bias)?)
}

/// Serializable ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, ModelError> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| ModelError::Checkpoint(format!("bad word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

const CHECKPOINT_FORMAT: &str = "tcpl-checkpoint/1";
const PARAM_NAMES: [&str; 6] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "classifier.weight",
    "classifier.bias",
];

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    dims: ModelDims,
    num_labels: usize,
    normalize: bool,
    tensors: Vec<NamedTensor>,
    rng: Option<RngState>,
}

/// A model snapshot plus the training RNG position.
///
/// Stored as JSON; values are written as `f64` with shortest round-trip
/// formatting, so reloading reproduces every bit for `f32` and `f64` models.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub rng: Option<RngState>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_json(&self) -> String {
        let tensors = self
            .model
            .params()
            .iter()
            .zip(PARAM_NAMES)
            .map(|(t, name)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.widen()).collect(),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            dims: self.model.dims(),
            num_labels: self.model.num_labels(),
            normalize: self.model.encoder.normalize,
            tensors,
            rng: self.rng.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported format `{}`", file.format)));
        }
        if file.tensors.len() != PARAM_NAMES.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                PARAM_NAMES.len(),
                file.tensors.len()
            )));
        }
        let mut model = init_model::<S>(0, file.dims, file.num_labels);
        model.encoder.normalize = file.normalize;
        for ((slot, stored), name) in model.params_mut().into_iter().zip(file.tensors).zip(PARAM_NAMES) {
            if stored.name != name || stored.shape != slot.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{}` {:?} does not match `{name}` {:?}",
                    stored.name,
                    stored.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(stored.shape, stored.data.into_iter().map(S::lit).collect())?;
        }
        Ok(Self { model, rng: file.rng })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;

    fn dims(input: usize, hidden: usize, embed: usize) -> ModelDims {
        ModelDims { input, hidden, embed }
    }

    fn tracklet(frames: Vec<Vec<f64>>) -> Tracklet {
        Tracklet {
            id: 0,
            identity: None,
            camera: 1,
            frames,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_model::<f64>(1, dims(4, 8, 2), 3);
        let b = init_model::<f64>(1, dims(4, 8, 2), 3);
        let c = init_model::<f64>(2, dims(4, 8, 2), 3);
        assert_eq!(a, b);
        assert_ne!(a.encoder.w1, c.encoder.w1);
        assert_eq!(a.classifier.weight.shape(), &[2, 3]);
        assert_eq!(a.classifier.bias.shape(), &[3]);
        assert!(a.params()[1].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_weights_give_relu_of_the_frame() {
        let mut m = init_model::<f64>(0, dims(3, 3, 3), 1);
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        m.encoder.w1 = eye.clone();
        m.encoder.w2 = eye;
        let e = m.embed(&tracklet(vec![vec![-1.0, 0.5, 2.0]])).unwrap();
        assert_eq!(e, vec![0.0, 0.5, 2.0]);
    }

    #[test]
    fn constant_frames_match_single_frame() {
        let m = init_model::<f64>(3, dims(2, 5, 3), 2);
        let v = vec![0.3, -1.2];
        let many = m.embed(&tracklet(vec![v.clone(); 7])).unwrap();
        let one = m.embed(&tracklet(vec![v])).unwrap();
        for (a, b) in many.iter().zip(&one) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_mismatched_tracklets_are_rejected() {
        let m = init_model::<f64>(0, dims(2, 2, 2), 1);
        assert!(matches!(m.embed(&tracklet(vec![])), Err(ModelError::EmptyTracklet(0))));
        assert!(matches!(
            m.embed(&tracklet(vec![vec![1.0, 2.0, 3.0]])),
            Err(ModelError::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn classify_examples() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::zeros(&[3, 2]));
        let b = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let e = g.leaf(Tensor::vector(vec![0.4, -0.2, 9.0]));
        let z = classify(&mut g, w, b, e).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 2.0]);

        let w = g.leaf(Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap());
        let b = g.leaf(Tensor::zeros(&[2]));
        let e = g.leaf(Tensor::vector(vec![3.0]));
        let z = classify(&mut g, w, b, e).unwrap();
        assert_eq!(g.value(z).data(), &[6.0, -3.0]);

        let bad = g.leaf(Tensor::vector(vec![1.0, 1.0]));
        assert!(matches!(
            classify(&mut g, w, b, bad),
            Err(ModelError::DimensionMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_wrt_classifier_matches_differences() {
        let m = init_model::<f64>(5, dims(3, 4, 3), 4);
        let t = tracklet(vec![vec![0.2, -0.4, 1.1], vec![0.9, 0.3, -0.5]]);
        let fixed = m.clone();
        let err = check_gradients(
            |g, ids| -> Result<NodeId, ModelError> {
                let enc = fixed.bind(g);
                let e = enc.embed(g, &t)?;
                let z = classify(g, ids[0], ids[1], e)?;
                let ls = g.log_softmax(z)?;
                let onehot = g.leaf(Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]));
                let picked = g.dot(onehot, ls)?;
                Ok(g.scale(-1.0, picked)?)
            },
            &[m.classifier.weight.clone(), m.classifier.bias.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = init_model::<f64>(11, dims(3, 5, 2), 4);
        m.classifier.bias = Tensor::vector(vec![0.1, -1.0 / 3.0, 1e-310, 7.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(3);
        let _: u64 = rng.random();
        let ckpt = Checkpoint {
            model: m,
            rng: Some(RngState::capture(&rng)),
        };
        let back = Checkpoint::<f64>::from_json(&ckpt.to_json()).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in ckpt.model.params().iter().zip(back.model.params()) {
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let mut restored = back.rng.unwrap().restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn f32_checkpoint_round_trip() {
        let m = init_model::<f32>(4, dims(2, 3, 2), 2);
        let ckpt = Checkpoint { model: m, rng: None };
        assert_eq!(Checkpoint::<f32>::from_json(&ckpt.to_json()).unwrap(), ckpt);
    }
}
