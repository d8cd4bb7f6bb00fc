use std::fmt;
use std::str::FromStr;

use super::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// Stabiliser inside the differentiable norm, so `‖v‖` stays smooth at `v = 0`.
pub const NORM_EPS: f64 = 1e-12;

/// The closed set of differentiable operations the graph understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    /// `(m,k)·(k,n)`, `(m,k)·(k)` or `(k)·(k,n)`.
    Matmul,
    /// Elementwise, or a `(m,n) + (n)` bias-add.
    Add,
    Subtract,
    /// `[s] * x` for a one-element `s`.
    ScalarMultiply,
    Relu,
    MeanOverAxis(usize),
    Sum,
    /// `sqrt(Σ v² + ε)`.
    L2NormEps,
    /// `v / sqrt(Σ v² + ε)`.
    L2NormalizeEps,
    /// Log-softmax of a vector, computed through log-sum-exp.
    SoftmaxLog,
    HingeMax0,
    Dot,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::ScalarMultiply => "scalar_multiply",
            Primitive::Relu => "relu",
            Primitive::MeanOverAxis(_) => "mean_over_axis",
            Primitive::Sum => "sum",
            Primitive::L2NormEps => "l2_norm_eps",
            Primitive::L2NormalizeEps => "l2_normalize_eps",
            Primitive::SoftmaxLog => "softmax_log",
            Primitive::HingeMax0 => "hinge_max0",
            Primitive::Dot => "dot",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Matmul
            | Primitive::Add
            | Primitive::Subtract
            | Primitive::ScalarMultiply
            | Primitive::Dot => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::MeanOverAxis(axis) => write!(f, "mean_over_axis:{axis}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Primitive {
    type Err = AutodiffError;

    /// `mean_over_axis` defaults to axis 0; `mean_over_axis:1` selects another.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(axis) = s.strip_prefix("mean_over_axis:") {
            return axis
                .parse()
                .map(Primitive::MeanOverAxis)
                .map_err(|_| AutodiffError::UnknownPrimitive(s.to_string()));
        }
        Ok(match s {
            "matmul" => Primitive::Matmul,
            "add" => Primitive::Add,
            "subtract" => Primitive::Subtract,
            "scalar_multiply" => Primitive::ScalarMultiply,
            "relu" => Primitive::Relu,
            "mean_over_axis" => Primitive::MeanOverAxis(0),
            "sum" => Primitive::Sum,
            "l2_norm_eps" => Primitive::L2NormEps,
            "l2_normalize_eps" => Primitive::L2NormalizeEps,
            "softmax_log" => Primitive::SoftmaxLog,
            "hinge_max0" => Primitive::HingeMax0,
            "dot" => Primitive::Dot,
            _ => return Err(AutodiffError::UnknownPrimitive(s.to_string())),
        })
    }
}

fn mismatch(op: Primitive, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(format!("{op}: {detail}"))
}

/// Row/column view of a matmul operand; vectors become a row (left) or a column (right).
fn matmul_dims<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(usize, usize, usize, Vec<usize>), AutodiffError> {
    let op = Primitive::Matmul;
    let (m, k) = match a.shape() {
        [k] => (1, *k),
        [m, k] => (*m, *k),
        s => return Err(mismatch(op, format!("left operand has rank {}", s.len()))),
    };
    let (k2, n) = match b.shape() {
        [k] => (*k, 1),
        [k, n] => (*k, *n),
        s => return Err(mismatch(op, format!("right operand has rank {}", s.len()))),
    };
    if k != k2 {
        return Err(mismatch(
            op,
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let out = match (a.rank(), b.rank()) {
        (2, 2) => vec![m, n],
        (2, 1) => vec![m],
        (1, 2) => vec![n],
        _ => return Err(mismatch(op, "two vectors; use dot".into())),
    };
    Ok((m, k, n, out))
}

fn log_sum_exp<S: Scalar>(x: &[S]) -> S {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Checks shapes and computes the forward value.
pub(crate) fn forward<S: Scalar>(
    op: Primitive,
    inputs: &[&Tensor<S>],
) -> Result<Tensor<S>, AutodiffError> {
    if inputs.len() != op.arity() {
        return Err(mismatch(
            op,
            format!("expects {} inputs, got {}", op.arity(), inputs.len()),
        ));
    }
    let eps = S::lit(NORM_EPS);
    match op {
        Primitive::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n, shape) = matmul_dims(a, b)?;
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![S::zero(); m * n];
            for i in 0..m {
                let row = &ad[i * k..(i + 1) * k];
                let dst = &mut out[i * n..(i + 1) * n];
                for (l, &av) in row.iter().enumerate() {
                    let brow = &bd[l * n..(l + 1) * n];
                    for (o, &bv) in dst.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::new(shape, out)
        }
        Primitive::Add | Primitive::Subtract => {
            let (a, b) = (inputs[0], inputs[1]);
            let sign = if op == Primitive::Add {
                S::one()
            } else {
                -S::one()
            };
            if a.same_shape(b) {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| x + sign * y)
                    .collect();
                return Tensor::new(a.shape().to_vec(), data);
            }
            match (a.shape(), b.shape()) {
                ([_, n], [n2]) if op == Primitive::Add && n == n2 => {
                    let n = *n;
                    let data = a
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x + b.data()[i % n])
                        .collect();
                    Tensor::new(a.shape().to_vec(), data)
                }
                _ => Err(mismatch(
                    op,
                    format!("cannot combine {:?} and {:?}", a.shape(), b.shape()),
                )),
            }
        }
        Primitive::ScalarMultiply => {
            let (s, x) = (inputs[0], inputs[1]);
            if !s.is_scalar() {
                return Err(mismatch(
                    op,
                    format!("factor must hold one entry, has shape {:?}", s.shape()),
                ));
            }
            let s = s.item();
            Ok(x.map(|v| s * v))
        }
        Primitive::Relu | Primitive::HingeMax0 => Ok(inputs[0].map(|v| v.max(S::zero()))),
        Primitive::MeanOverAxis(axis) => {
            let x = inputs[0];
            match (x.shape(), axis) {
                ([m, n], 0) => {
                    let (m, n) = (*m, *n);
                    let mut out = vec![S::zero(); n];
                    for row in x.data().chunks_exact(n) {
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let denom = S::lit(m as f64);
                    out.iter_mut().for_each(|v| *v = *v / denom);
                    Tensor::new(vec![n], out)
                }
                ([m, n], 1) => {
                    let denom = S::lit(*n as f64);
                    let out = x
                        .data()
                        .chunks_exact(*n)
                        .map(|row| row.iter().copied().sum::<S>() / denom)
                        .collect();
                    Tensor::new(vec![*m], out)
                }
                ([n], 0) => {
                    let total: S = x.data().iter().copied().sum();
                    Ok(Tensor::scalar(total / S::lit(*n as f64)))
                }
                (shape, axis) => Err(mismatch(
                    op,
                    format!("axis {axis} out of range for shape {shape:?}"),
                )),
            }
        }
        Primitive::Sum => Ok(Tensor::scalar(inputs[0].data().iter().copied().sum())),
        Primitive::L2NormEps => {
            let sq: S = inputs[0].data().iter().map(|&v| v * v).sum();
            Ok(Tensor::scalar((sq + eps).sqrt()))
        }
        Primitive::L2NormalizeEps => {
            let x = inputs[0];
            let sq: S = x.data().iter().map(|&v| v * v).sum();
            let norm = (sq + eps).sqrt();
            Ok(x.map(|v| v / norm))
        }
        Primitive::SoftmaxLog => {
            let x = inputs[0];
            if x.rank() != 1 {
                return Err(mismatch(op, format!("expects a vector, got {:?}", x.shape())));
            }
            let lse = log_sum_exp(x.data());
            Ok(x.map(|v| v - lse))
        }
        Primitive::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 1 || !a.same_shape(b) {
                return Err(mismatch(
                    op,
                    format!("needs equal-length vectors, got {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
            Ok(Tensor::scalar(
                a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum(),
            ))
        }
    }
}

/// Vector-Jacobian products: one gradient per input, given the upstream gradient of the output.
pub(crate) fn vjp<S: Scalar>(
    op: Primitive,
    inputs: &[&Tensor<S>],
    output: &Tensor<S>,
    upstream: &Tensor<S>,
) -> Vec<Tensor<S>> {
    let g = upstream.data();
    match op {
        Primitive::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n, _) = matmul_dims(a, b).expect("shapes validated in forward");
            let (ad, bd) = (a.data(), b.data());
            let mut da = vec![S::zero(); m * k];
            let mut db = vec![S::zero(); k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for l in 0..k {
                    let brow = &bd[l * n..(l + 1) * n];
                    let mut acc = S::zero();
                    for (&gv, &bv) in grow.iter().zip(brow) {
                        acc += gv * bv;
                    }
                    da[i * k + l] += acc;
                    let av = ad[i * k + l];
                    let dst = &mut db[l * n..(l + 1) * n];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += av * gv;
                    }
                }
            }
            vec![
                Tensor::new(a.shape().to_vec(), da).expect("shape preserved"),
                Tensor::new(b.shape().to_vec(), db).expect("shape preserved"),
            ]
        }
        Primitive::Add | Primitive::Subtract => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = upstream.clone();
            let db = if a.same_shape(b) {
                if op == Primitive::Add {
                    upstream.clone()
                } else {
                    upstream.map(|v| -v)
                }
            } else {
                let n = b.len();
                let mut acc = vec![S::zero(); n];
                for row in g.chunks_exact(n) {
                    for (o, &v) in acc.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::new(b.shape().to_vec(), acc).expect("bias shape")
            };
            vec![da, db]
        }
        Primitive::ScalarMultiply => {
            let (s, x) = (inputs[0], inputs[1]);
            let ds: S = x.data().iter().zip(g).map(|(&xv, &gv)| xv * gv).sum();
            let sv = s.item();
            vec![
                Tensor::new(s.shape().to_vec(), vec![ds]).expect("scalar shape"),
                upstream.map(|v| sv * v),
            ]
        }
        Primitive::Relu | Primitive::HingeMax0 => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(g)
                .map(|(&xv, &gv)| if xv > S::zero() { gv } else { S::zero() })
                .collect();
            vec![Tensor::new(x.shape().to_vec(), data).expect("shape preserved")]
        }
        Primitive::MeanOverAxis(axis) => {
            let x = inputs[0];
            let data = match (x.shape(), axis) {
                ([m, n], 0) => {
                    let denom = S::lit(*m as f64);
                    (0..m * n).map(|i| g[i % n] / denom).collect()
                }
                ([_, n], _) => {
                    let denom = S::lit(*n as f64);
                    (0..x.len()).map(|i| g[i / n] / denom).collect()
                }
                _ => {
                    let denom = S::lit(x.len() as f64);
                    vec![g[0] / denom; x.len()]
                }
            };
            vec![Tensor::new(x.shape().to_vec(), data).expect("shape preserved")]
        }
        Primitive::Sum => vec![inputs[0].map(|_| g[0])],
        Primitive::L2NormEps => {
            let y = output.item();
            vec![inputs[0].map(|v| g[0] * v / y)]
        }
        Primitive::L2NormalizeEps => {
            let x = inputs[0];
            let y = output.data();
            let sq: S = x.data().iter().map(|&v| v * v).sum();
            let norm = (sq + S::lit(NORM_EPS)).sqrt();
            let yg: S = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            let data = y
                .iter()
                .zip(g)
                .map(|(&yv, &gv)| (gv - yv * yg) / norm)
                .collect();
            vec![Tensor::new(x.shape().to_vec(), data).expect("shape preserved")]
        }
        Primitive::SoftmaxLog => {
            let total: S = g.iter().copied().sum();
            let data = output
                .data()
                .iter()
                .zip(g)
                .map(|(&ls, &gv)| gv - ls.exp() * total)
                .collect();
            vec![Tensor::new(output.shape().to_vec(), data).expect("shape preserved")]
        }
        Primitive::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![b.map(|v| g[0] * v), a.map(|v| g[0] * v)]
        }
    }
}
