use super::{AutodiffError, Graph, NodeId, Tensor};
use crate::scalar::Scalar;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error<S: Scalar>(analytic: S, numeric: S) -> S {
    let floor = S::lit(1e-8);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<S, E, F>(builder: &mut F, params: &[Tensor<S>]) -> Result<(Graph<S>, Vec<NodeId>, NodeId), E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: FnMut(&mut Graph<S>, &[NodeId]) -> Result<NodeId, E>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.leaf(p.clone())).collect();
    let root = builder(&mut graph, &ids)?;
    let value = graph.value(root);
    if !value.is_scalar() {
        return Err(AutodiffError::NonScalarRoot(value.shape().to_vec()).into());
    }
    if !value.item().is_finite() {
        return Err(AutodiffError::NonFiniteLoss.into());
    }
    Ok((graph, ids, root))
}

/// Compares reverse-mode gradients with central differences for every parameter entry.
///
/// `loss_builder` receives a fresh graph and the leaf ids of `params` (in order) and
/// must return the scalar loss node. It is called `1 + 2·Σ|param|` times and has to be
/// deterministic. Returns the largest [`relative_error`] seen.
pub fn check_gradients<S, E, F>(mut loss_builder: F, params: &[Tensor<S>], h: S) -> Result<S, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: FnMut(&mut Graph<S>, &[NodeId]) -> Result<NodeId, E>,
{
    assert!(h > S::zero(), "finite-difference step must be positive");
    let (mut graph, ids, root) = evaluate(&mut loss_builder, params)?;
    graph.backward(root)?;
    let analytic: Vec<Tensor<S>> = ids.iter().map(|&id| graph.grad(id).clone()).collect();
    drop(graph);

    let two_h = h + h;
    let mut probe = params.to_vec();
    let mut worst = S::zero();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let original = probe[pi].data()[ei];
            probe[pi].data_mut()[ei] = original + h;
            let plus = {
                let (g, _, r) = evaluate(&mut loss_builder, &probe)?;
                g.value(r).item()
            };
            probe[pi].data_mut()[ei] = original - h;
            let minus = {
                let (g, _, r) = evaluate(&mut loss_builder, &probe)?;
                g.value(r).item()
            };
            probe[pi].data_mut()[ei] = original;
            let numeric = (plus - minus) / two_h;
            worst = worst.max(relative_error(grad.data()[ei], numeric));
        }
    }
    Ok(worst)
}
