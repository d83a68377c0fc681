use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use super::ops::{NoGradGuard, Op};
use super::params::ParamSet;
use super::tensor::{Node, Tensor};
use super::{AutodiffError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Record the backward computation itself so the returned gradients are
    /// differentiable.
    pub create_graph: bool,
    /// Keep the forward graph usable for another backward pass. Implied by
    /// `create_graph`.
    pub retain_graph: bool,
}

impl BackwardOptions {
    pub const HIGHER_ORDER: BackwardOptions = BackwardOptions { create_graph: true, retain_graph: true };
    pub const RETAIN: BackwardOptions = BackwardOptions { create_graph: false, retain_graph: true };
}

/// Post-order list of graph nodes reachable from `root`.
fn topo_order(root: &Rc<Node>) -> Result<Vec<Rc<Node>>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id) {
            continue;
        }
        stack.push((node.clone(), true));
        if node.is_leaf {
            continue;
        }
        let op = node.op.borrow();
        let op = op.as_ref().ok_or(AutodiffError::GraphConsumed)?;
        for input in op.inputs() {
            if let Some(child) = input.node() {
                if !seen.contains(&child.id) {
                    stack.push((child.clone(), false));
                }
            }
        }
    }
    Ok(order)
}

/// Gradients of a scalar `loss` with respect to each tensor in `wrt`.
///
/// Tensors the loss does not depend on get zero gradients of their own shape.
pub fn grad(loss: &Tensor, wrt: &[&Tensor], opts: BackwardOptions) -> Result<Vec<Tensor>> {
    if loss.numel() != 1 {
        return Err(AutodiffError::NonScalarLoss(loss.shape().to_vec()));
    }
    let zeros = || wrt.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let Some(root) = loss.node() else {
        return Ok(zeros());
    };
    let retain = opts.retain_graph || opts.create_graph;
    let _guard = (!opts.create_graph).then(NoGradGuard::new);

    let order = topo_order(root)?;
    let keep: HashSet<u64> = wrt.iter().filter_map(|t| t.node_id()).collect();
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(root.id, Tensor::ones(loss.shape()));

    for node in order.iter().rev() {
        if node.is_leaf {
            continue;
        }
        let g = if keep.contains(&node.id) { grads.get(&node.id).cloned() } else { grads.remove(&node.id) };
        let Some(g) = g else { continue };
        {
            let op = node.op.borrow();
            let op = op.as_ref().ok_or(AutodiffError::GraphConsumed)?;
            let contributions = op.vjp(&g)?;
            for (input, gi) in op.inputs().into_iter().zip(contributions) {
                let (Some(child), Some(gi)) = (input.node(), gi) else { continue };
                let acc = match grads.remove(&child.id) {
                    Some(prev) => prev.add(&gi)?,
                    None => gi,
                };
                grads.insert(child.id, acc);
            }
        }
        if !retain {
            node.op.borrow_mut().take();
        }
    }

    Ok(wrt
        .iter()
        .map(|t| t.node_id().and_then(|id| grads.get(&id).cloned()).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Gradient of `loss` for every parameter in `params`, releasing the graph.
pub fn backward(loss: &Tensor, params: &ParamSet) -> Result<ParamSet> {
    backward_with(loss, params, BackwardOptions::default())
}

pub fn backward_with(loss: &Tensor, params: &ParamSet, opts: BackwardOptions) -> Result<ParamSet> {
    let tensors: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
    let grads = grad(loss, &tensors, opts)?;
    ParamSet::from_pairs(params.names().map(str::to_owned).zip(grads))
}

/// How the dependence of adapted parameters on their initial values is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    /// Adapted parameters depend on the initial ones only through the identity term.
    FirstOrder,
    /// The inner gradient is differentiated as well (Hessian-vector term included).
    SecondOrder,
}

/// Meta-gradient of a loss evaluated at parameters produced by a recorded
/// [`Tensor::sgd_update`] step from `initial`.
///
/// With [`UpdateOrder::SecondOrder`] every update step reachable from the loss
/// must have been built from a tracked gradient; asserting second order over a
/// first-order step is an error.
pub fn backward_through_update(meta_loss: &Tensor, initial: &ParamSet, order: UpdateOrder) -> Result<ParamSet> {
    let root = meta_loss.node().ok_or(AutodiffError::InnerStepNotRecorded)?;
    let mut updates = 0usize;
    let mut detached_updates = 0usize;
    for node in topo_order(root)? {
        if let Some(Op::SgdUpdate { grad, .. }) = node.op.borrow().as_ref() {
            updates += 1;
            if !grad.is_tracked() {
                detached_updates += 1;
            }
        }
    }
    if updates == 0 {
        return Err(AutodiffError::InnerStepNotRecorded);
    }
    if order == UpdateOrder::SecondOrder && detached_updates > 0 {
        return Err(AutodiffError::Invalid(format!(
            "second-order meta-gradient requested but {detached_updates} update step(s) used a detached gradient"
        )));
    }
    backward(meta_loss, initial)
}
