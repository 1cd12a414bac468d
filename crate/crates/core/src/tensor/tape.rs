use std::cell::Cell;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::Tensor;
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded primitive: given the upstream
/// gradient and which inputs need a gradient, returns one entry per input.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static>;

struct Node {
    op: &'static str,
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Ordered record of primitive applications. Nodes are appended as they are
/// created, so every node's inputs precede it.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Arc<Mutex<TapeInner>>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    tape: Tape,
    id: usize,
}

thread_local! {
    static CORRUPTED: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of primitive `op` deliberately scaled by
/// 1.5. Exists so gradient checks can be shown to catch a wrong rule.
pub fn with_corrupted_backward<R>(op: &'static str, f: impl FnOnce() -> R) -> R {
    let prev = CORRUPTED.with(|c| c.replace(Some(op)));
    let out = f();
    CORRUPTED.with(|c| c.set(prev));
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.lock().unwrap();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Starts tracking `t` as a leaf. The returned tensor shares `t`'s data.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(Node {
            op: "leaf",
            inputs: Vec::new(),
            shape: t.shape().to_vec(),
            backward: None,
        });
        t.detach().with_node(NodeRef {
            tape: self.clone(),
            id,
        })
    }

    /// Gradients of the scalar `loss` with respect to every node it depends on.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::NotScalar(loss.shape().to_vec()));
        }
        let root = match loss.node() {
            Some(n) if n.tape.same(self) => n.id,
            _ => return Err(Error::NotTracked),
        };
        let corrupted = CORRUPTED.with(|c| c.get());
        let inner = self.inner.lock().unwrap();
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.inputs.iter().map(|i| i.is_some()).collect();
                let input_grads = bw(&upstream, &needs);
                for (slot, g) in node.inputs.iter().zip(input_grads) {
                    let (Some(input), Some(mut g)) = (slot, g) else {
                        continue;
                    };
                    if corrupted == Some(node.op) {
                        g.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    match &mut grads[*input] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        empty => *empty = Some(g),
                    }
                }
            }
            grads[id] = Some(upstream);
        }

        let map = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| {
                g.map(|g| (id, Tensor::raw(inner.nodes[id].shape.clone(), g)))
            })
            .collect();
        Ok(Gradients {
            tape: self.clone(),
            map,
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: Tape,
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a tracked tensor, if the loss depends on it.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        let node = t.node()?;
        if !node.tape.same(&self.tape) {
            return None;
        }
        self.map.get(&node.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Attaches `out` to the tape shared by the tracked `inputs`, if any.
pub(crate) fn record(
    op: &'static str,
    inputs: &[&Tensor],
    out: Tensor,
    backward: impl Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static,
) -> Result<Tensor> {
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = t.node() {
            match tape {
                None => tape = Some(&n.tape),
                Some(existing) if !existing.same(&n.tape) => {
                    return Err(Error::TapeMismatch(op))
                }
                _ => {}
            }
        }
    }
    let Some(tape) = tape else {
        return Ok(out);
    };
    let id = tape.push(Node {
        op,
        inputs: inputs.iter().map(|t| t.node().map(|n| n.id)).collect(),
        shape: out.shape().to_vec(),
        backward: Some(Box::new(backward)),
    });
    let node = NodeRef {
        tape: tape.clone(),
        id,
    };
    Ok(out.with_node(node))
}
