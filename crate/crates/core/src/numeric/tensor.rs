//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable values. Every op that touches a gradient-tracked
//! tensor records a backward closure on an implicit graph held by `Rc`
//! parent links; [`Tensor::backward`] replays the graph in reverse
//! topological order and returns a gradient per tracked leaf.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

pub(crate) struct Node {
    pub(crate) parents: Vec<Tensor>,
    /// Maps the output gradient to one gradient buffer per parent.
    pub(crate) backward: BackwardFn,
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: bool,
    pub(crate) node: Option<Node>,
}

/// An immutable multi-dimensional array of f64 values, row-major.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("grad", &self.inner.grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid(
                "Tensor::new",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// A gradient-tracked leaf (trainable parameter).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: t.inner.id,
                shape: t.inner.shape.clone(),
                data: t.inner.data.clone(),
                grad: true,
                node: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(vec![1.0; numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![], false)
    }

    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor::leaf(data, shape.to_vec(), false)
    }

    pub(crate) fn leaf(data: Vec<f64>, shape: Vec<usize>, grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                grad,
                node: None,
            }),
        }
    }

    /// Result of a primitive op. The backward closure is only retained when
    /// some parent is gradient-tracked.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let grad = parents.iter().any(|p| p.inner.grad);
        let node = if grad {
            Some(Node { parents, backward })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                grad,
                node,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.grad
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Scalar extraction; panics if not a single element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Stop-gradient: a fresh leaf sharing the same values, outside the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.data.clone(), self.inner.shape.clone(), false)
    }

    /// Reverse pass from a scalar loss. Consumes the loss; returns a gradient
    /// for every gradient-tracked tensor reachable from it.
    pub fn backward(self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.inner.grad {
            // Nothing tracked: empty gradient map.
            return Ok(Gradients {
                map: HashMap::new(),
                shapes: HashMap::new(),
            });
        }

        // Iterative post-order DFS for topological order.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((t, child_idx)) = stack.pop() {
            let n_parents = t.inner.node.as_ref().map_or(0, |n| n.parents.len());
            if child_idx < n_parents {
                stack.push((t.clone(), child_idx + 1));
                let p = t.inner.node.as_ref().unwrap().parents[child_idx].clone();
                if p.inner.grad && !visited.contains(&p.inner.id) {
                    visited.insert(p.inner.id);
                    stack.push((p, 0));
                }
            } else {
                topo.push(t);
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);

        let mut leaf_grads: HashMap<u64, Vec<f64>> = HashMap::new();
        let mut leaf_shapes: HashMap<u64, Vec<usize>> = HashMap::new();

        for t in topo.iter().rev() {
            let g = match grads.remove(&t.inner.id) {
                Some(g) => g,
                None => continue,
            };
            match &t.inner.node {
                Some(node) => {
                    let parent_grads = (node.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        if !p.inner.grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        let slot = grads
                            .entry(p.inner.id)
                            .or_insert_with(|| vec![0.0; p.numel()]);
                        for (s, v) in slot.iter_mut().zip(pg.iter()) {
                            *s += v;
                        }
                    }
                }
                None => {
                    // Gradient-tracked leaf.
                    leaf_shapes.insert(t.inner.id, t.inner.shape.clone());
                    let slot = leaf_grads
                        .entry(t.inner.id)
                        .or_insert_with(|| vec![0.0; t.numel()]);
                    for (s, v) in slot.iter_mut().zip(g.iter()) {
                        *s += v;
                    }
                }
            }
        }

        Ok(Gradients {
            map: leaf_grads,
            shapes: leaf_shapes,
        })
    }
}

/// Gradients per tracked leaf, keyed by tensor id.
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
    shapes: HashMap<u64, Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        self.map.get(&t.inner.id).map(|g| {
            Tensor::leaf(
                g.clone(),
                self.shapes
                    .get(&t.inner.id)
                    .cloned()
                    .unwrap_or_else(|| t.inner.shape.clone()),
                false,
            )
        })
    }

    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        self.get(t).ok_or_else(|| {
            Error::invalid("Gradients::wrt", "no gradient recorded for tensor")
        })
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.map.contains_key(&t.inner.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

// ── Shape helpers ───────────────────────────────────────────────────────────

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Numpy-style broadcast: align right, dims must match or be 1.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// For each linear index of `out_shape`, the linear offset into an operand of
/// shape `shape` (broadcast along size-1 / missing dims). Returns `None` when
/// shapes are equal (identity mapping fast path).
pub(crate) fn bcast_offsets(out_shape: &[usize], shape: &[usize]) -> Option<Vec<usize>> {
    if out_shape == shape {
        return None;
    }
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let strides = row_major_strides(shape);
    // Effective stride per out dim: 0 where broadcasting.
    let mut eff = vec![0usize; rank];
    for i in 0..rank {
        if i >= pad && shape[i - pad] != 1 {
            eff[i] = strides[i - pad];
        }
    }
    let numel: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        // Increment coordinates, rightmost fastest.
        for d in (0..rank).rev() {
            coords[d] += 1;
            off += eff[d];
            if coords[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    Some(offsets)
}
