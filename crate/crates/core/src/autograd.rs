//! Reverse-mode autodiff over a per-step tape.
//!
//! A `Graph` records every op of one forward pass; `backward` walks the
//! tape once and accumulates gradients into every node, including leaves.
//! Training code builds a fresh graph per optimization step. Frozen
//! sub-networks run on throwaway graphs whose gradients are simply never
//! read.

use std::cell::RefCell;

use crate::ops;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Value(usize);

type BackFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensor held by a node (cheap Arc clone).
    pub fn value(&self, v: Value) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn leaf(&self, t: Tensor) -> Value {
        self.push(t, Vec::new(), None)
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackFn>) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, backward });
        Value(nodes.len() - 1)
    }

    fn unary(&self, a: Value, f: impl FnOnce(&Tensor) -> Tensor, back: BackFn) -> Value {
        let v = f(&self.nodes.borrow()[a.0].value);
        self.push(v, vec![a.0], Some(back))
    }

    fn binary(
        &self,
        a: Value,
        b: Value,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
        back: BackFn,
    ) -> Value {
        let v = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(v, vec![a.0, b.0], Some(back))
    }

    pub fn add(&self, a: Value, b: Value) -> Value {
        self.binary(a, b, |x, y| x.add(y), Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, a: Value, b: Value) -> Value {
        self.binary(a, b, |x, y| x.sub(y), Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)]))
    }

    pub fn mul(&self, a: Value, b: Value) -> Value {
        self.binary(
            a,
            b,
            |x, y| x.mul(y),
            Box::new(|g, _, p| vec![g.mul(p[1]), g.mul(p[0])]),
        )
    }

    pub fn scale(&self, a: Value, k: f64) -> Value {
        self.unary(a, |x| x.scale(k), Box::new(move |g, _, _| vec![g.scale(k)]))
    }

    pub fn add_scalar(&self, a: Value, c: f64) -> Value {
        self.unary(a, |x| x.map(|v| v + c), Box::new(|g, _, _| vec![g.clone()]))
    }

    /// `c - a`, elementwise.
    pub fn sub_from_scalar(&self, c: f64, a: Value) -> Value {
        self.unary(a, |x| x.map(|v| c - v), Box::new(|g, _, _| vec![g.scale(-1.0)]))
    }

    pub fn ln(&self, a: Value) -> Value {
        self.unary(
            a,
            |x| x.map(f64::ln),
            Box::new(|g, _, p| vec![g.zip_map(p[0], |gi, xi| gi / xi)]),
        )
    }

    pub fn exp(&self, a: Value) -> Value {
        self.unary(
            a,
            |x| x.map(f64::exp),
            Box::new(|g, y, _| vec![g.mul(y)]),
        )
    }

    pub fn sigmoid(&self, a: Value) -> Value {
        self.unary(
            a,
            |x| x.map(|v| 1.0 / (1.0 + (-v).exp())),
            Box::new(|g, y, _| vec![g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))]),
        )
    }

    pub fn silu(&self, a: Value) -> Value {
        self.unary(
            a,
            |x| x.map(|v| v / (1.0 + (-v).exp())),
            Box::new(|g, _, p| {
                vec![g.zip_map(p[0], |gi, xi| {
                    let s = 1.0 / (1.0 + (-xi).exp());
                    gi * s * (1.0 + xi * (1.0 - s))
                })]
            }),
        )
    }

    /// Clamp with zero gradient outside `(lo, hi)`.
    pub fn clamp(&self, a: Value, lo: f64, hi: f64) -> Value {
        self.unary(
            a,
            |x| x.map(|v| v.clamp(lo, hi)),
            Box::new(move |g, _, p| {
                vec![g.zip_map(p[0], |gi, xi| if xi > lo && xi < hi { gi } else { 0.0 })]
            }),
        )
    }

    /// Mean over all elements, producing a scalar node.
    pub fn mean_all(&self, a: Value) -> Value {
        self.unary(
            a,
            |x| Tensor::scalar(x.mean()),
            Box::new(|g, _, p| {
                let n = p[0].numel() as f64;
                vec![Tensor::full(p[0].shape().to_vec(), g.item() / n)]
            }),
        )
    }

    /// Mean squared error between two same-shape nodes (scalar node).
    pub fn mse(&self, a: Value, b: Value) -> Value {
        self.binary(
            a,
            b,
            |x, y| Tensor::scalar(x.mse(y)),
            Box::new(|g, _, p| {
                let n = p[0].numel() as f64;
                let k = 2.0 * g.item() / n;
                let da = p[0].zip_map(p[1], |x, y| k * (x - y));
                let db = da.scale(-1.0);
                vec![da, db]
            }),
        )
    }

    pub fn conv2d(&self, x: Value, w: Value, b: Value, stride: usize, pad: usize) -> Value {
        let v = {
            let nodes = self.nodes.borrow();
            ops::conv2d(&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value, stride, pad)
        };
        self.push(
            v,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, _, p| {
                let (dx, dw, db) = ops::conv2d_backward(p[0], p[1], g, stride, pad);
                vec![dx, dw, db]
            })),
        )
    }

    pub fn linear(&self, x: Value, w: Value, b: Value) -> Value {
        let v = {
            let nodes = self.nodes.borrow();
            ops::linear(&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value)
        };
        self.push(
            v,
            vec![x.0, w.0, b.0],
            Some(Box::new(|g, _, p| {
                let (dx, dw, db) = ops::linear_backward(p[0], p[1], g);
                vec![dx, dw, db]
            })),
        )
    }

    pub fn group_norm(&self, x: Value, groups: usize, eps: f64) -> Value {
        let (v, inv_stds) = ops::group_norm(&self.nodes.borrow()[x.0].value, groups, eps);
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |g, y, _| {
                vec![ops::group_norm_backward(y, &inv_stds, groups, g)]
            })),
        )
    }

    pub fn instance_norm_floored(&self, x: Value, floor: f64) -> Value {
        let (v, sigmas) = ops::instance_norm_floored(&self.nodes.borrow()[x.0].value, floor);
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |g, y, _| {
                vec![ops::instance_norm_floored_backward(y, &sigmas, g)]
            })),
        )
    }

    /// Multiply a `[C,H,W]` node by a per-channel `[C]` node (broadcast).
    pub fn mul_channel(&self, x: Value, s: Value) -> Value {
        self.binary(
            x,
            s,
            |xs, ss| {
                let (c, h, w) = xs.chw();
                assert_eq!(ss.numel(), c, "per-channel scale length");
                let mut out = xs.data().to_vec();
                for ch in 0..c {
                    let k = ss.data()[ch];
                    for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                        *v *= k;
                    }
                }
                Tensor::from_vec(vec![c, h, w], out)
            },
            Box::new(|g, _, p| {
                let (c, h, w) = p[0].chw();
                let mut dx = g.data().to_vec();
                let mut ds = vec![0.0; c];
                for ch in 0..c {
                    let k = p[1].data()[ch];
                    let gs = &g.data()[ch * h * w..(ch + 1) * h * w];
                    let xs = &p[0].data()[ch * h * w..(ch + 1) * h * w];
                    ds[ch] = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    for v in &mut dx[ch * h * w..(ch + 1) * h * w] {
                        *v *= k;
                    }
                }
                vec![Tensor::from_vec(vec![c, h, w], dx), Tensor::from_vec(vec![c], ds)]
            }),
        )
    }

    /// Add a per-channel `[C]` node to a `[C,H,W]` node (broadcast).
    pub fn add_channel(&self, x: Value, b: Value) -> Value {
        self.binary(
            x,
            b,
            |xs, bs| {
                let (c, h, w) = xs.chw();
                assert_eq!(bs.numel(), c, "per-channel bias length");
                let mut out = xs.data().to_vec();
                for ch in 0..c {
                    let k = bs.data()[ch];
                    for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                        *v += k;
                    }
                }
                Tensor::from_vec(vec![c, h, w], out)
            },
            Box::new(|g, _, p| {
                let (c, h, w) = p[0].chw();
                let db: Vec<f64> = (0..c)
                    .map(|ch| g.data()[ch * h * w..(ch + 1) * h * w].iter().sum())
                    .collect();
                vec![g.clone(), Tensor::from_vec(vec![c], db)]
            }),
        )
    }

    pub fn concat_channels(&self, a: Value, b: Value) -> Value {
        self.binary(
            a,
            b,
            |x, y| x.concat_channels(y),
            Box::new(|g, _, p| {
                let ca = p[0].channels();
                let cb = p[1].channels();
                vec![g.slice_channels(0, ca), g.slice_channels(ca, ca + cb)]
            }),
        )
    }

    pub fn slice_channels(&self, x: Value, from: usize, to: usize) -> Value {
        self.unary(
            x,
            |xs| xs.slice_channels(from, to),
            Box::new(move |g, _, p| {
                let (c, h, w) = p[0].chw();
                let mut dx = vec![0.0; c * h * w];
                dx[from * h * w..to * h * w].copy_from_slice(g.data());
                vec![Tensor::from_vec(vec![c, h, w], dx)]
            }),
        )
    }

    pub fn upsample_nearest_2x(&self, x: Value) -> Value {
        self.unary(
            x,
            ops::upsample_nearest_2x,
            Box::new(|g, _, _| vec![ops::upsample_nearest_2x_backward(g)]),
        )
    }

    /// Reverse pass from a scalar loss node. Gradients are accumulated for
    /// every node reachable backwards from `loss`.
    pub fn backward(&self, loss: Value) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let pvals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let pgrads = back(&g, &node.value, &pvals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p] {
                        Some(acc) => {
                            let acc_mut = acc.data_mut();
                            for (a, b) in acc_mut.iter_mut().zip(pg.data()) {
                                *a += *b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}
