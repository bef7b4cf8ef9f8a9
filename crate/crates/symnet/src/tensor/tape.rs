//! Operation tape. Forward methods record one node per executed primitive
//! (inputs always precede outputs, so the record is topologically ordered);
//! `backward` walks the record in exact reverse order, accumulating
//! gradients from every path by addition.

use std::cell::RefCell;
use std::sync::Arc;

use rand::RngCore;

use super::kernels::{
    broadcast_shape, fmt_shape, mm_nn, mm_nt, mm_tn, numel, softmax_row, BlockMode, BlockPlan,
    BroadcastPlan,
};
use super::{Precision, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef {
    pub(crate) id: usize,
}

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Op,
    requires: bool,
}

enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Relu {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Gather {
        table: usize,
        ids: Arc<Vec<usize>>,
    },
    Dropout {
        a: usize,
        mask: Arc<Vec<f64>>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SplitPart {
        a: usize,
        axis: usize,
        offset: usize,
        len: usize,
    },
    Reshape {
        a: usize,
    },
    Transpose {
        a: usize,
        perm: Vec<usize>,
    },
    ReduceSum {
        a: usize,
        axis: Option<usize>,
        scale: f64,
    },
    Log {
        a: usize,
    },
    Exp {
        a: usize,
    },
    LabelSmoothedCe {
        logits: usize,
        targets: Arc<Vec<usize>>,
        probs: Arc<Vec<f64>>,
        eps_ls: f64,
        pad_id: usize,
        nonpad: usize,
    },
}

/// Splits `shape` at `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(
        axis < shape.len(),
        "axis {} out of range for shape {}",
        axis,
        fmt_shape(shape)
    );
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub struct Tape {
    prec: Precision,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Tape {
    pub fn new(prec: Precision) -> Self {
        Tape {
            prec,
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn precision(&self) -> Precision {
        self.prec
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    // ── Recording ──────────────────────────────────────────────────────

    fn push(&self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, requires: bool) -> TensorRef {
        self.prec.quantize_slice(&mut data);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data: Arc::new(data),
            op,
            requires,
        });
        TensorRef {
            id: nodes.len() - 1,
        }
    }

    /// Feeds an existing value onto the tape.
    pub fn leaf(&self, value: &Tensor, requires_grad: bool) -> TensorRef {
        let mut data = value.data().to_vec();
        self.prec.quantize_slice(&mut data);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: value.shape().to_vec(),
            data: Arc::new(data),
            op: Op::Leaf,
            requires: requires_grad,
        });
        TensorRef {
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: &Tensor) -> TensorRef {
        self.leaf(value, false)
    }

    pub fn scalar_const(&self, value: f64) -> TensorRef {
        self.constant(&Tensor::scalar(value))
    }

    // ── Accessors ─────────────────────────────────────────────────────

    pub fn shape(&self, r: TensorRef) -> Vec<usize> {
        self.nodes.borrow()[r.id].shape.clone()
    }

    pub fn value(&self, r: TensorRef) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::from_arc(nodes[r.id].shape.clone(), Arc::clone(&nodes[r.id].data))
    }

    pub fn scalar(&self, r: TensorRef) -> f64 {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[r.id].data.len(),
            1,
            "scalar() on tensor of shape {}",
            fmt_shape(&nodes[r.id].shape)
        );
        nodes[r.id].data[0]
    }

    fn requires(&self, r: TensorRef) -> bool {
        self.nodes.borrow()[r.id].requires
    }

    // ── Primitives ─────────────────────────────────────────────────────

    /// Batched matrix product `[.., p, q] @ [.., q, r] -> [.., p, r]`;
    /// leading dimensions broadcast from size 1.
    pub fn matmul(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (asp, bsp) = (self.shape(a), self.shape(b));
        assert!(
            asp.len() >= 2 && bsp.len() >= 2,
            "matmul: operands must be at least 2-d, got {} and {}",
            fmt_shape(&asp),
            fmt_shape(&bsp)
        );
        let (p, q) = (asp[asp.len() - 2], asp[asp.len() - 1]);
        let (q2, r) = (bsp[bsp.len() - 2], bsp[bsp.len() - 1]);
        assert_eq!(
            q,
            q2,
            "matmul: inner dimensions disagree between {} and {}",
            fmt_shape(&asp),
            fmt_shape(&bsp)
        );
        let abatch = &asp[..asp.len() - 2];
        let bbatch = &bsp[..bsp.len() - 2];
        let plan = BroadcastPlan::new(abatch, bbatch).unwrap_or_else(|| {
            panic!(
                "matmul: batch dimensions incompatible between {} and {}",
                fmt_shape(&asp),
                fmt_shape(&bsp)
            )
        });
        let mut out_shape = plan.out_shape.clone();
        out_shape.extend_from_slice(&[p, r]);
        let mut out = vec![0.0; numel(&out_shape)];
        {
            let nodes = self.nodes.borrow();
            let ad = &nodes[a.id].data;
            let bd = &nodes[b.id].data;
            if bbatch.is_empty() {
                // 2-d rhs: the whole lhs batch collapses into one matmul
                let rows = ad.len() / q;
                mm_nn(ad, bd, &mut out, rows, q, r);
            } else {
                plan.for_each(|oi, aoff, boff| {
                    mm_nn(
                        &ad[aoff * p * q..(aoff + 1) * p * q],
                        &bd[boff * q * r..(boff + 1) * q * r],
                        &mut out[oi * p * r..(oi + 1) * p * r],
                        p,
                        q,
                        r,
                    );
                });
            }
        }
        let req = self.requires(a) || self.requires(b);
        self.push(out_shape, out, Op::Matmul { a: a.id, b: b.id }, req)
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.binary_broadcast(a, b, |x, y| x + y, true)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.binary_broadcast(a, b, |x, y| x * y, false)
    }

    fn binary_broadcast(
        &self,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f64, f64) -> f64,
        is_add: bool,
    ) -> TensorRef {
        let (asp, bsp) = (self.shape(a), self.shape(b));
        let out = {
            let nodes = self.nodes.borrow();
            let ad = &nodes[a.id].data;
            let bd = &nodes[b.id].data;
            if asp == bsp {
                ad.iter()
                    .zip(bd.iter())
                    .map(|(&x, &y)| f(x, y))
                    .collect::<Vec<_>>()
            } else {
                let plan = BlockPlan::new(&asp, &bsp).unwrap_or_else(|| {
                    panic!(
                        "{}: shapes {} and {} do not broadcast",
                        if is_add { "add" } else { "mul" },
                        fmt_shape(&asp),
                        fmt_shape(&bsp)
                    )
                });
                let out_shape = broadcast_shape(&asp, &bsp).unwrap();
                let mut out = vec![0.0; numel(&out_shape)];
                let s = plan.block;
                plan.for_each_block(|oi, ai, bi| match (plan.a_mode, plan.b_mode) {
                    (BlockMode::Full, BlockMode::Full) => {
                        for ((o, &x), &y) in out[oi..oi + s]
                            .iter_mut()
                            .zip(ad[ai..ai + s].iter())
                            .zip(bd[bi..bi + s].iter())
                        {
                            *o = f(x, y);
                        }
                    }
                    (BlockMode::Full, BlockMode::Scalar) => {
                        let y = bd[bi];
                        for (o, &x) in out[oi..oi + s].iter_mut().zip(ad[ai..ai + s].iter()) {
                            *o = f(x, y);
                        }
                    }
                    (BlockMode::Scalar, BlockMode::Full) => {
                        let x = ad[ai];
                        for (o, &y) in out[oi..oi + s].iter_mut().zip(bd[bi..bi + s].iter()) {
                            *o = f(x, y);
                        }
                    }
                    (BlockMode::Scalar, BlockMode::Scalar) => {
                        for o in out[oi..oi + s].iter_mut() {
                            *o = f(ad[ai], bd[bi]);
                        }
                    }
                });
                out
            }
        };
        let out_shape = broadcast_shape(&asp, &bsp).unwrap();
        let req = self.requires(a) || self.requires(b);
        let op = if is_add {
            Op::Add { a: a.id, b: b.id }
        } else {
            Op::Mul { a: a.id, b: b.id }
        };
        self.push(out_shape, out, op, req)
    }

    pub fn scale(&self, a: TensorRef, c: f64) -> TensorRef {
        let shape = self.shape(a);
        let out: Vec<f64> = {
            self.nodes.borrow()[a.id]
                .data
                .iter()
                .map(|&x| x * c)
                .collect()
        };
        let req = self.requires(a);
        self.push(shape, out, Op::Scale { a: a.id, c }, req)
    }

    /// `a - b`, composed from the primitive set.
    pub fn sub(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn relu(&self, a: TensorRef) -> TensorRef {
        let shape = self.shape(a);
        let out: Vec<f64> = {
            self.nodes.borrow()[a.id]
                .data
                .iter()
                .map(|&x| x.max(0.0))
                .collect()
        };
        let req = self.requires(a);
        self.push(shape, out, Op::Relu { a: a.id }, req)
    }

    /// Stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, a: TensorRef, axis: usize) -> TensorRef {
        let shape = self.shape(a);
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.nodes.borrow()[a.id].data.to_vec();
        let mut row = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = out[base + j * inner];
                }
                softmax_row(&mut row);
                for (j, &v) in row.iter().enumerate() {
                    out[base + j * inner] = v;
                }
            }
        }
        let req = self.requires(a);
        self.push(shape, out, Op::Softmax { a: a.id, axis }, req)
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias` over the last
    /// dimension, population variance.
    pub fn layer_norm(
        &self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    ) -> TensorRef {
        let shape = self.shape(x);
        let d = *shape
            .last()
            .unwrap_or_else(|| panic!("layer_norm: input must have at least one dimension"));
        let gsp = self.shape(gain);
        let bsp = self.shape(bias);
        assert!(
            gsp == [d] && bsp == [d],
            "layer_norm: gain {} / bias {} must match last dim of input {}",
            fmt_shape(&gsp),
            fmt_shape(&bsp),
            fmt_shape(&shape)
        );
        assert!(
            eps >= 0.0,
            "layer_norm: eps must be non-negative, got {eps}"
        );
        let out = {
            let nodes = self.nodes.borrow();
            let xd = &nodes[x.id].data;
            let gd = &nodes[gain.id].data;
            let bd = &nodes[bias.id].data;
            let mut out = vec![0.0; xd.len()];
            for (orow, xrow) in out.chunks_mut(d).zip(xd.chunks(d)) {
                let mean = xrow.iter().sum::<f64>() / d as f64;
                let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    orow[j] = (xrow[j] - mean) * inv * gd[j] + bd[j];
                }
            }
            out
        };
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            req,
        )
    }

    /// Row lookup: `table[V, d]` gathered by `ids` -> `ids_shape ++ [d]`.
    pub fn gather(&self, table: TensorRef, ids: &[usize], ids_shape: &[usize]) -> TensorRef {
        assert_eq!(
            numel(ids_shape),
            ids.len(),
            "gather: ids_shape does not cover ids"
        );
        let tsp = self.shape(table);
        assert_eq!(
            tsp.len(),
            2,
            "gather: table must be 2-d, got {}",
            fmt_shape(&tsp)
        );
        let (v, d) = (tsp[0], tsp[1]);
        let out = {
            let nodes = self.nodes.borrow();
            let td = &nodes[table.id].data;
            let mut out = vec![0.0; ids.len() * d];
            for (row, &id) in out.chunks_mut(d).zip(ids.iter()) {
                assert!(
                    id < v,
                    "gather: token id {id} out of range for table rows {v}"
                );
                row.copy_from_slice(&td[id * d..(id + 1) * d]);
            }
            out
        };
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(d);
        let req = self.requires(table);
        self.push(
            out_shape,
            out,
            Op::Gather {
                table: table.id,
                ids: Arc::new(ids.to_vec()),
            },
            req,
        )
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// scales survivors by `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout(&self, a: TensorRef, p: f64, rng: &mut dyn RngCore) -> TensorRef {
        assert!(
            (0.0..1.0).contains(&p),
            "dropout: p must be in [0, 1), got {p}"
        );
        if p == 0.0 {
            return a;
        }
        let shape = self.shape(a);
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let n = numel(&shape);
        let mut mask = vec![0.0; n];
        for m in mask.iter_mut() {
            // u64 draw keeps the stream identical across precisions
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            *m = if u < keep { scale } else { 0.0 };
        }
        let mask = Arc::new(mask);
        let out: Vec<f64> = {
            self.nodes.borrow()[a.id]
                .data
                .iter()
                .zip(mask.iter())
                .map(|(&x, &m)| x * m)
                .collect()
        };
        let req = self.requires(a);
        self.push(shape, out, Op::Dropout { a: a.id, mask }, req)
    }

    pub fn concat(&self, parts: &[TensorRef], axis: usize) -> TensorRef {
        assert!(!parts.is_empty(), "concat: need at least one part");
        let first = self.shape(parts[0]);
        let (_, _, inner) = axis_split(&first, axis);
        let mut total_axis = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            assert_eq!(
                sp.len(),
                first.len(),
                "concat: rank mismatch {} vs {}",
                fmt_shape(&sp),
                fmt_shape(&first)
            );
            for (ax, (&a, &b)) in sp.iter().zip(first.iter()).enumerate() {
                assert!(
                    ax == axis || a == b,
                    "concat: shapes {} and {} differ outside axis {}",
                    fmt_shape(&sp),
                    fmt_shape(&first),
                    axis
                );
            }
            total_axis += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        {
            let nodes = self.nodes.borrow();
            let out_stride = total_axis * inner;
            let mut axis_off = 0usize;
            for &p in parts {
                let sp = &nodes[p.id].shape;
                let pd = &nodes[p.id].data;
                let part_stride = sp[axis] * inner;
                for o in 0..outer {
                    let src = &pd[o * part_stride..(o + 1) * part_stride];
                    let dst_base = o * out_stride + axis_off * inner;
                    out[dst_base..dst_base + part_stride].copy_from_slice(src);
                }
                axis_off += sp[axis];
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            req,
        )
    }

    /// Splits `a` along `axis` into chunks of the given lengths.
    pub fn split(&self, a: TensorRef, axis: usize, sections: &[usize]) -> Vec<TensorRef> {
        let shape = self.shape(a);
        let (outer, len, inner) = axis_split(&shape, axis);
        assert_eq!(
            sections.iter().sum::<usize>(),
            len,
            "split: sections {:?} do not sum to axis length {} of {}",
            sections,
            len,
            fmt_shape(&shape)
        );
        let mut outs = Vec::with_capacity(sections.len());
        let mut offset = 0usize;
        for &sec in sections {
            let mut part_shape = shape.clone();
            part_shape[axis] = sec;
            let part = {
                let nodes = self.nodes.borrow();
                let ad = &nodes[a.id].data;
                let mut part = vec![0.0; outer * sec * inner];
                for o in 0..outer {
                    let src = o * len * inner + offset * inner;
                    let dst = o * sec * inner;
                    part[dst..dst + sec * inner].copy_from_slice(&ad[src..src + sec * inner]);
                }
                part
            };
            let req = self.requires(a);
            outs.push(self.push(
                part_shape,
                part,
                Op::SplitPart {
                    a: a.id,
                    axis,
                    offset,
                    len: sec,
                },
                req,
            ));
            offset += sec;
        }
        outs
    }

    pub fn reshape(&self, a: TensorRef, new_shape: &[usize]) -> TensorRef {
        let shape = self.shape(a);
        assert_eq!(
            numel(&shape),
            numel(new_shape),
            "reshape: cannot view {} as {}",
            fmt_shape(&shape),
            fmt_shape(new_shape)
        );
        let out = self.nodes.borrow()[a.id].data.to_vec();
        let req = self.requires(a);
        self.push(new_shape.to_vec(), out, Op::Reshape { a: a.id }, req)
    }

    /// Permutes axes: `out_shape[i] = shape[perm[i]]`.
    pub fn transpose(&self, a: TensorRef, perm: &[usize]) -> TensorRef {
        let shape = self.shape(a);
        let nd = shape.len();
        let mut seen = vec![false; nd];
        assert_eq!(
            perm.len(),
            nd,
            "transpose: perm {:?} does not match rank of {}",
            perm,
            fmt_shape(&shape)
        );
        for &p in perm {
            assert!(
                p < nd && !seen[p],
                "transpose: invalid permutation {:?}",
                perm
            );
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = {
            let nodes = self.nodes.borrow();
            let ad = &nodes[a.id].data;
            let mut out = vec![0.0; ad.len()];
            transpose_walk(&shape, perm, |oi, ii, block| {
                out[oi..oi + block].copy_from_slice(&ad[ii..ii + block])
            });
            out
        };
        let req = self.requires(a);
        self.push(
            out_shape,
            out,
            Op::Transpose {
                a: a.id,
                perm: perm.to_vec(),
            },
            req,
        )
    }

    /// Sum along `axis` (removing it), or over all elements when `axis` is
    /// `None` (producing a scalar).
    pub fn reduce_sum(&self, a: TensorRef, axis: Option<usize>) -> TensorRef {
        self.reduce(a, axis, 1.0)
    }

    pub fn reduce_mean(&self, a: TensorRef, axis: Option<usize>) -> TensorRef {
        let shape = self.shape(a);
        let n = match axis {
            Some(ax) => {
                let (_, len, _) = axis_split(&shape, ax);
                len
            }
            None => numel(&shape),
        };
        assert!(
            n > 0,
            "reduce_mean over empty extent of {}",
            fmt_shape(&shape)
        );
        self.reduce(a, axis, 1.0 / n as f64)
    }

    fn reduce(&self, a: TensorRef, axis: Option<usize>, scale: f64) -> TensorRef {
        let shape = self.shape(a);
        let (out_shape, out) = {
            let nodes = self.nodes.borrow();
            let ad = &nodes[a.id].data;
            match axis {
                None => (vec![], vec![ad.iter().sum::<f64>() * scale]),
                Some(ax) => {
                    let (outer, len, inner) = axis_split(&shape, ax);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            let base = o * len * inner + j * inner;
                            for i in 0..inner {
                                out[o * inner + i] += ad[base + i];
                            }
                        }
                    }
                    for v in out.iter_mut() {
                        *v *= scale;
                    }
                    let mut out_shape = shape.clone();
                    out_shape.remove(ax);
                    (out_shape, out)
                }
            }
        };
        let req = self.requires(a);
        self.push(
            out_shape,
            out,
            Op::ReduceSum {
                a: a.id,
                axis,
                scale,
            },
            req,
        )
    }

    pub fn log(&self, a: TensorRef) -> TensorRef {
        let shape = self.shape(a);
        let out: Vec<f64> = {
            self.nodes.borrow()[a.id]
                .data
                .iter()
                .map(|&x| x.ln())
                .collect()
        };
        let req = self.requires(a);
        self.push(shape, out, Op::Log { a: a.id }, req)
    }

    pub fn exp(&self, a: TensorRef) -> TensorRef {
        let shape = self.shape(a);
        let out: Vec<f64> = {
            self.nodes.borrow()[a.id]
                .data
                .iter()
                .map(|&x| x.exp())
                .collect()
        };
        let req = self.requires(a);
        self.push(shape, out, Op::Exp { a: a.id }, req)
    }

    /// Mean over non-pad positions of the label-smoothed cross-entropy:
    /// the true class gets mass `1 - eps_ls`, the remaining `eps_ls` is
    /// spread over the other `V - 1` classes. Positions whose target is
    /// `pad_id` contribute zero loss and zero gradient.
    pub fn label_smoothed_ce(
        &self,
        logits: TensorRef,
        targets: &[usize],
        eps_ls: f64,
        pad_id: usize,
    ) -> TensorRef {
        let shape = self.shape(logits);
        let v = *shape
            .last()
            .unwrap_or_else(|| panic!("label_smoothed_ce: logits must be at least 1-d"));
        let rows = numel(&shape) / v;
        assert_eq!(
            rows,
            targets.len(),
            "label_smoothed_ce: logits {} imply {} positions, got {} targets",
            fmt_shape(&shape),
            rows,
            targets.len()
        );
        assert!(
            (0.0..1.0).contains(&eps_ls),
            "label_smoothed_ce: eps_ls must be in [0, 1), got {eps_ls}"
        );
        if eps_ls > 0.0 {
            assert!(
                v >= 2,
                "label_smoothed_ce: smoothing needs vocab size >= 2, got {v}"
            );
        }
        let coef_other = if eps_ls == 0.0 {
            0.0
        } else {
            eps_ls / (v - 1) as f64
        };
        let coef_true = 1.0 - eps_ls;
        let (loss, probs, nonpad) = {
            let nodes = self.nodes.borrow();
            let ld = &nodes[logits.id].data;
            let mut probs = vec![0.0; ld.len()];
            let mut total = 0.0;
            let mut nonpad = 0usize;
            for (r, &t) in targets.iter().enumerate() {
                assert!(
                    t < v,
                    "label_smoothed_ce: target id {t} out of range for vocab size {v}"
                );
                if t == pad_id {
                    continue;
                }
                nonpad += 1;
                let row = &ld[r * v..(r + 1) * v];
                let lse = super::kernels::logsumexp_row(row);
                let mut logp_sum = 0.0;
                for (k, &x) in row.iter().enumerate() {
                    let logp = x - lse;
                    probs[r * v + k] = logp.exp();
                    logp_sum += logp;
                }
                let logp_true = row[t] - lse;
                total += -coef_true * logp_true - coef_other * (logp_sum - logp_true);
            }
            let loss = if nonpad == 0 {
                0.0
            } else {
                total / nonpad as f64
            };
            (loss, probs, nonpad)
        };
        let req = self.requires(logits);
        self.push(
            vec![],
            vec![loss],
            Op::LabelSmoothedCe {
                logits: logits.id,
                targets: Arc::new(targets.to_vec()),
                probs: Arc::new(probs),
                eps_ls,
                pad_id,
                nonpad,
            },
            req,
        )
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every
    /// recorded tensor that (transitively) requires grad are accumulated
    /// by addition over all paths and kept on the tape until the next
    /// `backward` call.
    pub fn backward(&self, loss: TensorRef) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].data.len(),
            1,
            "backward: loss must be scalar, got shape {}",
            fmt_shape(&nodes[loss.id].shape)
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(g) = grads[id].as_mut() {
                self.prec.quantize_slice(g);
            }
            if !nodes[id].requires {
                continue;
            }
            let (before, rest) = grads.split_at_mut(id);
            let gout = rest[0].as_ref().expect("grad present");
            self.propagate(&nodes, id, gout, before);
        }
        *self.grads.borrow_mut() = grads;
    }

    /// Gradient of `r` from the most recent `backward`, if one reached it.
    pub fn grad(&self, r: TensorRef) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(r.id)?.as_ref()?;
        Some(Tensor::new(self.shape(r), g.clone()))
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, nodes: &[Node], id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let asp = &nodes[*a].shape;
                let bsp = &nodes[*b].shape;
                let (p, q) = (asp[asp.len() - 2], asp[asp.len() - 1]);
                let r = bsp[bsp.len() - 1];
                let ad = &nodes[*a].data;
                let bd = &nodes[*b].data;
                let need_a = nodes[*a].requires;
                let need_b = nodes[*b].requires;
                let mut ga = if need_a {
                    Some(vec![0.0; ad.len()])
                } else {
                    None
                };
                let mut gb = if need_b {
                    Some(vec![0.0; bd.len()])
                } else {
                    None
                };
                if bsp.len() == 2 {
                    // 2-d rhs fast path mirroring the forward collapse
                    let rows = ad.len() / q;
                    if let Some(ga) = ga.as_mut() {
                        mm_nt(gout, bd, ga, rows, r, q);
                    }
                    if let Some(gb) = gb.as_mut() {
                        mm_tn(ad, gout, gb, q, rows, r);
                    }
                } else {
                    let plan =
                        BroadcastPlan::new(&asp[..asp.len() - 2], &bsp[..bsp.len() - 2]).unwrap();
                    plan.for_each(|oi, aoff, boff| {
                        let g = &gout[oi * p * r..(oi + 1) * p * r];
                        if let Some(ga) = ga.as_mut() {
                            mm_nt(
                                g,
                                &bd[boff * q * r..(boff + 1) * q * r],
                                &mut ga[aoff * p * q..(aoff + 1) * p * q],
                                p,
                                r,
                                q,
                            );
                        }
                        if let Some(gb) = gb.as_mut() {
                            mm_tn(
                                &ad[aoff * p * q..(aoff + 1) * p * q],
                                g,
                                &mut gb[boff * q * r..(boff + 1) * q * r],
                                q,
                                p,
                                r,
                            );
                        }
                    });
                }
                if let Some(ga) = ga {
                    acc_vec(&mut grads[*a], ga);
                }
                if let Some(gb) = gb {
                    acc_vec(&mut grads[*b], gb);
                }
            }
            Op::Add { a, b } => {
                for (src, other) in [(*a, *b), (*b, *a)] {
                    if !nodes[src].requires {
                        continue;
                    }
                    let ssp = &nodes[src].shape;
                    if ssp == &node.shape {
                        acc_slice(&mut grads[src], nodes[src].data.len(), gout);
                    } else {
                        let plan = BlockPlan::new(ssp, &nodes[other].shape).unwrap();
                        let g = grads[src].get_or_insert_with(|| vec![0.0; nodes[src].data.len()]);
                        let s = plan.block;
                        plan.for_each_block(|oi, si, _| match plan.a_mode {
                            BlockMode::Full => {
                                for (gs, &go) in
                                    g[si..si + s].iter_mut().zip(gout[oi..oi + s].iter())
                                {
                                    *gs += go;
                                }
                            }
                            BlockMode::Scalar => {
                                g[si] += gout[oi..oi + s].iter().sum::<f64>();
                            }
                        });
                    }
                }
            }
            Op::Mul { a, b } => {
                let same = nodes[*a].shape == nodes[*b].shape;
                for (src, other) in [(*a, *b), (*b, *a)] {
                    if !nodes[src].requires {
                        continue;
                    }
                    let od = &nodes[other].data;
                    if same {
                        let g = grads[src].get_or_insert_with(|| vec![0.0; nodes[src].data.len()]);
                        for ((gs, &go), &ov) in g.iter_mut().zip(gout.iter()).zip(od.iter()) {
                            *gs += go * ov;
                        }
                    } else {
                        let plan = BlockPlan::new(&nodes[src].shape, &nodes[other].shape).unwrap();
                        let g = grads[src].get_or_insert_with(|| vec![0.0; nodes[src].data.len()]);
                        let s = plan.block;
                        plan.for_each_block(|oi, si, vi| match (plan.a_mode, plan.b_mode) {
                            (BlockMode::Full, BlockMode::Full) => {
                                for ((gs, &go), &ov) in g[si..si + s]
                                    .iter_mut()
                                    .zip(gout[oi..oi + s].iter())
                                    .zip(od[vi..vi + s].iter())
                                {
                                    *gs += go * ov;
                                }
                            }
                            (BlockMode::Full, BlockMode::Scalar) => {
                                let ov = od[vi];
                                for (gs, &go) in
                                    g[si..si + s].iter_mut().zip(gout[oi..oi + s].iter())
                                {
                                    *gs += go * ov;
                                }
                            }
                            (BlockMode::Scalar, BlockMode::Full) => {
                                let mut acc = 0.0;
                                for (&go, &ov) in gout[oi..oi + s].iter().zip(od[vi..vi + s].iter())
                                {
                                    acc += go * ov;
                                }
                                g[si] += acc;
                            }
                            (BlockMode::Scalar, BlockMode::Scalar) => {
                                let ov = od[vi];
                                g[si] += gout[oi..oi + s].iter().sum::<f64>() * ov;
                            }
                        });
                    }
                }
            }
            Op::Scale { a, c } => {
                if nodes[*a].requires {
                    let g = grads[*a].get_or_insert_with(|| vec![0.0; nodes[*a].data.len()]);
                    for (gs, &go) in g.iter_mut().zip(gout.iter()) {
                        *gs += go * c;
                    }
                }
            }
            Op::Relu { a } => {
                if nodes[*a].requires {
                    let ad = &nodes[*a].data;
                    let g = grads[*a].get_or_insert_with(|| vec![0.0; ad.len()]);
                    for ((gs, &go), &x) in g.iter_mut().zip(gout.iter()).zip(ad.iter()) {
                        if x > 0.0 {
                            *gs += go;
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if nodes[*a].requires {
                    let s = &node.data;
                    let (outer, len, inner) = axis_split(&node.shape, *axis);
                    let g = grads[*a].get_or_insert_with(|| vec![0.0; s.len()]);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += gout[idx] * s[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                g[idx] += s[idx] * (gout[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *node.shape.last().unwrap();
                let xd = &nodes[*x].data;
                let gd = &nodes[*gain].data;
                let rows = xd.len() / d;
                let need_x = nodes[*x].requires;
                let need_g = nodes[*gain].requires;
                let need_b = nodes[*bias].requires;
                let mut gx = if need_x {
                    Some(vec![0.0; xd.len()])
                } else {
                    None
                };
                let mut gg = if need_g { Some(vec![0.0; d]) } else { None };
                let mut gb = if need_b { Some(vec![0.0; d]) } else { None };
                for r in 0..rows {
                    let xrow = &xd[r * d..(r + 1) * d];
                    let grow = &gout[r * d..(r + 1) * d];
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    if let Some(gg) = gg.as_mut() {
                        for j in 0..d {
                            gg[j] += grow[j] * (xrow[j] - mean) * inv;
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dy-hat and its moments against x-hat
                        let mut sum_dyh = 0.0;
                        let mut sum_dyh_xh = 0.0;
                        for j in 0..d {
                            let dyh = grow[j] * gd[j];
                            let xh = (xrow[j] - mean) * inv;
                            sum_dyh += dyh;
                            sum_dyh_xh += dyh * xh;
                        }
                        let m1 = sum_dyh / d as f64;
                        let m2 = sum_dyh_xh / d as f64;
                        for j in 0..d {
                            let dyh = grow[j] * gd[j];
                            let xh = (xrow[j] - mean) * inv;
                            gx[r * d + j] += inv * (dyh - m1 - xh * m2);
                        }
                    }
                }
                if let Some(gx) = gx {
                    acc_vec(&mut grads[*x], gx);
                }
                if let Some(gg) = gg {
                    acc_vec(&mut grads[*gain], gg);
                }
                if let Some(gb) = gb {
                    acc_vec(&mut grads[*bias], gb);
                }
            }
            Op::Gather { table, ids } => {
                if nodes[*table].requires {
                    let d = nodes[*table].shape[1];
                    let g =
                        grads[*table].get_or_insert_with(|| vec![0.0; nodes[*table].data.len()]);
                    for (row, &id) in gout.chunks(d).zip(ids.iter()) {
                        for (slot, &v) in g[id * d..(id + 1) * d].iter_mut().zip(row.iter()) {
                            *slot += v;
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if nodes[*a].requires {
                    let g = grads[*a].get_or_insert_with(|| vec![0.0; nodes[*a].data.len()]);
                    for ((gs, &go), &m) in g.iter_mut().zip(gout.iter()).zip(mask.iter()) {
                        *gs += go * m;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (_, total, inner) = axis_split(&node.shape, *axis);
                let outer: usize = node.shape[..*axis].iter().product();
                let out_stride = total * inner;
                let mut axis_off = 0usize;
                for &p in parts {
                    let plen = nodes[p].shape[*axis];
                    if nodes[p].requires {
                        let part_stride = plen * inner;
                        let g = grads[p].get_or_insert_with(|| vec![0.0; nodes[p].data.len()]);
                        for o in 0..outer {
                            let src = o * out_stride + axis_off * inner;
                            let dst = o * part_stride;
                            for i in 0..part_stride {
                                g[dst + i] += gout[src + i];
                            }
                        }
                    }
                    axis_off += plen;
                }
            }
            Op::SplitPart {
                a,
                axis,
                offset,
                len,
            } => {
                if nodes[*a].requires {
                    let ssp = &nodes[*a].shape;
                    let (outer, total, inner) = axis_split(ssp, *axis);
                    let g = grads[*a].get_or_insert_with(|| vec![0.0; nodes[*a].data.len()]);
                    for o in 0..outer {
                        let dst = o * total * inner + offset * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            g[dst + i] += gout[src + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if nodes[*a].requires {
                    acc_slice(&mut grads[*a], nodes[*a].data.len(), gout);
                }
            }
            Op::Transpose { a, perm } => {
                if nodes[*a].requires {
                    let g = grads[*a].get_or_insert_with(|| vec![0.0; nodes[*a].data.len()]);
                    transpose_walk(&nodes[*a].shape, perm, |oi, ii, block| {
                        for (gs, &go) in g[ii..ii + block]
                            .iter_mut()
                            .zip(gout[oi..oi + block].iter())
                        {
                            *gs += go;
                        }
                    });
                }
            }
            Op::ReduceSum { a, axis, scale } => {
                if nodes[*a].requires {
                    let ssp = &nodes[*a].shape;
                    let g = grads[*a].get_or_insert_with(|| vec![0.0; nodes[*a].data.len()]);
                    match axis {
                        None => {
                            let go = gout[0] * scale;
                            for gs in g.iter_mut() {
                                *gs += go;
                            }
                        }
                        Some(ax) => {
                            let (outer, len, inner) = axis_split(ssp, *ax);
                            for o in 0..outer {
                                for j in 0..len {
                                    let base = o * len * inner + j * inner;
                                    for i in 0..inner {
                                        g[base + i] += gout[o * inner + i] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Log { a } => {
                if nodes[*a].requires {
                    let ad = &nodes[*a].data;
                    let g = grads[*a].get_or_insert_with(|| vec![0.0; ad.len()]);
                    for ((gs, &go), &x) in g.iter_mut().zip(gout.iter()).zip(ad.iter()) {
                        *gs += go / x;
                    }
                }
            }
            Op::Exp { a } => {
                if nodes[*a].requires {
                    let od = &node.data;
                    let g = grads[*a].get_or_insert_with(|| vec![0.0; od.len()]);
                    for ((gs, &go), &y) in g.iter_mut().zip(gout.iter()).zip(od.iter()) {
                        *gs += go * y;
                    }
                }
            }
            Op::LabelSmoothedCe {
                logits,
                targets,
                probs,
                eps_ls,
                pad_id,
                nonpad,
            } => {
                if nodes[*logits].requires && *nonpad > 0 {
                    let v = *nodes[*logits].shape.last().unwrap();
                    let coef_other = if *eps_ls == 0.0 {
                        0.0
                    } else {
                        eps_ls / (v - 1) as f64
                    };
                    let coef_true = 1.0 - eps_ls;
                    let go = gout[0] / *nonpad as f64;
                    let g =
                        grads[*logits].get_or_insert_with(|| vec![0.0; nodes[*logits].data.len()]);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        for k in 0..v {
                            let q = if k == t { coef_true } else { coef_other };
                            g[r * v + k] += go * (probs[r * v + k] - q);
                        }
                    }
                }
            }
        }
    }
}

fn acc_vec(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        None => *slot = Some(contrib),
        Some(g) => {
            for (gs, c) in g.iter_mut().zip(contrib) {
                *gs += c;
            }
        }
    }
}

fn acc_slice(slot: &mut Option<Vec<f64>>, len: usize, contrib: &[f64]) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    for (gs, &c) in g.iter_mut().zip(contrib.iter()) {
        *gs += c;
    }
}

/// Walks a permutation in contiguous blocks: any identity tail of `perm`
/// stays a memcpy-able run. Yields (out_offset, in_offset, block_len).
fn transpose_walk(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut tail = nd;
    while tail > 0 && perm[tail - 1] == tail - 1 {
        tail -= 1;
    }
    let block: usize = out_shape[tail..].iter().product();
    let outer = &out_shape[..tail];
    let walk: Vec<usize> = perm[..tail].iter().map(|&p| in_strides[p]).collect();
    let blocks: usize = outer.iter().product();
    if tail == 0 {
        f(0, 0, block.max(1));
        return;
    }
    let mut coord = vec![0usize; tail];
    let mut in_off = 0usize;
    for bi in 0..blocks {
        f(bi * block, in_off, block);
        for axis in (0..tail).rev() {
            coord[axis] += 1;
            in_off += walk[axis];
            if coord[axis] < outer[axis] {
                break;
            }
            in_off -= walk[axis] * outer[axis];
            coord[axis] = 0;
        }
    }
}
