//! Raw array kernels shared by the tape's forward and backward passes.
//! All single-threaded and deterministic; per-element accumulation order
//! is fixed (ascending over the contraction index).

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn fmt_shape(shape: &[usize]) -> String {
    format!(
        "[{}]",
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    )
}

// ── 2-D matmul kernels (accumulate into `out`) ─────────────────────────

/// out[m,n] += a[m,k] @ b[k,n]
///
/// Four output rows share each streamed row of `b` (register blocking);
/// per-element accumulation order over `k` is the same as the plain loop.
pub fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, rest) = rest.split_at_mut(n);
        let o3 = &mut rest[..n];
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for p in 0..k {
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            let brow = &b[p * n..(p + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                o0[j] += x0 * bv;
                o1[j] += x1 * bv;
                o2[j] += x2 * bv;
                o3[j] += x3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
        i += 1;
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T  (rows of `a` dotted with rows of `b`)
pub fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    // the dot-product form vectorizes poorly; above a small threshold it
    // pays to transpose b once and run the broadcast-FMA kernel (the
    // per-element accumulation order over k is unchanged)
    if m * k * n >= 1 << 14 {
        let mut bt = vec![0.0; k * n];
        for (j, brow) in b.chunks(k).enumerate() {
            for (p, &v) in brow.iter().enumerate() {
                bt[p * n + j] = v;
            }
        }
        mm_nn(a, &bt, out, m, k, n);
        return;
    }
    for (i, orow) in out.chunks_mut(n).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// out[m,n] += a[k,m]^T @ b[k,n]
pub fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += api * bv;
            }
        }
    }
}

// ── Broadcasting ───────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes; `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() {
            1
        } else {
            a[i - (nd - a.len())]
        };
        let db = if i < nd - b.len() {
            1
        } else {
            b[i - (nd - b.len())]
        };
        if da == db || db == 1 {
            out[i] = da.max(db);
        } else if da == 1 {
            out[i] = db;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Element strides of `shape` when iterated through `out_shape`
/// (right-aligned; broadcast dimensions get stride 0).
fn strides_for(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let pad = nd - shape.len();
    let mut contiguous = vec![0usize; nd];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        contiguous[pad + i] = acc;
        acc *= shape[i];
    }
    (0..nd)
        .map(|i| {
            let d = if i < pad { 1 } else { shape[i - pad] };
            if d == 1 && out_shape[i] != 1 {
                0
            } else {
                contiguous[i]
            }
        })
        .collect()
}

/// Walks every element of `out_shape`, yielding (out_index, a_offset, b_offset).
pub struct BroadcastPlan {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastPlan {
    pub fn new(a_shape: &[usize], b_shape: &[usize]) -> Option<Self> {
        let out_shape = broadcast_shape(a_shape, b_shape)?;
        let a_strides = strides_for(a_shape, &out_shape);
        let b_strides = strides_for(b_shape, &out_shape);
        Some(BroadcastPlan {
            out_shape,
            a_strides,
            b_strides,
        })
    }

    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.out_shape.len();
        let total = numel(&self.out_shape);
        if nd == 0 {
            f(0, 0, 0);
            return;
        }
        let mut coord = vec![0usize; nd];
        let mut a_off = 0usize;
        let mut b_off = 0usize;
        for out_idx in 0..total {
            f(out_idx, a_off, b_off);
            // odometer increment
            for axis in (0..nd).rev() {
                coord[axis] += 1;
                a_off += self.a_strides[axis];
                b_off += self.b_strides[axis];
                if coord[axis] < self.out_shape[axis] {
                    break;
                }
                a_off -= self.a_strides[axis] * self.out_shape[axis];
                b_off -= self.b_strides[axis] * self.out_shape[axis];
                coord[axis] = 0;
            }
        }
    }
}

/// How an operand relates to the contiguous block suffix of a
/// [`BlockPlan`]: either it carries a full block per step or a single
/// broadcast element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockMode {
    Full,
    Scalar,
}

/// Broadcast walker that moves in contiguous blocks instead of single
/// elements: the block is the longest trailing axis run on which each
/// operand is either entirely full-extent or entirely size-1.
pub struct BlockPlan {
    pub block: usize,
    pub a_mode: BlockMode,
    pub b_mode: BlockMode,
    outer_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BlockPlan {
    pub fn new(a_shape: &[usize], b_shape: &[usize]) -> Option<Self> {
        let out_shape = broadcast_shape(a_shape, b_shape)?;
        let nd = out_shape.len();
        let dim = |shape: &[usize], i: usize| {
            let pad = nd - shape.len();
            if i < pad {
                1
            } else {
                shape[i - pad]
            }
        };
        // extend the suffix while each operand stays in one category
        let mut block = 1usize;
        let mut a_mode: Option<BlockMode> = None;
        let mut b_mode: Option<BlockMode> = None;
        let mut split = nd;
        for i in (0..nd).rev() {
            if out_shape[i] == 1 {
                // degenerate axis fits either category
                split = i;
                continue;
            }
            let cat = |d: usize, mode: &Option<BlockMode>| match (d == out_shape[i], mode) {
                (true, None | Some(BlockMode::Full)) => Some(BlockMode::Full),
                (false, None | Some(BlockMode::Scalar)) => Some(BlockMode::Scalar),
                _ => None,
            };
            match (cat(dim(a_shape, i), &a_mode), cat(dim(b_shape, i), &b_mode)) {
                (Some(am), Some(bm)) => {
                    a_mode = Some(am);
                    b_mode = Some(bm);
                    block *= out_shape[i];
                    split = i;
                }
                _ => break,
            }
        }
        let outer_shape: Vec<usize> = out_shape[..split].to_vec();
        let stride_of = |shape: &[usize], mode: BlockMode| {
            // element strides over the outer axes, 0 where broadcast
            let mut contiguous = vec![0usize; split];
            let mut acc = match mode {
                BlockMode::Full => block,
                BlockMode::Scalar => 1,
            };
            for i in (0..split).rev() {
                let d = dim(shape, i);
                contiguous[i] = if d == 1 && out_shape[i] != 1 { 0 } else { acc };
                acc *= d.max(1);
            }
            contiguous
        };
        let (am, bm) = (
            a_mode.unwrap_or(BlockMode::Full),
            b_mode.unwrap_or(BlockMode::Full),
        );
        Some(BlockPlan {
            block,
            a_mode: am,
            b_mode: bm,
            a_strides: stride_of(a_shape, am),
            b_strides: stride_of(b_shape, bm),
            outer_shape,
        })
    }

    /// Yields (out_offset, a_offset, b_offset) once per block; the out
    /// offset advances by `block` each call.
    pub fn for_each_block(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.outer_shape.len();
        let blocks: usize = self.outer_shape.iter().product();
        if nd == 0 {
            f(0, 0, 0);
            return;
        }
        let mut coord = vec![0usize; nd];
        let (mut a_off, mut b_off) = (0usize, 0usize);
        for bi in 0..blocks {
            f(bi * self.block, a_off, b_off);
            for axis in (0..nd).rev() {
                coord[axis] += 1;
                a_off += self.a_strides[axis];
                b_off += self.b_strides[axis];
                if coord[axis] < self.outer_shape[axis] {
                    break;
                }
                a_off -= self.a_strides[axis] * self.outer_shape[axis];
                b_off -= self.b_strides[axis] * self.outer_shape[axis];
                coord[axis] = 0;
            }
        }
    }
}

// ── Row-wise numerics ──────────────────────────────────────────────────

/// In-place stable softmax of a contiguous row.
pub fn softmax_row(row: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Stable log-sum-exp of a contiguous row.
pub fn logsumexp_row(row: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = 0.0;
    for &v in row.iter() {
        sum += (v - m).exp();
    }
    m + sum.ln()
}
