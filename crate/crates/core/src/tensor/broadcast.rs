//! Numpy-style broadcasting for binary elementwise ops.

use crate::error::{Error, Result};

/// Iteration plan over a broadcast output with collapsed dimensions.
#[derive(Debug, Clone)]
pub(crate) struct BroadcastPlan {
    pub out_shape: Vec<usize>,
    // (extent, stride in a, stride in b), outermost first
    dims: Vec<(usize, usize, usize)>,
}

fn strides_for(shape: &[usize], rank: usize, out: &[usize]) -> Vec<usize> {
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        if i < pad {
            continue;
        }
        let d = shape[i - pad];
        strides[i] = if d == 1 && out[i] != 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

impl BroadcastPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let mut out = vec![0; rank];
        for i in 0..rank {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            out[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::dim(format!(
                        "cannot broadcast {a:?} with {b:?}"
                    )))
                }
            };
        }
        let sa = strides_for(a, rank, &out);
        let sb = strides_for(b, rank, &out);
        let mut dims: Vec<(usize, usize, usize)> = Vec::new();
        for i in 0..rank {
            if out[i] == 1 {
                continue;
            }
            let cur = (out[i], sa[i], sb[i]);
            if let Some(last) = dims.last_mut() {
                // merge when the outer dim is a contiguous continuation of the inner one
                if last.1 == cur.1 * cur.0 && last.2 == cur.2 * cur.0 {
                    *last = (last.0 * cur.0, cur.1, cur.2);
                    continue;
                }
            }
            dims.push(cur);
        }
        Ok(BroadcastPlan {
            out_shape: out,
            dims,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.dims.len() <= 1 && self.dims.iter().all(|d| d.1 == 1 && d.2 == 1)
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn visit(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.dims.len();
        if nd == 0 {
            f(0, 0, 0);
            return;
        }
        let (inner, isa, isb) = self.dims[nd - 1];
        let mut counter = vec![0usize; nd - 1];
        let (mut o, mut ia, mut ib) = (0usize, 0usize, 0usize);
        loop {
            for k in 0..inner {
                f(o + k, ia + k * isa, ib + k * isb);
            }
            o += inner;
            let mut d = nd - 1;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                let (n, sa, sb) = self.dims[d];
                counter[d] += 1;
                ia += sa;
                ib += sb;
                if counter[d] < n {
                    break;
                }
                ia -= sa * n;
                ib -= sb * n;
                counter[d] = 0;
            }
        }
    }
}
