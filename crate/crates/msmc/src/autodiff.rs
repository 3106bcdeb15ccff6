//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records a computation as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar node walks the list in reverse and
//! accumulates gradients for every node, including leaves registered with
//! [`Tape::leaf`]. Everything is `f64` and single-threaded, so results are
//! bit-for-bit reproducible across runs.
//!
//! Sequences are stored time-major: an `L x C` array is `L` frames of `C`
//! features. Scalars (losses) are `1 x 1` arrays.

use ndarray::{s, Array2};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackFn = Box<dyn Fn(&Array2<f64>, &mut dyn FnMut(usize, Array2<f64>))>;

struct Node {
    value: Array2<f64>,
    back: Option<BackFn>,
}

/// Gradients of one scalar with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, if any path connected it to the differentiated root.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn accumulate(slot: &mut Option<Array2<f64>>, contrib: Array2<f64>) {
    match slot {
        Some(g) => *g += &contrib,
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Array2<f64>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        Var {
            id: nodes.len() - 1,
        }
    }

    /// Registers a leaf (input or parameter). Gradients accumulate here.
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, None)
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        
        nodes[v.id].value.dim()
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add: shape mismatch");
        self.push(
            &va + &vb,
            Some(Box::new(move |g, sink| {
                sink(a.id, g.clone());
                sink(b.id, g.clone());
            })),
        )
    }

    /// `a + bias` where `bias` is `1 x C`, broadcast over rows.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.nrows(), 1, "add_bias: bias must be a row vector");
        assert_eq!(va.ncols(), vb.ncols(), "add_bias: width mismatch");
        self.push(
            &va + &vb,
            Some(Box::new(move |g, sink| {
                sink(a.id, g.clone());
                let mut gb = Array2::zeros((1, g.ncols()));
                for row in g.rows() {
                    for (c, x) in row.iter().enumerate() {
                        gb[[0, c]] += *x;
                    }
                }
                sink(bias.id, gb);
            })),
        )
    }

    /// Adds a constant array (no gradient into the constant).
    pub fn add_const(&self, a: Var, c: &Array2<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.dim(), c.dim(), "add_const: shape mismatch");
        self.push(
            &va + c,
            Some(Box::new(move |g, sink| sink(a.id, g.clone()))),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        self.push(
            &va * k,
            Some(Box::new(move |g, sink| sink(a.id, g * k))),
        )
    }

    /// Matrix product `a (m x k) . b (k x n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dim mismatch");
        let value = va.dot(&vb);
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.id, g.dot(&vb.t()));
                sink(b.id, va.t().dot(g));
            })),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(
            va.t().to_owned(),
            Some(Box::new(move |g, sink| sink(a.id, g.t().to_owned()))),
        )
    }

    /// Column-wise concatenation of same-height nodes.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Array2<f64>> = parts.iter().map(|v| self.value(*v)).collect();
        let rows = values[0].nrows();
        assert!(
            values.iter().all(|v| v.nrows() == rows),
            "concat_cols: row mismatch"
        );
        let total: usize = values.iter().map(|v| v.ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut off = 0;
        for v in &values {
            out.slice_mut(s![.., off..off + v.ncols()]).assign(v);
            off += v.ncols();
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (id, w) in ids.iter().zip(&widths) {
                    sink(*id, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            })),
        )
    }

    /// Columns `[start, start+len)` of `a`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.ncols(), "slice_cols: out of range");
        let dims = va.dim();
        self.push(
            va.slice(s![.., start..start + len]).to_owned(),
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros(dims);
                ga.slice_mut(s![.., start..start + len]).assign(g);
                sink(a.id, ga);
            })),
        )
    }

    /// Smooth GELU activation (tanh approximation).
    pub fn gelu(&self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044_715;
        let x = self.value(a);
        let value = x.mapv(|v| {
            let u = C * (v + K * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut ga = x.clone();
                ga.zip_mut_with(g, |v, gv| {
                    let u = C * (*v + K * *v * *v * *v);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * K * *v * *v);
                    *v = gv * (0.5 * (1.0 + t) + 0.5 * *v * (1.0 - t * t) * du);
                });
                sink(a.id, ga);
            })),
        )
    }

    /// Row-wise layer norm with learnable `gain`/`bias` (both `1 x C`).
    pub fn layer_norm(&self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let x = self.value(a);
        let gamma = self.value(gain);
        let (rows, cols) = x.dim();
        assert_eq!(gamma.dim(), (1, cols), "layer_norm: gain shape");
        let mut xhat = Array2::zeros((rows, cols));
        let mut sigma = vec![0.0; rows];
        for r in 0..rows {
            let row = x.row(r);
            let mu = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let sd = (var + eps).sqrt();
            sigma[r] = sd;
            for c in 0..cols {
                xhat[[r, c]] = (x[[r, c]] - mu) / sd;
            }
        }
        let mut value = xhat.clone();
        for r in 0..rows {
            for c in 0..cols {
                value[[r, c]] *= gamma[[0, c]];
            }
        }
        let vb = self.value(bias);
        assert_eq!(vb.dim(), (1, cols), "layer_norm: bias shape");
        let value = value + &vb;
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((rows, cols));
                let mut ggain = Array2::zeros((1, cols));
                let mut gbias = Array2::zeros((1, cols));
                for r in 0..rows {
                    let mut dxhat = vec![0.0; cols];
                    for c in 0..cols {
                        let gv = g[[r, c]];
                        gbias[[0, c]] += gv;
                        ggain[[0, c]] += gv * xhat[[r, c]];
                        dxhat[c] = gv * gamma[[0, c]];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                    let m2 = dxhat
                        .iter()
                        .enumerate()
                        .map(|(c, d)| d * xhat[[r, c]])
                        .sum::<f64>()
                        / cols as f64;
                    for c in 0..cols {
                        ga[[r, c]] = (dxhat[c] - m1 - xhat[[r, c]] * m2) / sigma[r];
                    }
                }
                sink(a.id, ga);
                sink(gain.id, ggain);
                sink(bias.id, gbias);
            })),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let mut y = Array2::zeros((rows, cols));
        for r in 0..rows {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                let e = (x[[r, c]] - max).exp();
                y[[r, c]] = e;
                total += e;
            }
            for c in 0..cols {
                y[[r, c]] /= total;
            }
        }
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let dot: f64 = (0..cols).map(|c| g[[r, c]] * yc[[r, c]]).sum();
                    for c in 0..cols {
                        ga[[r, c]] = yc[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                sink(a.id, ga);
            })),
        )
    }

    /// Each row repeated `rate` consecutive times.
    pub fn upsample_repeat(&self, a: Var, rate: usize) -> Var {
        assert!(rate >= 1, "upsample_repeat: rate must be >= 1");
        let durations = vec![rate; self.shape(a).0];
        self.repeat_rows(a, &durations)
    }

    /// Row `i` repeated `durations[i]` times, concatenated in order.
    pub fn repeat_rows(&self, a: Var, durations: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), durations.len(), "repeat_rows: length mismatch");
        let total: usize = durations.iter().sum();
        assert!(total > 0, "repeat_rows: empty output");
        let cols = va.ncols();
        let mut out = Array2::zeros((total, cols));
        let mut t = 0;
        for (i, d) in durations.iter().enumerate() {
            for _ in 0..*d {
                out.row_mut(t).assign(&va.row(i));
                t += 1;
            }
        }
        let durs = durations.to_vec();
        let in_rows = va.nrows();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = Array2::zeros((in_rows, cols));
                let mut t = 0;
                for (i, d) in durs.iter().enumerate() {
                    for _ in 0..*d {
                        let grow = g.row(t);
                        let mut arow = ga.row_mut(i);
                        arow += &grow;
                        t += 1;
                    }
                }
                sink(a.id, ga);
            })),
        )
    }

    /// Right-pads to `target_len` rows by repeating the final row.
    pub fn pad_rows_last(&self, a: Var, target_len: usize) -> Var {
        let va = self.value(a);
        let rows = va.nrows();
        assert!(rows >= 1 && target_len >= rows, "pad_rows_last: bad target");
        if target_len == rows {
            // still record a pass-through node so callers can rely on a fresh id
            return self.scale(a, 1.0);
        }
        let cols = va.ncols();
        let mut out = Array2::zeros((target_len, cols));
        out.slice_mut(s![..rows, ..]).assign(&va);
        for t in rows..target_len {
            out.row_mut(t).assign(&va.row(rows - 1));
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = g.slice(s![..rows, ..]).to_owned();
                for t in rows..target_len {
                    let grow = g.row(t);
                    let mut last = ga.row_mut(rows - 1);
                    last += &grow;
                }
                sink(a.id, ga);
            })),
        )
    }

    /// 1-D convolution over time. `x` is `L x Cin`; `w` is `Cout x (k*Cin)`
    /// laid out `[tap0 ch0..tap0 chCin-1, tap1 ch0, ...]`; `b` is `1 x Cout`.
    /// Zero padding of `pad_left`/`pad_right` frames.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let (len, cin) = vx.dim();
        let cout = vw.nrows();
        assert_eq!(vw.ncols(), kernel * cin, "conv1d: weight layout mismatch");
        assert_eq!(vb.dim(), (1, cout), "conv1d: bias shape");
        let padded = len + pad_left + pad_right;
        assert!(padded >= kernel, "conv1d: input shorter than kernel");
        assert_eq!((padded - kernel) % stride, 0, "conv1d: stride misfit");
        let out_len = (padded - kernel) / stride + 1;
        let mut out = Array2::zeros((out_len, cout));
        for t in 0..out_len {
            for co in 0..cout {
                let mut acc = vb[[0, co]];
                for tap in 0..kernel {
                    let src = (t * stride + tap) as isize - pad_left as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ci in 0..cin {
                        acc += vx[[src, ci]] * vw[[co, tap * cin + ci]];
                    }
                }
                out[[t, co]] = acc;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gx = Array2::zeros((len, cin));
                let mut gw = Array2::zeros((cout, kernel * cin));
                let mut gb = Array2::zeros((1, cout));
                for t in 0..g.nrows() {
                    for co in 0..cout {
                        let gv = g[[t, co]];
                        gb[[0, co]] += gv;
                        for tap in 0..kernel {
                            let src = (t * stride + tap) as isize - pad_left as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ci in 0..cin {
                                gx[[src, ci]] += gv * vw[[co, tap * cin + ci]];
                                gw[[co, tap * cin + ci]] += gv * vx[[src, ci]];
                            }
                        }
                    }
                }
                sink(x.id, gx);
                sink(w.id, gw);
                sink(b.id, gb);
            })),
        )
    }

    /// Embedding lookup: rows of `table` (`V x C`) selected by `ids`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let (vocab, cols) = vt.dim();
        assert!(
            ids.iter().all(|i| *i < vocab),
            "gather_rows: id out of range"
        );
        let mut out = Array2::zeros((ids.len(), cols));
        for (r, id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&vt.row(*id));
        }
        let ids = ids.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gt = Array2::zeros((vocab, cols));
                for (r, id) in ids.iter().enumerate() {
                    let grow = g.row(r);
                    let mut trow = gt.row_mut(*id);
                    trow += &grow;
                }
                sink(table.id, gt);
            })),
        )
    }

    /// Forward value is `q`; gradients pass through to `h` unchanged.
    pub fn straight_through(&self, h: Var, q: &Array2<f64>) -> Var {
        let vh = self.value(h);
        assert_eq!(vh.dim(), q.dim(), "straight_through: shape mismatch");
        self.push(
            q.clone(),
            Some(Box::new(move |g, sink| sink(h.id, g.clone()))),
        )
    }

    /// Mean squared error against a constant target, optionally weighted by a
    /// per-row mask. The mean runs over `(sum of mask) * cols` elements.
    pub fn mse_const(&self, a: Var, target: &Array2<f64>, mask: Option<&[f64]>) -> Var {
        let va = self.value(a);
        assert_eq!(va.dim(), target.dim(), "mse_const: shape mismatch");
        let (rows, cols) = va.dim();
        let mask: Vec<f64> = match mask {
            Some(m) => {
                assert_eq!(m.len(), rows, "mse_const: mask length");
                m.to_vec()
            }
            None => vec![1.0; rows],
        };
        let weight: f64 = mask.iter().sum();
        assert!(weight > 0.0, "mse_const: empty mask");
        let denom = weight * cols as f64;
        let mut total = 0.0;
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            for c in 0..cols {
                let d = va[[r, c]] - target[[r, c]];
                total += mask[r] * d * d;
            }
        }
        let diff = &va - target;
        self.push(
            Array2::from_elem((1, 1), total / denom),
            Some(Box::new(move |g, sink| {
                let g0 = g[[0, 0]];
                let mut ga = diff.clone();
                for r in 0..rows {
                    let k = g0 * 2.0 * mask[r] / denom;
                    for c in 0..cols {
                        ga[[r, c]] *= k;
                    }
                }
                sink(a.id, ga);
            })),
        )
    }

    /// Margin ranking loss of predicted vectors against their target codes.
    ///
    /// For each unmasked row `t`: `(1/M) * sum over codes e != q_t of
    /// max(0, ||p_t - c[q_t]|| - ||p_t - c[e]|| + margin)`, averaged over the
    /// unmasked rows. Codes are constants; gradients flow only into `p`.
    pub fn triplet_const(
        &self,
        p: Var,
        target_idx: &[usize],
        codes: &Array2<f64>,
        margin: f64,
        mask: Option<&[f64]>,
    ) -> Var {
        let vp = self.value(p);
        let (rows, cols) = vp.dim();
        let m_codes = codes.nrows();
        assert_eq!(codes.ncols(), cols, "triplet_const: code dim mismatch");
        assert_eq!(target_idx.len(), rows, "triplet_const: index length");
        let mask: Vec<f64> = match mask {
            Some(m) => m.to_vec(),
            None => vec![1.0; rows],
        };
        assert_eq!(mask.len(), rows, "triplet_const: mask length");
        let weight: f64 = mask.iter().sum();
        assert!(weight > 0.0, "triplet_const: empty mask");

        let dist = |t: usize, e: usize| -> f64 {
            let mut acc = 0.0;
            for c in 0..cols {
                let d = vp[[t, c]] - codes[[e, c]];
                acc += d * d;
            }
            acc.sqrt()
        };
        let mut total = 0.0;
        for t in 0..rows {
            if mask[t] == 0.0 {
                continue;
            }
            let dq = dist(t, target_idx[t]);
            let mut frame = 0.0;
            for e in 0..m_codes {
                if e == target_idx[t] {
                    continue;
                }
                let term = dq - dist(t, e) + margin;
                if term > 0.0 {
                    frame += term;
                }
            }
            total += mask[t] * frame / m_codes as f64;
        }

        let codes = codes.clone();
        let idx = target_idx.to_vec();
        self.push(
            Array2::from_elem((1, 1), total / weight),
            Some(Box::new(move |g, sink| {
                let g0 = g[[0, 0]];
                let mut gp = Array2::zeros((rows, cols));
                for t in 0..rows {
                    if mask[t] == 0.0 {
                        continue;
                    }
                    let qi = idx[t];
                    let mut dvec_q = vec![0.0; cols];
                    let mut dq = 0.0;
                    for c in 0..cols {
                        let d = vp[[t, c]] - codes[[qi, c]];
                        dvec_q[c] = d;
                        dq += d * d;
                    }
                    let dq = dq.sqrt();
                    let coeff = g0 * mask[t] / (weight * m_codes as f64);
                    for e in 0..m_codes {
                        if e == qi {
                            continue;
                        }
                        let mut de = 0.0;
                        for c in 0..cols {
                            let d = vp[[t, c]] - codes[[e, c]];
                            de += d * d;
                        }
                        let de = de.sqrt();
                        if dq - de + margin <= 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            let mut grad = 0.0;
                            if dq > 0.0 {
                                grad += dvec_q[c] / dq;
                            }
                            if de > 0.0 {
                                grad -= (vp[[t, c]] - codes[[e, c]]) / de;
                            }
                            gp[[t, c]] += coeff * grad;
                        }
                    }
                }
                sink(p.id, gp);
            })),
        )
    }

    /// Weighted sum of scalar nodes: `sum_i w_i * v_i`.
    pub fn affine_sum(&self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut total = 0.0;
        for (v, w) in terms {
            let val = self.value(*v);
            assert_eq!(val.dim(), (1, 1), "affine_sum: non-scalar term");
            total += w * val[[0, 0]];
        }
        let terms = terms.to_vec();
        self.push(
            Array2::from_elem((1, 1), total),
            Some(Box::new(move |g, sink| {
                let g0 = g[[0, 0]];
                for (v, w) in &terms {
                    sink(v.id, Array2::from_elem((1, 1), g0 * w));
                }
            })),
        )
    }

    /// Backpropagates from a `1 x 1` scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.dim(),
            (1, 1),
            "backward: root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &nodes[id].back {
                back(&g, &mut |pid, contrib| accumulate(&mut grads[pid], contrib));
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
