//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one backward closure per operation whose inputs require
//! gradients. [`Tape::backward`] replays the closures in reverse creation
//! order. A tape built with [`Tape::inference`] records nothing, so
//! intermediate values are freed as soon as their handles drop.

mod attention;
mod conv;
mod norm;

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{gemm, Element, MatView, Tensor};

pub use conv::Conv2dGeometry;

type Backward<F> = Box<dyn FnOnce(&Tensor<F>, &mut Grads<F>)>;

/// Handle to a value on a tape.
#[derive(Clone)]
pub struct Var<F> {
    id: Option<usize>,
    value: Arc<Tensor<F>>,
}

impl<F: Element> Var<F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Unwraps the value, copying only if other handles still share it.
    pub fn into_tensor(self) -> Tensor<F> {
        Arc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Grads<F> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Grads<F> {
    fn accumulate(&mut self, id: Option<usize>, g: Tensor<F>) {
        let Some(id) = id else { return };
        match &mut self.slots[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, var: &Var<F>) -> Option<&Tensor<F>> {
        var.id.and_then(|id| self.slots[id].as_ref())
    }

    pub fn take(&mut self, var: &Var<F>) -> Option<Tensor<F>> {
        var.id.and_then(|id| self.slots[id].take())
    }
}

pub struct Tape<F: Element> {
    recording: bool,
    nodes: RefCell<Vec<Option<Backward<F>>>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    /// A tape that records operations for differentiation.
    pub fn new() -> Self {
        Tape { recording: true, nodes: RefCell::new(Vec::new()) }
    }

    /// A tape that records nothing.
    pub fn inference() -> Self {
        Tape { recording: false, nodes: RefCell::new(Vec::new()) }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Differentiable leaf (parameters).
    pub fn leaf(&self, value: Arc<Tensor<F>>) -> Var<F> {
        let id = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(None);
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var { id, value }
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<F>) -> Var<F> {
        Var { id: None, value: Arc::new(value) }
    }

    fn push(
        &self,
        value: Tensor<F>,
        inputs: &[&Var<F>],
        back: impl FnOnce(&Tensor<F>, &mut Grads<F>) + 'static,
    ) -> Var<F> {
        let needed = self.recording && inputs.iter().any(|v| v.id.is_some());
        let id = if needed {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Some(Box::new(back)));
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var { id, value: Arc::new(value) }
    }

    /// Back-propagates from a scalar `root`, consuming the tape.
    pub fn backward(self, root: &Var<F>) -> Grads<F> {
        let mut nodes = self.nodes.into_inner();
        let mut grads = Grads { slots: (0..nodes.len()).map(|_| None).collect() };
        let Some(root_id) = root.id else { return grads };
        assert_eq!(root.value.len(), 1, "backward root must be a scalar");
        grads.slots[root_id] = Some(Tensor::full(root.value.shape(), F::one()));
        for id in (0..=root_id).rev() {
            if let Some(back) = nodes[id].take() {
                if let Some(g) = grads.slots[id].take() {
                    back(&g, &mut grads);
                }
            }
        }
        grads
    }

    pub fn add(&self, a: &Var<F>, b: &Var<F>) -> Var<F> {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let value = a.value.zip_map(&b.value, |x, y| x + y).expect("shapes checked");
        let (ia, ib) = (a.id, b.id);
        self.push(value, &[a, b], move |g, grads| {
            grads.accumulate(ia, g.clone());
            grads.accumulate(ib, g.clone());
        })
    }

    pub fn scale(&self, a: &Var<F>, s: F) -> Var<F> {
        let value = a.value.map(|x| x * s);
        let ia = a.id;
        self.push(value, &[a], move |g, grads| grads.accumulate(ia, g.map(|x| x * s)))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&self, a: &Var<F>, mask: Tensor<F>) -> Var<F> {
        let value = a.value.zip_map(&mask, |x, m| x * m).expect("mask shape");
        let ia = a.id;
        self.push(value, &[a], move |g, grads| {
            grads.accumulate(ia, g.zip_map(&mask, |x, m| x * m).expect("mask shape"))
        })
    }

    /// Swish activation `x * sigmoid(x)`.
    pub fn silu(&self, a: &Var<F>) -> Var<F> {
        let value = a.value.map(|x| x / (F::one() + (-x).exp()));
        let (ia, x) = (a.id, a.value.clone());
        self.push(value, &[a], move |g, grads| {
            let dx = g
                .zip_map(&x, |g, x| {
                    let s = F::one() / (F::one() + (-x).exp());
                    g * s * (F::one() + x * (F::one() - s))
                })
                .expect("same shape");
            grads.accumulate(ia, dx);
        })
    }

    pub fn relu(&self, a: &Var<F>) -> Var<F> {
        let value = a.value.map(|x| x.max(F::zero()));
        let (ia, x) = (a.id, a.value.clone());
        self.push(value, &[a], move |g, grads| {
            let dx = g
                .zip_map(&x, |g, x| if x > F::zero() { g } else { F::zero() })
                .expect("same shape");
            grads.accumulate(ia, dx);
        })
    }

    /// `x [n, in] * w[out, in]^T + b[out]`.
    pub fn linear(&self, x: &Var<F>, w: &Var<F>, b: &Var<F>) -> Var<F> {
        let (n, fin) = (x.shape()[0], x.shape()[1]);
        let fout = w.shape()[0];
        assert_eq!(w.shape(), [fout, fin], "linear weight shape");
        assert_eq!(b.shape(), [fout], "linear bias shape");
        let mut out = vec![F::zero(); n * fout];
        gemm(F::one(), MatView::rm(x.value.data(), n, fin), MatView::rm_t(w.value.data(), fin, fout), F::zero(), &mut out);
        for row in out.chunks_mut(fout) {
            for (o, &bb) in row.iter_mut().zip(b.value.data()) {
                *o += bb;
            }
        }
        let value = Tensor::from_vec(&[n, fout], out).expect("linear output");
        let (ix, iw, ib) = (x.id, w.id, b.id);
        let (xv, wv) = (x.value.clone(), w.value.clone());
        self.push(value, &[x, w, b], move |g, grads| {
            let gd = g.data();
            if ix.is_some() {
                let mut dx = vec![F::zero(); n * fin];
                gemm(F::one(), MatView::rm(gd, n, fout), MatView::rm(wv.data(), fout, fin), F::zero(), &mut dx);
                grads.accumulate(ix, Tensor::from_vec(&[n, fin], dx).expect("dx"));
            }
            if iw.is_some() {
                let mut dw = vec![F::zero(); fout * fin];
                gemm(F::one(), MatView::rm_t(gd, fout, n), MatView::rm(xv.data(), n, fin), F::zero(), &mut dw);
                grads.accumulate(iw, Tensor::from_vec(&[fout, fin], dw).expect("dw"));
            }
            if ib.is_some() {
                let mut db = vec![F::zero(); fout];
                for row in gd.chunks(fout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                grads.accumulate(ib, Tensor::from_vec(&[fout], db).expect("db"));
            }
        })
    }

    /// Row lookup `table[ids[i]]`, giving `[ids.len(), dim]`.
    pub fn embedding(&self, table: &Var<F>, ids: &[usize]) -> Var<F> {
        let (rows, dim) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            assert!(i < rows, "embedding index out of range");
            out.extend_from_slice(&table.value.data()[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::from_vec(&[ids.len(), dim], out).expect("embedding output");
        let it = table.id;
        let ids = ids.to_vec();
        self.push(value, &[table], move |g, grads| {
            let mut dt = Tensor::zeros(&[rows, dim]);
            for (r, &i) in ids.iter().enumerate() {
                let src = &g.data()[r * dim..(r + 1) * dim];
                for (d, &s) in dt.data_mut()[i * dim..(i + 1) * dim].iter_mut().zip(src) {
                    *d += s;
                }
            }
            grads.accumulate(it, dt);
        })
    }

    /// Adds a per-(batch, channel) vector `e [B, C]` to `x [B, C, H, W]`.
    pub fn add_channel_bias(&self, x: &Var<F>, e: &Var<F>) -> Var<F> {
        let (b, c, h, w) = x.value.dims4().expect("rank-4 input");
        assert_eq!(e.shape(), [b, c], "channel bias shape");
        let hw = h * w;
        let mut value = (*x.value).clone();
        for (plane, &v) in value.data_mut().chunks_mut(hw).zip(e.value.data()) {
            for p in plane {
                *p += v;
            }
        }
        let (ix, ie) = (x.id, e.id);
        self.push(value, &[x, e], move |g, grads| {
            if ie.is_some() {
                let de: Vec<F> = g.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
                grads.accumulate(ie, Tensor::from_vec(&[b, c], de).expect("de"));
            }
            grads.accumulate(ix, g.clone());
        })
    }

    pub fn conv2d(&self, x: &Var<F>, w: &Var<F>, b: &Var<F>, stride: usize, pad: usize) -> Var<F> {
        let geom = Conv2dGeometry::infer(x.shape(), w.shape(), stride, pad).expect("conv2d geometry");
        assert_eq!(b.shape(), [geom.cout], "conv2d bias shape");
        let value = conv::forward(&geom, &x.value, &w.value, &b.value);
        let (ix, iw, ib) = (x.id, w.id, b.id);
        let (xv, wv) = (x.value.clone(), w.value.clone());
        self.push(value, &[x, w, b], move |g, grads| {
            let out = conv::backward(&geom, &xv, &wv, g, ix.is_some());
            if let Some(dx) = out.dx {
                grads.accumulate(ix, dx);
            }
            grads.accumulate(iw, out.dw);
            grads.accumulate(ib, out.db);
        })
    }

    pub fn group_norm(&self, x: &Var<F>, gamma: &Var<F>, beta: &Var<F>, groups: usize, eps: f64) -> Var<F> {
        let (value, stats) = norm::forward(&x.value, &gamma.value, &beta.value, groups, F::of(eps));
        let (ix, ig, ib) = (x.id, gamma.id, beta.id);
        let (xv, gv) = (x.value.clone(), gamma.value.clone());
        self.push(value, &[x, gamma, beta], move |g, grads| {
            let (dx, dgamma, dbeta) = norm::backward(&xv, &gv, &stats, groups, g);
            grads.accumulate(ix, dx);
            grads.accumulate(ig, dgamma);
            grads.accumulate(ib, dbeta);
        })
    }

    /// Single-head dot-product self-attention over spatial positions.
    ///
    /// `q`, `k`, `v` are `[B, C, H, W]`; every position attends to every other.
    pub fn spatial_attention(&self, q: &Var<F>, k: &Var<F>, v: &Var<F>) -> Var<F> {
        assert_eq!(q.shape(), k.shape(), "attention q/k shape");
        assert_eq!(q.shape(), v.shape(), "attention q/v shape");
        let (value, probs) = attention::forward(&q.value, &k.value, &v.value);
        let (iq, ik, iv) = (q.id, k.id, v.id);
        let (qv, kv, vv) = (q.value.clone(), k.value.clone(), v.value.clone());
        self.push(value, &[q, k, v], move |g, grads| {
            let (dq, dk, dv) = attention::backward(&qv, &kv, &vv, &probs, g);
            grads.accumulate(iq, dq);
            grads.accumulate(ik, dk);
            grads.accumulate(iv, dv);
        })
    }

    /// Channel-axis concatenation of two `[B, C, H, W]` tensors.
    pub fn concat_channels(&self, a: &Var<F>, b: &Var<F>) -> Var<F> {
        let (n, ca, h, w) = a.value.dims4().expect("rank-4 input");
        let (nb, cb, hb, wb) = b.value.dims4().expect("rank-4 input");
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shape mismatch");
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            out.extend_from_slice(a.value.item(i));
            out.extend_from_slice(b.value.item(i));
        }
        let value = Tensor::from_vec(&[n, ca + cb, h, w], out).expect("concat output");
        let (ia, ib) = (a.id, b.id);
        self.push(value, &[a, b], move |g, grads| {
            let mut da = Vec::with_capacity(n * la);
            let mut db = Vec::with_capacity(n * lb);
            for i in 0..n {
                let item = g.item(i);
                da.extend_from_slice(&item[..la]);
                db.extend_from_slice(&item[la..]);
            }
            grads.accumulate(ia, Tensor::from_vec(&[n, ca, h, w], da).expect("da"));
            grads.accumulate(ib, Tensor::from_vec(&[n, cb, h, w], db).expect("db"));
        })
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample_nearest2(&self, x: &Var<F>) -> Var<F> {
        let (n, c, h, w) = x.value.dims4().expect("rank-4 input");
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![F::zero(); n * c * h2 * w2];
        for (src, dst) in x.value.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h2, w2], out).expect("upsample output");
        let ix = x.id;
        self.push(value, &[x], move |g, grads| {
            let mut dx = vec![F::zero(); n * c * h * w];
            for (src, dst) in g.data().chunks(h2 * w2).zip(dx.chunks_mut(h * w)) {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                    }
                }
            }
            grads.accumulate(ix, Tensor::from_vec(&[n, c, h, w], dx).expect("dx"));
        })
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&self, x: &Var<F>, shape: &[usize]) -> Var<F> {
        let value = (*x.value).clone().reshape(shape).expect("reshape preserves size");
        let (ix, orig) = (x.id, x.shape().to_vec());
        self.push(value, &[x], move |g, grads| {
            grads.accumulate(ix, g.clone().reshape(&orig).expect("same size"))
        })
    }

    /// `[B, C, H, W]` to `[B, C]` by spatial mean.
    pub fn global_avg_pool(&self, x: &Var<F>) -> Var<F> {
        let (n, c, h, w) = x.value.dims4().expect("rank-4 input");
        let hw = h * w;
        let inv = F::one() / F::of(hw as f64);
        let out: Vec<F> = x.value.data().chunks(hw).map(|p| p.iter().copied().sum::<F>() * inv).collect();
        let value = Tensor::from_vec(&[n, c], out).expect("pool output");
        let ix = x.id;
        self.push(value, &[x], move |g, grads| {
            let mut dx = Vec::with_capacity(n * c * hw);
            for &v in g.data() {
                dx.extend(std::iter::repeat_n(v * inv, hw));
            }
            grads.accumulate(ix, Tensor::from_vec(&[n, c, h, w], dx).expect("dx"));
        })
    }

    /// Mean squared error against a constant target, as a scalar.
    pub fn mse(&self, pred: &Var<F>, target: &Tensor<F>) -> Var<F> {
        assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
        let n = F::of(pred.value.len().max(1) as f64);
        let total: F = pred.value.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let value = Tensor::scalar(total / n);
        let ip = pred.id;
        let (pv, tv) = (pred.value.clone(), target.clone());
        self.push(value, &[pred], move |g, grads| {
            let scale = F::of(2.0) * g.data()[0] / n;
            let dp = pv.zip_map(&tv, |p, t| scale * (p - t)).expect("same shape");
            grads.accumulate(ip, dp);
        })
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against integer labels.
    pub fn cross_entropy(&self, logits: &Var<F>, labels: &[usize]) -> Var<F> {
        let (n, k) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(labels.len(), n, "cross_entropy label count");
        let probs = softmax_rows(logits.value.data(), k);
        let mut total = F::zero();
        for (row, &y) in probs.chunks(k).zip(labels) {
            assert!(y < k, "label out of range");
            total -= row[y].max(F::min_positive_value()).ln();
        }
        let inv_n = F::one() / F::of(n.max(1) as f64);
        let value = Tensor::scalar(total * inv_n);
        let il = logits.id;
        let labels = labels.to_vec();
        self.push(value, &[logits], move |g, grads| {
            let scale = g.data()[0] * inv_n;
            let mut d = probs;
            for (row, &y) in d.chunks_mut(k).zip(&labels) {
                row[y] -= F::one();
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            grads.accumulate(il, Tensor::from_vec(&[n, k], d).expect("dlogits"));
        })
    }
}

/// Numerically stable row-wise softmax of a row-major matrix with `k` columns.
pub fn softmax_rows<F: Element>(data: &[F], k: usize) -> Vec<F> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
