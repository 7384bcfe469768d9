//! Softmax attention across the `H*W` positions of each batch item.

use super::softmax_rows;
use crate::tensor::{gemm, Element, MatView, Tensor};

/// Returns the output and the attention probabilities `[B, L, L]` kept for
/// the backward pass.
pub fn forward<F: Element>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>) -> (Tensor<F>, Vec<F>) {
    let (b, c, h, w) = q.dims4().expect("attention expects rank-4 input");
    let l = h * w;
    let scale = F::one() / F::of(c as f64).sqrt();
    let mut probs = Vec::with_capacity(b * l * l);
    let mut out = vec![F::zero(); b * c * l];
    let mut scores = vec![F::zero(); l * l];
    for i in 0..b {
        // scores[p, r] = scale * sum_c q[c, p] k[c, r]
        gemm(scale, MatView::rm_t(q.item(i), l, c), MatView::rm(k.item(i), c, l), F::zero(), &mut scores);
        let p = softmax_rows(&scores, l);
        // out[c, p] = sum_r v[c, r] P[p, r]
        gemm(F::one(), MatView::rm(v.item(i), c, l), MatView::rm_t(&p, l, l), F::zero(), &mut out[i * c * l..(i + 1) * c * l]);
        probs.extend_from_slice(&p);
    }
    (Tensor::from_vec(q.shape(), out).expect("attention output"), probs)
}

pub fn backward<F: Element>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    probs: &[F],
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (b, c, h, w) = q.dims4().expect("rank-4 input");
    let l = h * w;
    let scale = F::one() / F::of(c as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    let mut dp = vec![F::zero(); l * l];
    for i in 0..b {
        let p = &probs[i * l * l..(i + 1) * l * l];
        let dyi = dy.item(i);
        gemm(F::one(), MatView::rm(dyi, c, l), MatView::rm(p, l, l), F::zero(), dv.item_mut(i));
        gemm(F::one(), MatView::rm_t(dyi, l, c), MatView::rm(v.item(i), c, l), F::zero(), &mut dp);
        // Softmax Jacobian, row by row: ds = p * (dp - <dp, p>).
        for (dprow, prow) in dp.chunks_mut(l).zip(p.chunks(l)) {
            let dot: F = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in dprow.iter_mut().zip(prow) {
                *d = pv * (*d - dot);
            }
        }
        gemm(scale, MatView::rm(k.item(i), c, l), MatView::rm_t(&dp, l, l), F::zero(), dq.item_mut(i));
        gemm(scale, MatView::rm(q.item(i), c, l), MatView::rm(&dp, l, l), F::zero(), dk.item_mut(i));
    }
    (dq, dk, dv)
}
