//! Group normalization over `[B, C, H, W]` inputs.

use crate::tensor::{Element, Tensor};

/// Per-(batch, group) mean and reciprocal standard deviation.
pub struct GroupStats<F> {
    mean: Vec<F>,
    rstd: Vec<F>,
}

pub fn forward<F: Element>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
    eps: F,
) -> (Tensor<F>, GroupStats<F>) {
    let (b, c, h, w) = x.dims4().expect("group_norm expects rank-4 input");
    assert!(groups > 0 && c % groups == 0, "channels {c} not divisible into {groups} groups");
    assert_eq!(gamma.shape(), [c]);
    assert_eq!(beta.shape(), [c]);
    let hw = h * w;
    let per_group = c / groups;
    let n = F::of((per_group * hw) as f64);
    let mut out = x.clone();
    let mut stats = GroupStats { mean: Vec::with_capacity(b * groups), rstd: Vec::with_capacity(b * groups) };
    for (gi, chunk) in out.data_mut().chunks_mut(per_group * hw).enumerate() {
        let mean = chunk.iter().copied().sum::<F>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rstd = F::one() / (var + eps).sqrt();
        let g0 = (gi % groups) * per_group;
        for (ci, plane) in chunk.chunks_mut(hw).enumerate() {
            let (s, t) = (gamma.data()[g0 + ci], beta.data()[g0 + ci]);
            for v in plane {
                *v = (*v - mean) * rstd * s + t;
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

pub fn backward<F: Element>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    stats: &GroupStats<F>,
    groups: usize,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (_, c, h, w) = x.dims4().expect("rank-4 input");
    let hw = h * w;
    let per_group = c / groups;
    let n = F::of((per_group * hw) as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    let group_len = per_group * hw;
    for (gi, ((xs, dys), dxs)) in x
        .data()
        .chunks(group_len)
        .zip(dy.data().chunks(group_len))
        .zip(dx.data_mut().chunks_mut(group_len))
        .enumerate()
    {
        let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
        let g0 = (gi % groups) * per_group;
        // dxhat = dy * gamma; accumulate its mean and its correlation with xhat.
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for ci in 0..per_group {
            let s = gamma.data()[g0 + ci];
            let (xp, dyp) = (&xs[ci * hw..(ci + 1) * hw], &dys[ci * hw..(ci + 1) * hw]);
            let mut dg = F::zero();
            let mut db = F::zero();
            for (&xv, &d) in xp.iter().zip(dyp) {
                let xhat = (xv - mean) * rstd;
                dg += d * xhat;
                db += d;
                sum_dxhat += d * s;
                sum_dxhat_xhat += d * s * xhat;
            }
            dgamma[g0 + ci] += dg;
            dbeta[g0 + ci] += db;
        }
        let (m1, m2) = (sum_dxhat / n, sum_dxhat_xhat / n);
        for ci in 0..per_group {
            let s = gamma.data()[g0 + ci];
            let range = ci * hw..(ci + 1) * hw;
            for ((&xv, &d), o) in xs[range.clone()].iter().zip(&dys[range.clone()]).zip(&mut dxs[range]) {
                let xhat = (xv - mean) * rstd;
                *o = rstd * (d * s - m1 - xhat * m2);
            }
        }
    }
    (
        dx,
        Tensor::from_vec(&[c], dgamma).expect("dgamma"),
        Tensor::from_vec(&[c], dbeta).expect("dbeta"),
    )
}
