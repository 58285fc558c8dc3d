//! Direct scalar-loop reference implementations, written independently of the library's
//! vectorised paths. Shared by the op tests and the acceptance suite.
#![allow(dead_code, clippy::too_many_arguments)]

/// 6-nested-loop NCHW convolution.
pub fn conv2d(
    x: &[f64],
    (n, c_in, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (c_out, ksz): (usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - ksz) / stride + 1;
    let wo = (w + 2 * pad - ksz) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for b in 0..n {
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias[o];
                    for i in 0..c_in {
                        for ky in 0..ksz {
                            for kx in 0..ksz {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                s += x[((b * c_in + i) * h + iy as usize) * w + ix as usize]
                                    * k[((o * c_in + i) * ksz + ky) * ksz + kx];
                            }
                        }
                    }
                    out[((b * c_out + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    (out, ho, wo)
}

/// `x W^T + b` with `w` as `(out, in)`.
pub fn linear(x: &[f64], rows: usize, d_in: usize, w: &[f64], d_out: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut s = b[o];
            for i in 0..d_in {
                s += x[r * d_in + i] * w[o * d_in + i];
            }
            out[r * d_out + o] = s;
        }
    }
    out
}

/// Brute-force multi-head attention over `(groups, len, dim)`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], g: usize, l: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; g * l * d];
    for gi in 0..g {
        for hd in 0..heads {
            for i in 0..l {
                let mut scores = vec![0.0; l];
                for (j, s) in scores.iter_mut().enumerate() {
                    for e in 0..dh {
                        *s += q[(gi * l + i) * d + hd * dh + e] * k[(gi * l + j) * d + hd * dh + e];
                    }
                    *s /= (dh as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..l {
                    let p = (scores[j] - m).exp() / z;
                    for e in 0..dh {
                        out[(gi * l + i) * d + hd * dh + e] += p * v[(gi * l + j) * d + hd * dh + e];
                    }
                }
            }
        }
    }
    out
}

/// Window attention including the q/k/v/o projections (weights `(d, d)`, biases `(d,)`).
pub fn window_attention(
    tokens: &[f64],
    g: usize,
    l: usize,
    d: usize,
    heads: usize,
    proj: [(&[f64], &[f64]); 4],
) -> Vec<f64> {
    let rows = g * l;
    let q = linear(tokens, rows, d, proj[0].0, d, proj[0].1);
    let k = linear(tokens, rows, d, proj[1].0, d, proj[1].1);
    let v = linear(tokens, rows, d, proj[2].0, d, proj[2].1);
    let a = attention(&q, &k, &v, g, l, d, heads);
    linear(&a, rows, d, proj[3].0, d, proj[3].1)
}

/// Per-element sequential selective scan, one scalar state at a time.
pub fn selective_scan(
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dskip: &[f64],
    (s, l, di, n): (usize, usize, usize, usize),
) -> Vec<f64> {
    let mut y = vec![0.0; s * l * di];
    for si in 0..s {
        for i in 0..di {
            for j in 0..n {
                let mut h = 0.0;
                for t in 0..l {
                    let dt = delta[(si * l + t) * di + i];
                    let xt = x[(si * l + t) * di + i];
                    h = (dt * a[i * n + j]).exp() * h + dt * b[(si * l + t) * n + j] * xt;
                    y[(si * l + t) * di + i] += c[(si * l + t) * n + j] * h;
                }
            }
            for t in 0..l {
                y[(si * l + t) * di + i] += dskip[i] * x[(si * l + t) * di + i];
            }
        }
    }
    y
}

/// Mean negative log-probability of the annotated class over labeled pixels.
pub fn pce(probs: &[f64], labels: &[u8], n: usize, k: usize, hw: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        for p in 0..hw {
            let lab = labels[i * hw + p];
            if lab == 255 {
                continue;
            }
            total += -probs[(i * k + lab as usize) * hw + p].max(1e-12).ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Class-averaged soft dice loss with eps 1e-5.
pub fn dice(probs: &[f64], target: &[f64], n: usize, k: usize, hw: usize) -> f64 {
    let eps = 1e-5;
    let mut loss = 0.0;
    for c in 0..k {
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for p in 0..hw {
                let idx = (i * k + c) * hw + p;
                inter += probs[idx] * target[idx];
                ps += probs[idx];
                gs += target[idx];
            }
        }
        loss += 1.0 - (2.0 * inter + eps) / (ps + gs + eps);
    }
    loss / k as f64
}

/// One-vs-rest (dice, acc, pre, sen, spe) with 0/0 := 1.
pub fn confusion(pred: &[u8], gt: &[u8], k: u8) -> [f64; 5] {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == k, g == k) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let r = |a: f64, b: f64| if b == 0.0 { 1.0 } else { a / b };
    [
        r(2.0 * tp, 2.0 * tp + fp + fn_),
        r(tp + tn, tp + tn + fp + fn_),
        r(tp, tp + fp),
        r(tp, tp + fn_),
        r(tn, tn + fp),
    ]
}

fn boundary(mask: &[u8], h: usize, w: usize, k: u8) -> Vec<(i64, i64)> {
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != k {
                continue;
            }
            let inside = |yy: i64, xx: i64| {
                yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && mask[yy as usize * w + xx as usize] == k
            };
            let (yi, xi) = (y as i64, x as i64);
            if !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
                pts.push((yi, xi));
            }
        }
    }
    pts
}

/// All-pairs boundary distances: (hd95 by nearest rank, asd).
pub fn hd95_asd(pred: &[u8], gt: &[u8], h: usize, w: usize, k: u8) -> (f64, f64) {
    let pa = pred.iter().any(|&v| v == k);
    let ga = gt.iter().any(|&v| v == k);
    match (pa, ga) {
        (false, false) => return (0.0, 0.0),
        (true, false) | (false, true) => {
            let diag = ((h * h + w * w) as f64).sqrt();
            return (diag, diag);
        }
        _ => {}
    }
    let bp = boundary(pred, h, w, k);
    let bg = boundary(gt, h, w, k);
    let nearest = |from: &[(i64, i64)], to: &[(i64, i64)]| -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(yy, xx)| (((y - yy).pow(2) + (x - xx).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut d = nearest(&bp, &bg);
    d.extend(nearest(&bg, &bp));
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((95 * d.len()).div_ceil(100)).max(1);
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    (d[rank - 1], asd)
}
