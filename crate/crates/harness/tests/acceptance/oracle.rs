//! Straight-line references written against the formulas, independent of
//! the tape engine.

use cvgl_numerics::{ParameterStore, Tensor};

/// MSCR on raw slices in evaluation mode.
pub fn mscr(x: &Tensor, p: &ParameterStore) -> Vec<f64> {
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let q = c / 4;
    let xs = x.data();
    let at = |bi: usize, ci: usize, i: usize, j: usize| xs[((bi * c + ci) * h + i) * w + j];
    let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let par = |n: &str| p.tensor(&format!("mscr.{n}")).unwrap().data().to_vec();
    let pointwise = |src: &[f64], pw: &[f64], pwb: &[f64], out: &mut [f64], bi: usize, first: usize| {
        for o in 0..q {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = pwb[o];
                    for ci in 0..c {
                        acc += pw[o * c + ci] * src[(ci * h + i) * w + j];
                    }
                    out[((bi * c + first + o) * h + i) * w + j] = acc;
                }
            }
        }
    };

    let mut ms = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for (branch, k) in [1usize, 3, 5].into_iter().enumerate() {
            let dw = par(&format!("b{k}.dw"));
            let dwb = par(&format!("b{k}.dw_b"));
            let r = (k / 2) as isize;
            let mut depth = vec![0.0; c * h * w];
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for u in 0..k {
                            for v in 0..k {
                                let ii = i as isize + u as isize - r;
                                let jj = j as isize + v as isize - r;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += dw[ci * k * k + u * k + v] * at(bi, ci, ii as usize, jj as usize);
                                }
                            }
                        }
                        depth[(ci * h + i) * w + j] = acc + dwb[ci];
                    }
                }
            }
            pointwise(&depth, &par(&format!("b{k}.pw")), &par(&format!("b{k}.pw_b")), &mut ms, bi, branch * q);
        }
        let mut pooled = vec![0.0; c * h * w];
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut m = f64::NEG_INFINITY;
                    for ii in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                        for jj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                            m = m.max(at(bi, ci, ii, jj));
                        }
                    }
                    pooled[(ci * h + i) * w + j] = m;
                }
            }
        }
        pointwise(&pooled, &par("mp.pw"), &par("mp.pw_b"), &mut ms, bi, 3 * q);
    }

    let loc: Vec<f64> = ms.iter().map(|&v| gelu(v)).collect();
    let rw = par("res.w");
    let sigma = par("sigma");
    let mut y = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut r = 0.0;
                for ci in 0..c {
                    r += rw[ci] * loc[((bi * c + ci) * h + i) * w + j];
                }
                for ci in 0..c {
                    let idx = ((bi * c + ci) * h + i) * w + j;
                    y[idx] = xs[idx] + loc[idx] + sigma[ci] * (loc[idx] - r);
                }
            }
        }
    }
    y
}

/// Gallery order by insertion sort: descending score, ascending index.
pub fn order(row: &[f64]) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
    for i in 1..pairs.len() {
        let mut j = i;
        while j > 0 && (pairs[j].0 > pairs[j - 1].0 || (pairs[j].0 == pairs[j - 1].0 && pairs[j].1 < pairs[j - 1].1)) {
            pairs.swap(j - 1, j);
            j -= 1;
        }
    }
    pairs.into_iter().map(|(_, i)| i).collect()
}

pub fn recall(rows: &[Vec<f64>], rel: &[Vec<usize>], k: usize) -> f64 {
    let hits = rows
        .iter()
        .zip(rel)
        .filter(|(row, rel)| order(row)[..k].iter().any(|j| rel.contains(j)))
        .count();
    hits as f64 / rows.len() as f64
}

/// Precision at each relevant position, averaged over the relevant set.
pub fn average_precision(row: &[f64], rel: &[usize]) -> f64 {
    let ord = order(row);
    let mut sum = 0.0;
    for r in 1..=ord.len() {
        if rel.contains(&ord[r - 1]) {
            let hits = ord[..r].iter().filter(|j| rel.contains(j)).count();
            sum += hits as f64 / r as f64;
        }
    }
    sum / rel.len() as f64
}

/// Row-wise InfoNCE with the positive on the diagonal.
pub fn info_nce(s: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, row) in s.iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m / tau + row.iter().map(|v| ((v - m) / tau).exp()).sum::<f64>().ln();
        total += lse - row[i] / tau;
    }
    total / s.len() as f64
}
