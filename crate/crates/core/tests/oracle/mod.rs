#![allow(clippy::needless_range_loop)]

//! Naive per-element reference for the alpha = 0 TIES pipeline on a single
//! flat tensor. Written independently of the library: full sort for trimming
//! and explicit loops for election and merging.

#![allow(dead_code)]

pub fn ties_reference(
    init: &[f32],
    fts: &[Vec<f32>],
    k: &[f64],
    c: &[f64],
    lambda: f64,
) -> Vec<f32> {
    let d = init.len();
    let tasks = fts.len();
    let mut trimmed = vec![vec![0.0f64; d]; tasks];
    for t in 0..tasks {
        let tau: Vec<f64> = (0..d).map(|p| fts[t][p] as f64 - init[p] as f64).collect();
        let keep = ((k[t] * d as f64).ceil() as usize).min(d);
        let mut ranked: Vec<usize> = (0..d).collect();
        ranked.sort_by(|&a, &b| {
            tau[b]
                .abs()
                .partial_cmp(&tau[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        for &p in ranked.iter().take(keep) {
            trimmed[t][p] = tau[p];
        }
    }
    let sgn = |v: f64| {
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    };
    let mut out = vec![0.0f32; d];
    for p in 0..d {
        let mut total = 0.0;
        for t in 0..tasks {
            total += trimmed[t][p];
        }
        let gamma = sgn(total);
        let mut sum = 0.0;
        let mut count = 0;
        if gamma != 0 {
            for t in 0..tasks {
                if sgn(trimmed[t][p]) == gamma {
                    sum += c[t] * trimmed[t][p];
                    count += 1;
                }
            }
        }
        let merged = if count == 0 { 0.0 } else { sum / count as f64 };
        out[p] = (init[p] as f64 + lambda * merged) as f32;
    }
    out
}
