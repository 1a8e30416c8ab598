//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use nad_core::AttnPoolWeights;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0) * scale)
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.gen_range(-1.0..1.0) * scale)
}

pub fn random_weights<R: Rng>(
    rng: &mut R,
    c: usize,
    heads: usize,
    d: usize,
    grid: (usize, usize),
) -> AttnPoolWeights<f64> {
    let s = 1.0 / (c as f64).sqrt();
    let k1 = grid.0 * grid.1 + 1;
    AttnPoolWeights::new(
        random_matrix(rng, c, c, s),
        random_vector(rng, c, 0.1),
        random_matrix(rng, c, c, s),
        random_vector(rng, c, 0.1),
        random_matrix(rng, c, c, s),
        random_vector(rng, c, 0.1),
        random_matrix(rng, c, d, s),
        random_vector(rng, d, 0.1),
        random_matrix(rng, k1, c, 0.2),
        heads,
        grid,
    )
    .unwrap()
}

pub fn random_activation<R: Rng>(rng: &mut R, c: usize, grid: (usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn((c, grid.0, grid.1), || rng.gen_range(0.0..2.0))
}

pub fn random_dataset<R: Rng>(rng: &mut R, n: usize, c: usize, grid: (usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn((n, c, grid.0, grid.1), || rng.gen_range(0.0..2.0))
}

/// Tokens `z'_0..z'_K` as plain rows: mean token first, then row-major space.
pub fn oracle_tokens(z: &Array3<f64>, w: &AttnPoolWeights<f64>) -> Vec<Vec<f64>> {
    let (c, hp, wp) = z.dim();
    let mut rows = vec![vec![0.0; c]];
    for y in 0..hp {
        for x in 0..wp {
            rows.push((0..c).map(|n| z[[n, y, x]]).collect());
        }
    }
    let k = (hp * wp) as f64;
    for n in 0..c {
        rows[0][n] = rows[1..].iter().map(|r| r[n]).sum::<f64>() / k;
    }
    for (i, r) in rows.iter_mut().enumerate() {
        for n in 0..c {
            r[n] += w.pos_embed[[i, n]];
        }
    }
    rows
}

fn affine(x: &[f64], m: &Array2<f64>, b: &Array1<f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * m[[i, j]]).sum::<f64>())
        .collect()
}

/// Class-token attention per head, computed head by head from scratch.
pub fn oracle_attention(tokens: &[Vec<f64>], w: &AttnPoolWeights<f64>) -> Vec<Vec<f64>> {
    let c = w.channels();
    let dh = c / w.heads;
    let q = affine(&tokens[0], &w.w_q, &w.b_q);
    let keys: Vec<Vec<f64>> = tokens.iter().map(|t| affine(t, &w.w_k, &w.b_k)).collect();
    (0..w.heads)
        .map(|h| {
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| (h * dh..(h + 1) * dh).map(|j| q[j] * k[j]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Multi-head attention pooling for the class query, the textbook way.
pub fn oracle_forward(z: &Array3<f64>, w: &AttnPoolWeights<f64>) -> Vec<f64> {
    let tokens = oracle_tokens(z, w);
    let attn = oracle_attention(&tokens, w);
    let c = w.channels();
    let dh = c / w.heads;
    let values: Vec<Vec<f64>> = tokens.iter().map(|t| affine(t, &w.w_v, &w.b_v)).collect();
    let mut concat = vec![0.0; c];
    for h in 0..w.heads {
        for j in h * dh..(h + 1) * dh {
            concat[j] = values.iter().zip(&attn[h]).map(|(v, a)| a * v[j]).sum();
        }
    }
    affine(&concat, &w.w_o, &w.b_o)
}

/// `r^{n,h}_i = a^h_i · z'_i[n] · (w_v[n, head h] · w_o[head h, :])`.
pub fn oracle_pair_token(
    tokens: &[Vec<f64>],
    attn: &[Vec<f64>],
    w: &AttnPoolWeights<f64>,
    n: usize,
    h: usize,
    i: usize,
) -> Vec<f64> {
    let dh = w.channels() / w.heads;
    let d = w.embed_dim();
    let coef = attn[h][i] * tokens[i][n];
    (0..d)
        .map(|o| {
            coef * (h * dh..(h + 1) * dh)
                .map(|j| w.w_v[[n, j]] * w.w_o[[j, o]])
                .sum::<f64>()
        })
        .collect()
}

/// `β^h = b_v[head h] · w_o[head h, :]`.
pub fn oracle_head_bias(w: &AttnPoolWeights<f64>, h: usize) -> Vec<f64> {
    let dh = w.channels() / w.heads;
    (0..w.embed_dim())
        .map(|o| (h * dh..(h + 1) * dh).map(|j| w.b_v[j] * w.w_o[[j, o]]).sum())
        .collect()
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}
