//! Loop-by-loop reference for the forward pass, written without the
//! library's helpers. Inputs are the visible rows only.

use xmodal_core::params::{AggParams, AttnParams, LinearMap};

pub struct PairScores {
    pub global: f64,
    pub words: f64,
    pub regions: f64,
}

fn matvec(m: &LinearMap, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let a = m.as_slice();
    let mut out = vec![0.0; d];
    for r in 0..d {
        let mut acc = 0.0;
        for c in 0..d {
            acc += a[r * d + c] * x[c];
        }
        out[r] = acc;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut e = Vec::with_capacity(x.len());
    let mut z = 0.0;
    for &v in x {
        let t = (v - m).exp();
        e.push(t);
        z += t;
    }
    e.iter().map(|v| v / z).collect()
}

fn normalized_product(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let mut p = vec![0.0; a.len()];
    let mut n2 = 0.0;
    for i in 0..a.len() {
        p[i] = a[i] * b[i];
        n2 += p[i] * p[i];
    }
    let n = n2.sqrt();
    if n <= 1e-12 {
        return None;
    }
    Some(p.iter().map(|v| v / n).collect())
}

fn attention_pool(p: &AttnParams, rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for c in 0..d {
            mean[c] += r[c];
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    let q = matvec(&p.wq, &mean);
    let scores: Vec<f64> = rows.iter().map(|r| dot(&q, &matvec(&p.wk, r)) / (d as f64).sqrt()).collect();
    let w = softmax(&scores);
    let mut mixed = vec![0.0; d];
    for (t, r) in rows.iter().enumerate() {
        for c in 0..d {
            mixed[c] += w[t] * r[c];
        }
    }
    matvec(&p.wv, &mixed)
}

fn agg_score(p: &AggParams, set: &[Vec<f64>]) -> f64 {
    let out = attention_pool(&p.attn, set);
    dot(&p.fc_weight, &out) + p.fc_bias
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Alignment vectors of `queries` against their attended counterparts in `keys`.
fn directional(queries: &[Vec<f64>], keys: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let d = queries[0].len();
    let mut out = Vec::new();
    for q in queries {
        let logits: Vec<f64> = keys.iter().map(|k| lambda * cos(k, q)).collect();
        let w = softmax(&logits);
        let mut attended = vec![0.0; d];
        for (i, k) in keys.iter().enumerate() {
            for c in 0..d {
                attended[c] += w[i] * k[c];
            }
        }
        if let Some(a) = normalized_product(&attended, q) {
            out.push(a);
        }
    }
    out
}

/// Scores of image `regions` against report `tokens`.
pub fn pair_scores(regions: &[Vec<f64>], tokens: &[Vec<f64>], params: &xmodal_core::HeadParams) -> PairScores {
    let w = &params.weights;
    let v_bar = attention_pool(&w.pool.image, regions);
    let t_bar = attention_pool(&w.pool.text, tokens);
    let ag = normalized_product(&v_bar, &t_bar).expect("global alignment");
    let global: f64 = ag.iter().sum();
    let word_set = directional(tokens, regions, params.lambda);
    let region_set = directional(regions, tokens, params.lambda);
    PairScores {
        global,
        words: agg_score(&w.agg_words, &word_set),
        regions: agg_score(&w.agg_regions, &region_set),
    }
}

/// Symmetric InfoNCE over a dense score table.
pub fn info_nce(s: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for k in 0..n {
        let row: Vec<f64> = (0..n).map(|j| s[k][j] / tau).collect();
        let col: Vec<f64> = (0..n).map(|j| s[j][k] / tau).collect();
        let lse = |x: &[f64]| {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        total += lse(&row) - row[k] + lse(&col) - col[k];
    }
    total / n as f64
}
