//! Naive reference implementations used as test oracles.
//!
//! Everything here is written from the definitions with no shared code
//! paths: rotation angles are recomputed with `powf` per element, full
//! attention matrices are materialized row by row, and TopK is a full sort.
#![allow(dead_code)]

use kvevict_core::LayerData;

pub fn rope(x: &[f64], pos: u64, theta: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = pos as f64 * theta.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = angle.sin_cos();
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Highest `k` scores, ties to the lower index, returned ascending.
pub fn topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort();
    idx
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = a.iter().chain(b).cloned().collect();
    v.sort();
    v.dedup();
    v
}

struct Tok {
    q: Vec<f64>,
    k: Vec<f64>,
}

fn rotated_prompt(layer: &LayerData, q_head: usize, kv: usize) -> Vec<Tok> {
    let theta = layer.rope.theta_base;
    (0..layer.prompt_len())
        .map(|t| {
            let p = layer.prompt_positions[t].0;
            Tok {
                q: rope(layer.queries[q_head].row(t), p, theta),
                k: rope(layer.keys[kv].row(t), p, theta),
            }
        })
        .collect()
}

/// Full `n × n` attention matrix under an arbitrary visibility predicate;
/// rows that see nothing are all zero.
fn attention_matrix(toks: &[Tok], d: usize, visible: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    let n = toks.len();
    let scale = (d as f64).sqrt();
    (0..n)
        .map(|i| {
            let cols: Vec<usize> = (0..n).filter(|&j| visible(i, j)).collect();
            let mut row = vec![0.0; n];
            if cols.is_empty() {
                return row;
            }
            let logits: Vec<f64> = cols.iter().map(|&j| dot(&toks[i].q, &toks[j].k) / scale).collect();
            for (&j, w) in cols.iter().zip(softmax(&logits)) {
                row[j] = w;
            }
            row
        })
        .collect()
}

fn group(layer: &LayerData, kv: usize) -> std::ops::Range<usize> {
    let g = layer.queries.len() / layer.keys.len();
    kv * g..(kv + 1) * g
}

/// Pseudo window with first-`m` / last-`n` content appended after
/// position `start`; `visible_prompt` is the visible prompt prefix.
pub struct RefWindow {
    pub sources: Vec<usize>,
    pub positions: Vec<u64>,
    pub visible_prompt: usize,
}

pub fn fmln_window(lp: usize, first: usize, last: usize, offset: i64) -> RefWindow {
    let mut sources: Vec<usize> = (0..first).collect();
    sources.extend(lp - last..lp);
    let start = lp as i64 + offset;
    RefWindow {
        positions: (0..sources.len()).map(|i| (start + i as i64) as u64).collect(),
        sources,
        visible_prompt: lp,
    }
}

/// DapQ scores: the prompt followed by the pseudo tokens forms one extended
/// sequence; each pseudo row sees the visible prompt plus pseudo tokens up
/// to and including itself (or only the prompt when `with_pseudo` is off).
pub fn dapq_scores(layer: &LayerData, w: &RefWindow, with_pseudo: bool) -> Vec<Vec<f64>> {
    let lp = layer.prompt_len();
    let theta = layer.rope.theta_base;
    let d = layer.rope.head_dim;
    (0..layer.keys.len())
        .map(|kv| {
            let mut total = vec![0.0; lp];
            for h in group(layer, kv) {
                let mut toks = rotated_prompt(layer, h, kv);
                for (&s, &p) in w.sources.iter().zip(&w.positions) {
                    toks.push(Tok {
                        q: rope(layer.queries[h].row(s), p, theta),
                        k: rope(layer.keys[kv].row(s), p, theta),
                    });
                }
                let a = attention_matrix(&toks, d, |i, j| {
                    if i < lp {
                        return j <= i;
                    }
                    j < w.visible_prompt || (with_pseudo && j >= lp && j <= i)
                });
                for row in &a[lp..] {
                    for j in 0..lp {
                        total[j] += row[j];
                    }
                }
            }
            total
        })
        .collect()
}

pub fn dapq(layer: &LayerData, w: &RefWindow, with_pseudo: bool, budget: usize) -> Vec<Vec<usize>> {
    dapq_scores(layer, w, with_pseudo).iter().map(|s| topk(s, budget)).collect()
}

fn causal(layer: &LayerData, kv: usize) -> Vec<Vec<Vec<f64>>> {
    group(layer, kv)
        .map(|h| attention_matrix(&rotated_prompt(layer, h, kv), layer.rope.head_dim, |i, j| j <= i))
        .collect()
}

fn max_pool(s: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let mut padded = vec![s[0]; half];
    padded.extend_from_slice(s);
    padded.extend(std::iter::repeat_n(s[s.len() - 1], half));
    (0..s.len())
        .map(|c| padded[c..c + kernel].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn snapkv(layer: &LayerData, window: usize, kernel: usize, budget: usize) -> Vec<Vec<usize>> {
    let lp = layer.prompt_len();
    (0..layer.keys.len())
        .map(|kv| {
            if budget >= lp {
                return (0..lp).collect();
            }
            let mut s = vec![0.0; lp - window];
            for a in causal(layer, kv) {
                for row in &a[lp - window..] {
                    for j in 0..lp - window {
                        s[j] += row[j];
                    }
                }
            }
            let recent: Vec<usize> = (lp - window..lp).collect();
            if s.is_empty() {
                return recent;
            }
            union(&topk(&max_pool(&s, kernel), budget - window), &recent)
        })
        .collect()
}

pub fn h2o(layer: &LayerData, recent: usize, budget: usize, normalize: bool) -> Vec<Vec<usize>> {
    let lp = layer.prompt_len();
    (0..layer.keys.len())
        .map(|kv| {
            if budget >= lp {
                return (0..lp).collect();
            }
            let mut s = vec![0.0; lp];
            for a in causal(layer, kv) {
                for row in &a {
                    for j in 0..lp {
                        s[j] += row[j];
                    }
                }
            }
            if normalize {
                for (j, v) in s.iter_mut().enumerate() {
                    *v /= (lp - j) as f64;
                }
            }
            let tail: Vec<usize> = (lp - recent..lp).collect();
            union(&topk(&s[..lp - recent], budget - recent), &tail)
        })
        .collect()
}

pub fn streaming(lp: usize, sink: usize, budget: usize) -> Vec<usize> {
    if budget >= lp {
        return (0..lp).collect();
    }
    (0..lp).filter(|&j| j < sink || j >= lp - (budget - sink)).collect()
}

/// Decode-query attention over the prompt keys, summed over each group.
pub fn decode_attention(layer: &LayerData) -> Vec<Vec<f64>> {
    let lp = layer.prompt_len();
    let theta = layer.rope.theta_base;
    let d = layer.rope.head_dim;
    (0..layer.keys.len())
        .map(|kv| {
            let keys: Vec<Vec<f64>> = (0..lp)
                .map(|t| rope(layer.keys[kv].row(t), layer.prompt_positions[t].0, theta))
                .collect();
            let mut total = vec![0.0; lp];
            for h in group(layer, kv) {
                for (t, p) in layer.decode_positions.iter().enumerate() {
                    let q = rope(layer.decode_queries[h].row(t), p.0, theta);
                    let logits: Vec<f64> = keys.iter().map(|k| dot(&q, k) / (d as f64).sqrt()).collect();
                    for (a, w) in total.iter_mut().zip(softmax(&logits)) {
                        *a += w;
                    }
                }
            }
            total
        })
        .collect()
}

pub fn gold(layer: &LayerData, budget: usize) -> Vec<Vec<usize>> {
    decode_attention(layer).iter().map(|s| topk(s, budget)).collect()
}

/// Recall as an unreduced fraction `(hits, |gold|)`.
pub fn recall(gold: &[usize], pred: &[usize]) -> (usize, usize) {
    (gold.iter().filter(|g| pred.contains(g)).count(), gold.len())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Mean over layers and KV heads of the cosine between a window's
/// aggregated attention and the decode queries' aggregated attention,
/// for a first-`m` / last-`n` pseudo window and the last-`size` prompt
/// queries respectively.
pub fn alignment(layers: &[LayerData], first: usize, last: usize) -> (f64, f64) {
    let size = first + last;
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for layer in layers {
        let lp = layer.prompt_len();
        let truth = decode_attention(layer);
        let pseudo = dapq_scores(layer, &fmln_window(lp, first, last, 0), true);
        for kv in 0..layer.keys.len() {
            let mut snap = vec![0.0; lp];
            for m in causal(layer, kv) {
                for row in &m[lp - size..] {
                    for j in 0..lp {
                        snap[j] += row[j];
                    }
                }
            }
            a += cosine(&pseudo[kv], &truth[kv]);
            b += cosine(&snap, &truth[kv]);
            n += 1;
        }
    }
    (a / n as f64, b / n as f64)
}
