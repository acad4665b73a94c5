//! Loop-based reference implementation of the parser's forward pass. It
//! reads parameters by name and shares no code with the graph engine.

#![allow(dead_code)]

use delib::tensor::{ParamStore, Tensor};

pub type M = Vec<Vec<f64>>;

pub fn from_tensor(t: &Tensor) -> M {
    t.to_rows()
}

pub fn param(store: &ParamStore, name: &str) -> M {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).to_rows()
}

pub fn has(store: &ParamStore, name: &str) -> bool {
    store.find(name).is_some()
}

pub fn matmul(a: &M, b: &M) -> M {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &M) -> M {
    if a.is_empty() {
        return vec![];
    }
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn linear(store: &ParamStore, name: &str, x: &M) -> M {
    let mut y = matmul(x, &param(store, &format!("{name}.weight")));
    let bname = format!("{name}.bias");
    if has(store, &bname) {
        let b = &param(store, &bname)[0];
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn layer_norm(store: &ParamStore, name: &str, x: &M) -> M {
    let g = &param(store, &format!("{name}.gamma"))[0];
    let b = &param(store, &format!("{name}.beta"))[0];
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn pe(len: usize, dim: usize) -> M {
    (0..len)
        .map(|p| {
            (0..dim)
                .map(|c| {
                    let a = p as f64 / 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
                    if c % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Returns the projected output and per-head weight matrices. With
/// `causal = Some(s)`, query `r` sees keys `0..=s + r`.
pub fn mha(store: &ParamStore, name: &str, q_in: &M, kv_in: &M, heads: usize, causal: Option<usize>) -> (M, Vec<M>) {
    let q = linear(store, &format!("{name}.q"), q_in);
    let k = linear(store, &format!("{name}.k"), kv_in);
    let v = linear(store, &format!("{name}.v"), kv_in);
    let dim = q[0].len();
    let dh = dim / heads;
    let mut ctx = vec![vec![0.0; dim]; q.len()];
    let mut all_w = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut w_h = Vec::new();
        for (r, qr) in q.iter().enumerate() {
            let limit = causal.map_or(k.len(), |s| (s + r + 1).min(k.len()));
            let mut scores: Vec<f64> = (0..k.len())
                .map(|j| {
                    if j >= limit {
                        f64::NEG_INFINITY
                    } else {
                        cols.clone().map(|c| qr[c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    }
                })
                .collect();
            scores = softmax(&scores);
            for c in cols.clone() {
                ctx[r][c] = (0..k.len()).map(|j| scores[j] * v[j][c]).sum();
            }
            w_h.push(scores);
        }
        all_w.push(w_h);
    }
    (linear(store, &format!("{name}.o"), &ctx), all_w)
}

pub fn ff(store: &ParamStore, name: &str, x: &M) -> M {
    let h: M = linear(store, &format!("{name}.inner"), x)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(store, &format!("{name}.outer"), &h)
}

pub fn fuse(store: &ParamStore, heads: usize, text: &M, audio: &M) -> M {
    let (attn, _) = mha(store, "fusion.attn", text, audio, heads, None);
    let stack: M = text
        .iter()
        .zip(&attn)
        .map(|(t, a)| t.iter().chain(a).copied().collect())
        .collect();
    linear(store, "fusion.proj", &stack)
}

pub fn pool(store: &ParamStore, layers: usize, heads: usize, x: &M) -> M {
    let mut x = add(x, &pe(x.len(), x[0].len()));
    for i in 0..layers {
        let p = format!("pool.{i}");
        let n = layer_norm(store, &format!("{p}.norm1"), &x);
        x = add(&x, &mha(store, &format!("{p}.attn"), &n, &n, heads, None).0);
        let n = layer_norm(store, &format!("{p}.norm2"), &x);
        x = add(&x, &ff(store, &format!("{p}.ff"), &n));
    }
    if layers > 0 {
        x = layer_norm(store, "pool.norm", &x);
    }
    x
}

/// All decoder states for the input prefix `ids` (teacher forcing).
pub fn decoder_states(store: &ParamStore, layers: usize, heads: usize, memory: &M, ids: &[usize]) -> M {
    let table = param(store, "decoder.embed");
    let x: M = ids.iter().map(|&i| table[i].clone()).collect();
    let mut x = add(&x, &pe(ids.len(), table[0].len()));
    for i in 0..layers {
        let p = format!("decoder.{i}");
        let n = layer_norm(store, &format!("{p}.norm1"), &x);
        x = add(&x, &mha(store, &format!("{p}.self_attn"), &n, &n, heads, Some(0)).0);
        let n = layer_norm(store, &format!("{p}.norm2"), &x);
        x = add(&x, &mha(store, &format!("{p}.cross_attn"), &n, memory, heads, None).0);
        let n = layer_norm(store, &format!("{p}.norm3"), &x);
        x = add(&x, &ff(store, &format!("{p}.ff"), &n));
    }
    layer_norm(store, "decoder.norm", &x)
}

/// Brute-force copy distribution: for every vocabulary entry, sum the
/// attention of each position holding that id.
pub fn copy_dist(hyp: &[usize], omega: &[f64], vocab: usize) -> Vec<f64> {
    (0..vocab)
        .map(|w| {
            hyp.iter()
                .zip(omega)
                .filter(|(&id, _)| id == w)
                .map(|(_, &a)| a)
                .sum()
        })
        .collect()
}

pub struct Step {
    pub gen: Vec<f64>,
    pub copy: Vec<f64>,
    pub omega: Vec<f64>,
    pub gamma: Vec<f64>,
    pub p_copy: f64,
    pub out: Vec<f64>,
}

pub fn head(store: &ParamStore, copy_heads: usize, d: &[f64], e: &M, hyp: &[usize]) -> Step {
    let d_m = vec![d.to_vec()];
    let gen = softmax(&linear(store, "generator", &d_m)[0]);
    let vocab = gen.len();
    if !has(store, "copy.gate.weight") {
        return Step {
            out: gen.clone(),
            gen,
            copy: vec![],
            omega: vec![],
            gamma: vec![],
            p_copy: 0.0,
        };
    }
    let (gamma, ws) = mha(store, "copy.attn", &d_m, e, copy_heads, None);
    let omega: Vec<f64> = (0..e.len())
        .map(|j| ws.iter().map(|w| w[0][j]).sum::<f64>() / copy_heads as f64)
        .collect();
    let copy = copy_dist(hyp, &omega, vocab);
    let joined = vec![d.iter().chain(&gamma[0]).copied().collect::<Vec<_>>()];
    let z = linear(store, "copy.gate", &joined)[0][0];
    let p = 1.0 / (1.0 + (-z).exp());
    let out = gen.iter().zip(&copy).map(|(g, c)| (1.0 - p) * g + p * c).collect();
    Step {
        gen,
        copy,
        omega,
        gamma: gamma[0].clone(),
        p_copy: p,
        out,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff_m(a: &M, b: &Tensor) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    max_abs_diff(&flat, b.data())
}
