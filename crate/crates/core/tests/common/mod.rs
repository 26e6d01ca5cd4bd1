//! Loop-based reference forward pass, written from the model definition
//! without the graph or tensor machinery.

#![allow(dead_code)]

use adaptformer::rng::{Rng, Stream};
use adaptformer::tuning::{Insertion, PromptDepth};
use adaptformer::vit::{BN_EPS, LN_EPS};
use adaptformer::{TuningMode, VitModel};

type Mat = Vec<Vec<f64>>;

fn p<'a>(m: &'a VitModel, name: &str) -> &'a [f64] {
    m.param(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

/// `x · W + b` with `W` stored `[in, out]` row-major.
fn linear(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let dout = b.len();
    let din = w.len() / dout;
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout).map(|o| b[o] + (0..din).map(|i| row[i] * w[i * dout + o]).sum::<f64>()).collect()
        })
        .collect()
}

fn layernorm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn attention(m: &VitModel, layer: usize, x: &Mat) -> Mat {
    let c = m.config();
    let (d, heads) = (c.embed_dim, c.num_heads);
    let dh = d / heads;
    let w = |s: &str| format!("blocks.{layer}.attn.{s}");
    let q = linear(x, p(m, &w("q.weight")), p(m, &w("q.bias")));
    let k = linear(x, p(m, &w("k.weight")), p(m, &w("k.bias")));
    let v = linear(x, p(m, &w("v.weight")), p(m, &w("v.bias")));
    let t = x.len();
    let mut merged = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                merged[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(&merged, p(m, &w("proj.weight")), p(m, &w("proj.bias")))
}

fn adapter(m: &VitModel, layer: usize, x: &Mat) -> Mat {
    let w = |s: &str| format!("blocks.{layer}.adapter.{s}");
    let down = linear(x, p(m, &w("down.weight")), p(m, &w("down.bias")));
    let act: Mat = down.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    linear(&act, p(m, &w("up.weight")), p(m, &w("up.bias")))
}

fn block(m: &VitModel, layer: usize, x: &Mat) -> Mat {
    let w = |s: &str| format!("blocks.{layer}.{s}");
    let h1 = layernorm(x, p(m, &w("norm1.weight")), p(m, &w("norm1.bias")));
    let xp = add(x, &attention(m, layer, &h1));
    let h2 = layernorm(&xp, p(m, &w("norm2.weight")), p(m, &w("norm2.bias")));
    let hidden: Mat = linear(&h2, p(m, &w("mlp.fc1.weight")), p(m, &w("mlp.fc1.bias")))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let mlp = linear(&hidden, p(m, &w("mlp.fc2.weight")), p(m, &w("mlp.fc2.bias")));
    let base = add(&mlp, &xp);
    match m.tuning() {
        TuningMode::AdaptFormer(a) if a.adapts(layer, m.config().depth) => {
            let src = match a.insertion {
                Insertion::Parallel => &h2,
                Insertion::Sequential => &mlp,
            };
            let branch = adapter(m, layer, src);
            base.iter().zip(&branch).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + a.scale * y).collect()).collect()
        }
        _ => base,
    }
}

fn rows(data: &[f64], d: usize) -> Mat {
    data.chunks(d).map(<[f64]>::to_vec).collect()
}

/// Token sequence of one sample entering the first block.
pub fn embed(m: &VitModel, image: &[f64]) -> Mat {
    let c = m.config();
    let (h, ps, ch, d) = (c.image_size, c.patch_size, c.channels, c.embed_dim);
    let grid = h / ps;
    let mut patches = Vec::new();
    for f in 0..c.num_frames {
        for gy in 0..grid {
            for gx in 0..grid {
                let mut v = Vec::with_capacity(ps * ps * ch);
                for y in 0..ps {
                    for x in 0..ps {
                        for k in 0..ch {
                            v.push(image[((f * h + gy * ps + y) * h + gx * ps + x) * ch + k]);
                        }
                    }
                }
                patches.push(v);
            }
        }
    }
    let mut seq = rows(p(m, "cls_token"), d);
    if c.seq_extra > 1 {
        seq.extend(rows(p(m, "extra_tokens"), d));
    }
    seq.extend(linear(&patches, p(m, "patch_embed.weight"), p(m, "patch_embed.bias")));
    let seq = add(&seq, &rows(p(m, "pos_embed"), d));
    match m.tuning() {
        TuningMode::Prompt(pc) if pc.depth == PromptDepth::Shallow => {
            let mut out = rows(p(m, "prompts.input"), d);
            out.extend(seq);
            out
        }
        _ => seq,
    }
}

/// Eval-phase CLS feature of one sample.
pub fn feature(m: &VitModel, image: &[f64]) -> Vec<f64> {
    let c = m.config();
    let d = c.embed_dim;
    let mut x = embed(m, image);
    let (deep, cls) = match m.tuning() {
        TuningMode::Prompt(pc) if pc.depth == PromptDepth::Deep => (pc.num_tokens, 0),
        TuningMode::Prompt(pc) => (0, pc.num_tokens),
        _ => (0, 0),
    };
    for layer in 0..c.depth {
        if deep > 0 {
            let mut with = rows(p(m, &format!("prompts.{layer}")), d);
            with.extend(x);
            x = block(m, layer, &with).split_off(deep);
        } else {
            x = block(m, layer, &x);
        }
    }
    layernorm(&x, p(m, "norm.weight"), p(m, "norm.bias")).swap_remove(cls)
}

/// Eval-phase logits of one sample.
pub fn logits(m: &VitModel, image: &[f64]) -> Vec<f64> {
    let mut f = feature(m, image);
    if m.config().head_norm {
        let (mean, var) = m.running_stats();
        for (j, v) in f.iter_mut().enumerate() {
            *v = (*v - mean[j]) / (var[j] + BN_EPS).sqrt();
        }
    }
    linear(&vec![f], p(m, "head.weight"), p(m, "head.bias")).swap_remove(0)
}

/// Uniform `[0, 1)` inputs of the model's sample length.
pub fn random_images(m: &VitModel, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::stream(seed, Stream::Test);
    (0..n).map(|_| (0..m.config().sample_len()).map(|_| rng.uniform()).collect()).collect()
}

pub fn refs(images: &[Vec<f64>]) -> Vec<&[f64]> {
    images.iter().map(Vec::as_slice).collect()
}

/// Fills every parameter whose name contains `needle` with `N(0, std²)`.
pub fn randomize(m: &mut VitModel, needle: &str, std: f64, seed: u64) {
    let mut rng = Rng::stream(seed, Stream::Test);
    for p in m.params_mut().iter_mut() {
        if p.name.contains(needle) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.normal_with(0.0, std));
        }
    }
}
