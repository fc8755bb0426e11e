//! Straight-line scalar reimplementation of the decoder, the fused decoder
//! and the adapted text cross-attention, compared against the library.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemedit::autograd::Mat;
use stemedit::codec::TokenGrid;
use stemedit::fusion::{fused_decoder_forward, Adapters, FusionConfig, FusionParams};
use stemedit::lm::{BaseModel, DecoderBlock, LayerNormParams, LmConfig, TextEmbedding};
use stemedit::lora::{lora_cross_attention, LoraConfig, LoraPair, LoraSet};

type Rows = Vec<Vec<f64>>;

fn rows(m: &Mat) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut y = vec![0.0; w.ncols()];
    for (i, xi) in x.iter().enumerate() {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += xi * w[[i, j]];
        }
    }
    y
}

fn project(xs: &Rows, w: &Mat) -> Rows {
    xs.iter().map(|x| vecmat(x, w)).collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn norm(xs: &Rows, p: &LayerNormParams) -> Rows {
    xs.iter()
        .map(|x| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            x.iter().enumerate().map(|(j, v)| (v - mean) * inv * p.gamma[[0, j]] + p.beta[[0, j]]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Multi-head attention, one query at a time.
fn attend(q: &Rows, k: &Rows, v: &Rows, heads: usize, causal: bool, key_mask: Option<&[bool]>) -> Rows {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for (t, qt) in q.iter().enumerate() {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let allowed: Vec<usize> = (0..k.len())
                .filter(|&s| !(causal && s > t))
                .filter(|&s| key_mask.is_none_or(|m| m[s]))
                .collect();
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&s| cols.clone().map(|c| qt[c] * k[s][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (&s, e) in allowed.iter().zip(&exps) {
                for c in cols.clone() {
                    out[t][c] += e / total * v[s][c];
                }
            }
        }
    }
    out
}

fn sinusoid(t: usize, i: usize, d: usize) -> f64 {
    let angle = t as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn lora_weight(w: &Mat, pair: &LoraPair, scale: f64) -> Mat {
    let mut out = w.clone();
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            for r in 0..pair.a.nrows() {
                out[[i, j]] += scale * pair.a[[r, i]] * pair.b[[r, j]];
            }
        }
    }
    out
}

struct Fusion<'a> {
    params: &'a FusionParams,
    cond: Rows,
    lora: Option<(&'a LoraSet, f64)>,
}

/// Condition stream states per layer: `(q', k', v')`.
fn condition_stream(base: &BaseModel, f: &Fusion<'_>) -> Vec<(Rows, Rows, Rows)> {
    let t = f.cond.len();
    let mut z: Rows = vec![f.params.z0_cond.row(0).to_vec(); t];
    let mut out = Vec::new();
    for (m, b) in base.weights.blocks.iter().enumerate() {
        let mut lin = f.cond.clone();
        for factor in &f.params.linear_cond[m].factors {
            lin = project(&lin, factor);
        }
        let e: Rows = (0..t).map(|s| f.params.pos_embeddings[m].row(s).to_vec()).collect();
        let input = norm(&add(&add(&z, &lin), &e), &b.ln_self);
        let (q, k, v) = (project(&input, &b.self_attn.w_q), project(&input, &b.self_attn.w_k), project(&input, &b.self_attn.w_v));
        z = project(&attend(&q, &k, &v, base.config.n_heads, true, None), &b.self_attn.w_o);
        out.push((q, k, v));
    }
    out
}

fn block(
    base: &BaseModel,
    b: &DecoderBlock,
    m: usize,
    h: Rows,
    text: &TextEmbedding,
    fusion: Option<(&Fusion<'_>, &(Rows, Rows, Rows))>,
) -> Rows {
    let heads = base.config.n_heads;
    let a = norm(&h, &b.ln_self);
    let q = project(&a, &b.self_attn.w_q);
    let k = project(&a, &b.self_attn.w_k);
    let v = project(&a, &b.self_attn.w_v);
    let mut o = project(&attend(&q, &k, &v, heads, true, None), &b.self_attn.w_o);
    let (mut wq, mut wv) = (b.cross_attn.w_q.clone(), b.cross_attn.w_v.clone());
    if let Some((f, (qc, kc, vc))) = fusion {
        let g = f.params.gates[m][[0, 0]];
        let fused = project(&attend(&add(&q, qc), kc, vc, heads, false, None), &b.self_attn.w_o);
        for (row, extra) in o.iter_mut().zip(&fused) {
            for (x, y) in row.iter_mut().zip(extra) {
                *x += g * y;
            }
        }
        if let Some((l, scale)) = f.lora {
            wq = lora_weight(&wq, &l.layers[m].q, scale);
            wv = lora_weight(&wv, &l.layers[m].v, scale);
        }
    }
    let h = add(&h, &o);
    let c = norm(&h, &b.ln_cross);
    let tv = rows(&text.values);
    let att = attend(&project(&c, &wq), &project(&tv, &b.cross_attn.w_k), &project(&tv, &wv), heads, false, Some(&text.mask));
    let h = add(&h, &project(&att, &b.cross_attn.w_o));
    let f = norm(&h, &b.ln_ffn);
    let mut hid = project(&f, &b.ffn.w_in);
    for row in &mut hid {
        for (j, x) in row.iter_mut().enumerate() {
            *x = gelu(*x + b.ffn.b_in[[0, j]]);
        }
    }
    let mut out = project(&hid, &b.ffn.w_out);
    for row in &mut out {
        for (j, x) in row.iter_mut().enumerate() {
            *x += b.ffn.b_out[[0, j]];
        }
    }
    add(&h, &out)
}

/// Per-codebook `T×L` logits.
fn reference_forward(base: &BaseModel, input: &Rows, text: &TextEmbedding, fusion: Option<&Fusion<'_>>) -> Vec<Rows> {
    let d = base.config.d_model;
    let mut h: Rows =
        input.iter().enumerate().map(|(t, x)| x.iter().enumerate().map(|(i, v)| v + sinusoid(t, i, d)).collect()).collect();
    let cond = fusion.map(|f| condition_stream(base, f));
    for (m, b) in base.weights.blocks.iter().enumerate() {
        let hook = fusion.zip(cond.as_ref()).map(|(f, c)| (f, &c[m]));
        h = block(base, b, m, h, text, hook);
    }
    let hf = norm(&h, &base.weights.ln_final);
    base.weights.heads.iter().map(|w| project(&hf, w)).collect()
}

fn embed(base: &BaseModel, grid: &TokenGrid) -> Rows {
    let d = base.config.d_model;
    (0..grid.frames())
        .map(|t| {
            let mut row = vec![0.0; d];
            for n in 0..grid.n_codebooks() {
                for (i, x) in row.iter_mut().enumerate() {
                    *x += base.weights.embeddings[n][[grid.get(n, t), i]];
                }
            }
            row
        })
        .collect()
}

fn tiny() -> LmConfig {
    LmConfig { n_codebooks: 2, codebook_size: 6, n_layers: 2, d_model: 8, n_heads: 2, ffn_dim: 16, text_layers: 1, text_max_len: 8 }
}

fn random_grid(rng: &mut ChaCha8Rng, cfg: &LmConfig, t: usize) -> TokenGrid {
    let tokens = Array2::from_shape_simple_fn((cfg.n_codebooks, t), || rng.gen_range(0..cfg.codebook_size as u32));
    TokenGrid::new(tokens, cfg.codebook_size, 50).unwrap()
}

fn random_text(rng: &mut ChaCha8Rng, d: usize, masked_tail: bool) -> TextEmbedding {
    let values = Mat::from_shape_simple_fn((3, d), || rng.gen_range(-1.0..1.0));
    TextEmbedding::new(values, vec![true, true, !masked_tail]).unwrap()
}

fn perturb(rng: &mut ChaCha8Rng, m: &mut Mat, scale: f64) {
    m.mapv_inplace(|x| x + rng.gen_range(-scale..scale));
}

fn max_diff(lib: &[Mat], oracle: &[Rows]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, b) in lib.iter().zip(oracle) {
        assert_eq!(a.nrows(), b.len());
        for (ra, rb) in a.rows().into_iter().zip(b) {
            for (x, y) in ra.iter().zip(rb) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

#[test]
fn embedding_lookup_matches_per_cell_loop() {
    let base = BaseModel::init(&tiny(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = random_grid(&mut rng, &base.config, 9);
    let lib = base.embed_tokens(&grid).unwrap();
    let oracle = embed(&base, &grid);
    for t in 0..9 {
        for i in 0..8 {
            assert_eq!(lib[[t, i]], oracle[t][i]);
        }
    }
}

#[test]
fn base_forward_matches_scalar_reference() {
    let mut base = BaseModel::init(&tiny(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // Non-trivial norms and biases so every parameter is exercised.
    for b in &mut base.weights.blocks {
        for p in [&mut b.ln_self, &mut b.ln_cross, &mut b.ln_ffn] {
            perturb(&mut rng, &mut p.gamma, 0.3);
            perturb(&mut rng, &mut p.beta, 0.3);
        }
        perturb(&mut rng, &mut b.ffn.b_in, 0.3);
        perturb(&mut rng, &mut b.ffn.b_out, 0.3);
    }
    for case in 0..5 {
        let t = 1 + case * 2;
        let input = Mat::from_shape_simple_fn((t, 8), || rng.gen_range(-1.0..1.0));
        let text = random_text(&mut rng, 8, case % 2 == 1);
        let (logits, hidden) = base.forward(&input, &text).unwrap();
        assert_eq!(hidden.0.len(), 3);
        let oracle = reference_forward(&base, &rows(&input), &text, None);
        let diff = max_diff(&logits.0, &oracle);
        assert!(diff < 1e-6, "case {case}: {diff}");
    }
}

#[test]
fn fused_forward_matches_scalar_reference() {
    let cfg = tiny();
    let mut base = BaseModel::init(&cfg, 21).unwrap();
    base.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for bottleneck in [None, Some(3)] {
        let fusion_cfg = FusionConfig { t_max: 12, bottleneck, ..Default::default() };
        let lora_cfg = LoraConfig { rank: 2, scale: 0.7 };
        let mut adapters = Adapters::init(&cfg, &fusion_cfg, &lora_cfg, true, 5).unwrap();
        for g in &mut adapters.weights.fusion.gates {
            g[[0, 0]] = rng.gen_range(-1.0..1.0);
        }
        for layer in &mut adapters.weights.lora.layers {
            perturb(&mut rng, &mut layer.q.b, 0.5);
            perturb(&mut rng, &mut layer.v.b, 0.5);
        }
        for text_fusion in [true, false] {
            adapters.text_fusion = text_fusion;
            let target = random_grid(&mut rng, &cfg, 7);
            let condition = random_grid(&mut rng, &cfg, 7);
            let text = random_text(&mut rng, 8, true);
            let logits = fused_decoder_forward(&target, &condition, &text, &base, &adapters).unwrap();

            let mut input = vec![base.weights.sos.row(0).to_vec()];
            input.extend(embed(&base, &target).into_iter().take(6));
            let f = Fusion {
                params: &adapters.weights.fusion,
                cond: embed(&base, &condition),
                lora: text_fusion.then_some((&adapters.weights.lora, lora_cfg.scale)),
            };
            let oracle = reference_forward(&base, &input, &text, Some(&f));
            let diff = max_diff(&logits.0, &oracle);
            assert!(diff < 1e-6, "bottleneck {bottleneck:?} text_fusion {text_fusion}: {diff}");
        }
    }
}

#[test]
fn adapted_cross_attention_matches_hand_loop() {
    let cfg = LmConfig { n_layers: 1, d_model: 4, n_heads: 2, ..tiny() };
    let mut base = BaseModel::init(&cfg, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let set = |rng: &mut ChaCha8Rng| Mat::from_shape_simple_fn((4, 4), || (rng.gen_range(-4..=4) as f64) / 4.0);
    let ca = &mut base.weights.blocks[0].cross_attn;
    ca.w_q = set(&mut rng);
    ca.w_k = set(&mut rng);
    ca.w_v = set(&mut rng);
    ca.w_o = set(&mut rng);
    let pair = |rng: &mut ChaCha8Rng| LoraPair {
        a: Mat::from_shape_simple_fn((1, 4), || rng.gen_range(-1.0..1.0)),
        b: Mat::from_shape_simple_fn((1, 4), || rng.gen_range(-1.0..1.0)),
    };
    let lora = LoraSet { layers: vec![stemedit::lora::LoraLayer { q: pair(&mut rng), v: pair(&mut rng) }] };
    let lcfg = LoraConfig { rank: 1, scale: 1.0 };
    let music = Mat::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0));
    let text = random_text(&mut rng, 4, true);
    let lib = lora_cross_attention(&music, &text, 0, &base, &lora, &lcfg).unwrap();

    let ca = &base.weights.blocks[0].cross_attn;
    let wq = lora_weight(&ca.w_q, &lora.layers[0].q, 1.0);
    let wv = lora_weight(&ca.w_v, &lora.layers[0].v, 1.0);
    let tv = rows(&text.values);
    let att = attend(&project(&rows(&music), &wq), &project(&tv, &ca.w_k), &project(&tv, &wv), 2, false, Some(&text.mask));
    let oracle = project(&att, &ca.w_o);
    assert!(max_diff(&[lib], &[oracle]) < 1e-12);
    // The masked third text row must not matter.
    let mut shifted = text.clone();
    shifted.values.row_mut(2).fill(9.0);
    assert_eq!(
        lora_cross_attention(&music, &shifted, 0, &base, &lora, &lcfg).unwrap(),
        lora_cross_attention(&music, &text, 0, &base, &lora, &lcfg).unwrap()
    );
}
