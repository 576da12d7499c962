//! Branch-2 loss head: feature map -> contextual sequence -> post-norm
//! transformer encoder stack -> mean pool -> linear or metric head.

use crate::config::{EncoderConfig, HeadConfig, HeadVariant, PositionalEncoding};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metric;
use crate::params::{uniform_fan_in, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;

pub fn init_params(
    cfg: &EncoderConfig,
    model_dim: usize,
    seq_len: usize,
    n_classes: usize,
    variant: HeadVariant,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) {
    let d = model_dim;
    if cfg.positional_encoding == PositionalEncoding::Learned {
        store.insert("tf.pos", uniform_fan_in(rng, &[seq_len, d], d), true);
    }
    for l in 0..cfg.num_layers {
        let p = format!("tf.l{l}");
        store.insert(&format!("{p}.attn.wqkv"), uniform_fan_in(rng, &[d, 3 * d], d), true);
        store.insert(&format!("{p}.attn.bqkv"), Tensor::zeros(&[3 * d]), true);
        store.insert(&format!("{p}.attn.wo"), uniform_fan_in(rng, &[d, d], d), true);
        store.insert(&format!("{p}.attn.bo"), Tensor::zeros(&[d]), true);
        store.insert(&format!("{p}.ln1.gain"), Tensor::full(&[d], 1.0), true);
        store.insert(&format!("{p}.ln1.bias"), Tensor::zeros(&[d]), true);
        let ff = d * cfg.feedforward_mult;
        store.insert(&format!("{p}.ff.w1"), uniform_fan_in(rng, &[d, ff], d), true);
        store.insert(&format!("{p}.ff.b1"), Tensor::zeros(&[ff]), true);
        store.insert(&format!("{p}.ff.w2"), uniform_fan_in(rng, &[ff, d], ff), true);
        store.insert(&format!("{p}.ff.b2"), Tensor::zeros(&[d]), true);
        store.insert(&format!("{p}.ln2.gain"), Tensor::full(&[d], 1.0), true);
        store.insert(&format!("{p}.ln2.bias"), Tensor::zeros(&[d]), true);
    }
    match variant {
        HeadVariant::Linear => {
            store.insert("tf.head.w", uniform_fan_in(rng, &[d, n_classes], d), true);
            store.insert("tf.head.b", Tensor::zeros(&[n_classes]), true);
        }
        HeadVariant::Metric => {
            metric::init_params("tf", n_classes, d, store, rng);
        }
    }
}

/// Split O_f [B x D_f x H_f x W_f] into the sequence [B x S_f x D_f] where
/// position (h, w) maps to index h*W_f + w.
pub fn to_sequence<T: Scalar>(g: &mut Graph<T>, fmap: Var) -> Result<Var> {
    let s = g.shape(fmap).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("to_sequence: expected 4-d map, got {:?}", s)));
    }
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    if h <= 1 || w <= 1 {
        return Err(Error::dim(format!(
            "to_sequence: {h}x{w} map violates the split rule (height > 1 and width > 1)"
        )));
    }
    let t = g.transpose(fmap, &[0, 2, 3, 1])?; // B x H x W x D
    g.reshape(t, vec![b, h * w, d])
}

/// Inverse of `to_sequence`, for round-trip checks.
pub fn from_sequence<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let s = g.shape(seq).to_vec();
    let (b, d) = (s[0], s[2]);
    let r = g.reshape(seq, vec![b, h, w, d])?;
    g.transpose(r, &[0, 3, 1, 2])
}

pub struct EncodeOut {
    pub out: Var,
    /// per-layer attention distributions [B x heads x S x S]
    pub attentions: Vec<Var>,
}

/// Post-norm encoder stack. Dropout is configured but fixed at 0 in this
/// artifact, so the forward pass is deterministic by construction.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    bound: &Bound<T>,
    seq: Var,
    _training: bool,
) -> Result<EncodeOut> {
    let s = g.shape(seq).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("encode: expected [B, S, D], got {:?}", s)));
    }
    let (b, sl, d) = (s[0], s[1], s[2]);
    cfg.validate(d)?;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let eps = T::from_f64(LN_EPS);

    let mut cur = seq;
    if cfg.positional_encoding == PositionalEncoding::Learned {
        let pos = bound.var("tf.pos")?;
        // broadcast [S, D] over the batch by stacking
        let stacked = g.concat(&vec![pos; b], 0)?;
        let pe = g.reshape(stacked, vec![b, sl, d])?;
        cur = g.add(cur, pe)?;
    }

    let mut attentions = Vec::new();
    for l in 0..cfg.num_layers {
        let p = format!("tf.l{l}");
        // shared QKV projection, split across heads
        let wqkv = bound.var(&format!("{p}.attn.wqkv"))?;
        let bqkv = bound.var(&format!("{p}.attn.bqkv"))?;
        let qkv = g.matmul(cur, wqkv)?;
        let qkv = g.add_broadcast(qkv, bqkv, 2)?;
        let split = |g: &mut Graph<T>, start: usize| -> Result<Var> {
            let part = g.slice(qkv, 2, start * d, d)?;
            let r = g.reshape(part, vec![b, sl, heads, dh])?;
            g.transpose(r, &[0, 2, 1, 3]) // B x h x S x dh
        };
        let q = split(g, 0)?;
        let k = split(g, 1)?;
        let v = split(g, 2)?;
        let kt = g.transpose(k, &[0, 1, 3, 2])?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let att = g.softmax(scaled, 3)?;
        attentions.push(att);
        let ctx = g.matmul(att, v)?;
        let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![b, sl, d])?;
        let wo = bound.var(&format!("{p}.attn.wo"))?;
        let bo = bound.var(&format!("{p}.attn.bo"))?;
        let proj = g.matmul(ctx, wo)?;
        let proj = g.add_broadcast(proj, bo, 2)?;
        let res1 = g.add(cur, proj)?;
        let g1 = bound.var(&format!("{p}.ln1.gain"))?;
        let b1 = bound.var(&format!("{p}.ln1.bias"))?;
        let normed1 = g.layernorm(res1, g1, b1, eps)?;

        let w1 = bound.var(&format!("{p}.ff.w1"))?;
        let fb1 = bound.var(&format!("{p}.ff.b1"))?;
        let ff = g.matmul(normed1, w1)?;
        let ff = g.add_broadcast(ff, fb1, 2)?;
        let ff = g.relu(ff);
        let w2 = bound.var(&format!("{p}.ff.w2"))?;
        let fb2 = bound.var(&format!("{p}.ff.b2"))?;
        let ff = g.matmul(ff, w2)?;
        let ff = g.add_broadcast(ff, fb2, 2)?;
        let res2 = g.add(normed1, ff)?;
        let g2 = bound.var(&format!("{p}.ln2.gain"))?;
        let b2 = bound.var(&format!("{p}.ln2.bias"))?;
        cur = g.layernorm(res2, g2, b2, eps)?;
    }
    Ok(EncodeOut {
        out: cur,
        attentions,
    })
}

/// Arithmetic mean over the S_f sequence positions.
pub fn mean_pool<T: Scalar>(g: &mut Graph<T>, seq: Var) -> Result<Var> {
    g.mean_axis(seq, 1)
}

pub fn head_linear<T: Scalar>(g: &mut Graph<T>, bound: &Bound<T>, pooled: Var) -> Result<Var> {
    let w = bound.var("tf.head.w")?;
    let b = bound.var("tf.head.b")?;
    let z = g.matmul(pooled, w)?;
    g.add_broadcast(z, b, 1)
}

pub fn head_metric<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound<T>,
    head: &HeadConfig,
    pooled: Var,
    labels: &[usize],
) -> Result<Var> {
    metric::head_logits(g, "tf", bound, head, pooled, labels)
}

///// Full branch-2 composition: split, (optional PE), encode, pool, head.
#[allow(clippy::too_many_arguments)]
pub fn transformer_logits<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    bound: &Bound<T>,
    fmap: Var,
    variant: HeadVariant,
    head: &HeadConfig,
    labels: Option<&[usize]>,
    training: bool,
) -> Result<Var> {
    let seq = to_sequence(g, fmap)?;
    let enc = encode(g, cfg, bound, seq, training)?;
    let pooled = mean_pool(g, enc.out)?;
    match variant {
        HeadVariant::Linear => head_linear(g, bound, pooled),
        HeadVariant::Metric => {
            let labels = labels.ok_or_else(|| {
                Error::config("metric head variant requires labels")
            })?;
            head_metric(g, bound, head, pooled, labels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn enc_store(cfg: &EncoderConfig, d: usize, s: usize, nc: usize, variant: HeadVariant) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        init_params(cfg, d, s, nc, variant, &mut store, &mut rng);
        store
    }

    #[test]
    fn to_sequence_shapes_and_roundtrip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 128 * 4 * 4).map(|i| (i as f64 * 0.013).sin()).collect();
        let fmap = g.constant(Tensor::new(vec![2, 128, 4, 4], data).unwrap());
        let seq = to_sequence(&mut g, fmap).unwrap();
        assert_eq!(g.shape(seq), &[2, 16, 128]);
        let back = from_sequence(&mut g, seq, 4, 4).unwrap();
        assert_eq!(g.data(back).data(), g.data(fmap).data());
    }

    #[test]
    fn to_sequence_row_major_positions() {
        // position (h, w) -> index h*W + w, values preserved exactly
        let mut g = Graph::<f64>::new();
        // 1 x 1 x 2 x 3 map with distinct values
        let fmap = g.constant(Tensor::new(vec![1, 1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let seq = to_sequence(&mut g, fmap).unwrap();
        assert_eq!(g.data(seq).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn split_rule_rejects_1x1() {
        let mut g = Graph::<f64>::new();
        let fmap = g.constant(Tensor::zeros(&[1, 8, 1, 1]));
        assert!(to_sequence(&mut g, fmap).is_err());
    }

    #[test]
    fn encode_preserves_shape_and_attention_rows_sum_to_one() {
        let cfg = EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            ..Default::default()
        };
        let store = enc_store(&cfg, 16, 6, 5, HeadVariant::Linear);
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..2 * 6 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let seq = g.constant(Tensor::new(vec![2, 6, 16], data).unwrap());
        let enc = encode(&mut g, &cfg, &bound, seq, false).unwrap();
        assert_eq!(g.shape(enc.out), &[2, 6, 16]);
        for att in &enc.attentions {
            let d = g.data(*att).data();
            for row in d.chunks(6) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_position_attention_is_one() {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            ..Default::default()
        };
        let store = enc_store(&cfg, 8, 1, 3, HeadVariant::Linear);
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let seq = g.constant(Tensor::full(&[1, 1, 8], 0.5));
        let enc = encode(&mut g, &cfg, &bound, seq, false).unwrap();
        for &v in g.data(enc.attentions[0]).data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zeroed_projections_reduce_to_layernorm_cascade() {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            ..Default::default()
        };
        let mut store = enc_store(&cfg, 8, 4, 3, HeadVariant::Linear);
        for p in ["tf.l0.attn.wo", "tf.l0.ff.w2"] {
            let shape = store.get(p).unwrap().shape().to_vec();
            store.set(p, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let data: Vec<f64> = (0..4 * 8).map(|i| (i as f64 * 0.31).cos()).collect();
        let seq = g.constant(Tensor::new(vec![1, 4, 8], data).unwrap());
        let enc = encode(&mut g, &cfg, &bound, seq, false).unwrap();
        // residual path dominates: output is layernorm(layernorm(x))
        let g1 = bound.var("tf.l0.ln1.gain").unwrap();
        let b1 = bound.var("tf.l0.ln1.bias").unwrap();
        let n1 = g.layernorm(seq, g1, b1, 1e-5).unwrap();
        let g2 = bound.var("tf.l0.ln2.gain").unwrap();
        let b2 = bound.var("tf.l0.ln2.bias").unwrap();
        let n2 = g.layernorm(n1, g2, b2, 1e-5).unwrap();
        for (a, b) in g.data(enc.out).data().iter().zip(g.data(n2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_hand_cases() {
        let mut g = Graph::<f64>::new();
        let seq = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap());
        let p = mean_pool(&mut g, seq).unwrap();
        assert_eq!(g.data(p).data(), &[2.0, 2.0]);

        let c = g.constant(Tensor::full(&[1, 5, 3], 0.7));
        let pc = mean_pool(&mut g, c).unwrap();
        for &v in g.data(pc).data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn head_linear_zero_and_identity() {
        let cfg = EncoderConfig::default();
        let mut store = enc_store(&cfg, 4, 4, 4, HeadVariant::Linear);
        store
            .set("tf.head.w", Tensor::zeros(&[4, 4]))
            .unwrap();
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let pooled = g.constant(Tensor::new(vec![1, 4], vec![0.1, -0.5, 2.0, 0.3]).unwrap());
        let z = head_linear(&mut g, &bound, pooled).unwrap();
        assert!(g.data(z).data().iter().all(|&v| v == 0.0));

        // identity weights pass the pooled vector through
        let eye: Vec<f32> = (0..16)
            .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        store.set("tf.head.w", Tensor::new(vec![4, 4], eye).unwrap()).unwrap();
        let mut g2 = Graph::<f64>::new();
        let bound2 = Bound::bind(&mut g2, &store);
        let pooled2 = g2.constant(Tensor::new(vec![1, 4], vec![0.1, -0.5, 2.0, 0.3]).unwrap());
        let z2 = head_linear(&mut g2, &bound2, pooled2).unwrap();
        for (a, b) in g2.data(z2).data().iter().zip(g2.data(pooled2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_logits_shapes_and_linear_ignores_labels() {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            ..Default::default()
        };
        let store = enc_store(&cfg, 8, 4, 10, HeadVariant::Linear);
        let head = HeadConfig::default();
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let data: Vec<f64> = (0..3 * 8 * 2 * 2).map(|i| (i as f64 * 0.11).sin()).collect();
        let fmap = g.constant(Tensor::new(vec![3, 8, 2, 2], data).unwrap());
        let a = transformer_logits(
            &mut g, &cfg, &bound, fmap, HeadVariant::Linear, &head, None, false,
        )
        .unwrap();
        assert_eq!(g.shape(a), &[3, 10]);
        let b = transformer_logits(
            &mut g, &cfg, &bound, fmap, HeadVariant::Linear, &head, Some(&[1, 2, 3]), false,
        )
        .unwrap();
        assert_eq!(g.data(a).data(), g.data(b).data());
    }

    #[test]
    fn metric_variant_requires_labels() {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            ..Default::default()
        };
        let store = enc_store(&cfg, 8, 4, 10, HeadVariant::Metric);
        let head = HeadConfig::default();
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let fmap = g.constant(Tensor::full(&[1, 8, 2, 2], 0.2));
        assert!(transformer_logits(
            &mut g, &cfg, &bound, fmap, HeadVariant::Metric, &head, None, false,
        )
        .is_err());
    }

    #[test]
    fn metric_variant_zero_margin_is_scaled_cosine() {
        let cfg = EncoderConfig {
            num_layers: 0,
            num_heads: 1,
            ..Default::default()
        };
        let store = enc_store(&cfg, 4, 4, 3, HeadVariant::Metric);
        let head = HeadConfig {
            kind: crate::graph::MarginKind::Cosface,
            scale: 64.0,
            margin: Some(0.0),
        };
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let pooled = g.constant(Tensor::new(vec![1, 4], vec![0.4, -0.1, 0.9, 0.2]).unwrap());
        let z = head_metric(&mut g, &bound, &head, pooled, &[1]).unwrap();
        let wvar = bound.var("tf.class_weights").unwrap();
        let cos = metric::cosine_logits(&mut g, pooled, wvar).unwrap();
        for (a, c) in g.data(z).data().iter().zip(g.data(cos).data()) {
            assert!((a - c * 64.0).abs() < 1e-12);
        }
    }
}
