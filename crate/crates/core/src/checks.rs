//! The gradient-check suite: one item per differentiable operation plus the
//! three composite paths (metric branch, transformer branch, combined loss),
//! all run at 64-bit against the central-finite-difference oracle.

use crate::config::{EncoderConfig, HeadConfig, RunConfig};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::MarginKind;
use crate::model::Model;
use crate::params::Bound;
use crate::tensor::Tensor;
use crate::{metric, transformer};

pub const OP_THRESHOLD: f64 = 1e-5;
pub const NORM_THRESHOLD: f64 = 1e-4;
const EPS: f64 = 1e-5;

pub struct CheckItem {
    pub name: &'static str,
    pub threshold: f64,
    pub run: fn() -> Result<f64>,
}

pub struct CheckResult {
    pub name: &'static str,
    pub threshold: f64,
    pub error: Result<f64>,
}

fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(f).collect()).expect("length by construction")
}

/// Smooth pseudo-random values bounded away from relu/prelu kinks and
/// clamp edges.
fn smooth(i: usize) -> f64 {
    let v = (i as f64 * 0.7131 + 0.31).sin() * 0.8;
    if v.abs() < 0.05 {
        0.05 + v
    } else {
        v
    }
}

fn check_matmul() -> Result<f64> {
    let a = t(&[3, 4], smooth);
    let b = t(&[4, 2], |i| smooth(i + 17));
    grad_check(
        |g, v| {
            let z = g.matmul(v[0], v[1])?;
            Ok(g.sum_all(z))
        },
        &[a, b],
        EPS,
    )
}

fn check_conv2d() -> Result<f64> {
    let x = t(&[2, 2, 5, 5], smooth);
    let k = t(&[3, 2, 3, 3], |i| smooth(i + 41));
    grad_check(
        |g, v| {
            let z = g.conv2d(v[0], v[1], 2, 1)?;
            Ok(g.sum_all(z))
        },
        &[x, k],
        EPS,
    )
}

fn check_relu() -> Result<f64> {
    let x = t(&[2, 6], smooth);
    grad_check(
        |g, v| {
            let z = g.relu(v[0]);
            let z2 = g.mul(z, z)?;
            Ok(g.sum_all(z2))
        },
        &[x],
        EPS,
    )
}

fn check_prelu() -> Result<f64> {
    let x = t(&[2, 3, 4, 4], smooth);
    let slope = t(&[3], |i| 0.2 + 0.1 * i as f64);
    grad_check(
        |g, v| {
            let z = g.prelu(v[0], v[1], 1)?;
            let z2 = g.mul(z, z)?;
            Ok(g.sum_all(z2))
        },
        &[x, slope],
        EPS,
    )
}

fn check_exp_log() -> Result<f64> {
    let x = t(&[2, 4], |i| 0.3 + 0.1 * (i as f64 * 0.9).cos().abs());
    grad_check(
        |g, v| {
            let e = g.exp(v[0]);
            let l = g.log(e)?;
            let m = g.mul(l, e)?;
            Ok(g.sum_all(m))
        },
        &[x],
        EPS,
    )
}

fn check_sqrt() -> Result<f64> {
    let x = t(&[5], |i| 0.5 + 0.3 * (i as f64 * 1.3).sin().abs());
    grad_check(
        |g, v| {
            let s = g.sqrt(v[0])?;
            let m = g.mul(s, s)?;
            let m2 = g.mul(m, s)?;
            Ok(g.sum_all(m2))
        },
        &[x],
        EPS,
    )
}

fn check_softmax() -> Result<f64> {
    let x = t(&[3, 5], smooth);
    grad_check(
        |g, v| {
            let s = g.softmax(v[0], 1)?;
            let sq = g.mul(s, s)?;
            Ok(g.sum_all(sq))
        },
        &[x],
        EPS,
    )
}

fn check_cross_entropy() -> Result<f64> {
    let x = t(&[3, 4], smooth);
    grad_check(|g, v| g.cross_entropy(v[0], &[0, 2, 3]), &[x], EPS)
}

fn check_layernorm() -> Result<f64> {
    let x = t(&[2, 3, 6], smooth);
    let gain = t(&[6], |i| 0.8 + 0.1 * i as f64);
    let bias = t(&[6], |i| smooth(i + 3));
    grad_check(
        |g, v| {
            let n = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            let sq = g.mul(n, n)?;
            Ok(g.sum_all(sq))
        },
        &[x, gain, bias],
        EPS,
    )
}

fn check_batchnorm() -> Result<f64> {
    let x = t(&[3, 2, 3, 3], smooth);
    let gain = t(&[2], |i| 0.9 + 0.2 * i as f64);
    let bias = t(&[2], |i| 0.1 * i as f64);
    let rm = Tensor::zeros(&[2]);
    let rv = Tensor::full(&[2], 1.0);
    grad_check(
        |g, v| {
            let (n, _) = g.batchnorm2d(v[0], v[1], v[2], &rm, &rv, true, 1e-5)?;
            let sq = g.mul(n, n)?;
            Ok(g.sum_all(sq))
        },
        &[x, gain, bias],
        EPS,
    )
}

fn check_l2_normalize() -> Result<f64> {
    let x = t(&[3, 5], smooth);
    grad_check(
        |g, v| {
            let n = g.l2_normalize(v[0], 1e-12)?;
            let w = t(&[3, 5], |i| smooth(i + 7));
            let wc = g.constant(w);
            let m = g.mul(n, wc)?;
            Ok(g.sum_all(m))
        },
        &[x],
        EPS,
    )
}

fn margin_check(kind: MarginKind) -> Result<f64> {
    // cosines well inside (-1, 1); adaface uses fixed per-sample g terms
    let cos = t(&[2, 3], |i| 0.6 * (i as f64 * 0.83 + 0.2).sin());
    let ada = vec![(-0.2, 0.6), (0.3, 0.1)];
    grad_check(
        move |g, v| {
            let ada_ref = if kind == MarginKind::Adaface {
                Some(ada.as_slice())
            } else {
                None
            };
            let z = g.margin_logits(v[0], &[0, 2], kind, 64.0, 0.35, ada_ref)?;
            g.cross_entropy(z, &[0, 2])
        },
        &[cos],
        EPS,
    )
}

fn check_margin_cosface() -> Result<f64> {
    margin_check(MarginKind::Cosface)
}

fn check_margin_arcface() -> Result<f64> {
    margin_check(MarginKind::Arcface)
}

fn check_margin_adaface() -> Result<f64> {
    margin_check(MarginKind::Adaface)
}

fn check_attention_block() -> Result<f64> {
    // one encoder layer over a [1 x 4 x 4] sequence, wrt the sequence
    use rand::SeedableRng;
    let cfg = EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        ..Default::default()
    };
    let mut store = crate::params::ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    transformer::init_params(
        &cfg,
        4,
        4,
        3,
        crate::config::HeadVariant::Linear,
        &mut store,
        &mut rng,
    );
    let seq = t(&[1, 4, 4], smooth);
    grad_check(
        move |g, v| {
            let bound = Bound::bind(g, &store);
            let enc = transformer::encode(g, &cfg, &bound, v[0], true)?;
            let sq = g.mul(enc.out, enc.out)?;
            Ok(g.sum_all(sq))
        },
        &[seq],
        EPS,
    )
}

/// Smallest config that satisfies the split rule: one stage, 8x8 input,
/// 4x4 final map.
fn tiny_model() -> Result<(Model, crate::params::ParamStore)> {
    let mut cfg = RunConfig::default();
    cfg.backbone.input_size = (3, 8, 8);
    cfg.backbone.stage_channels = vec![6];
    cfg.backbone.blocks_per_stage = vec![1];
    cfg.backbone.embedding_dim = 8;
    cfg.encoder.num_layers = 1;
    cfg.encoder.num_heads = 2;
    cfg.head.kind = MarginKind::Arcface;
    let model = Model::new(cfg, 3)?;
    let store = model.init_params(11)?;
    Ok((model, store))
}

fn check_composite_metric() -> Result<f64> {
    let (model, store) = tiny_model()?;
    let x = t(&[2, 3, 8, 8], |i| smooth(i) * 0.5);
    let w = t(&[3, 8], |i| smooth(i + 13) * 0.4);
    let labels = [0usize, 2];
    let head = HeadConfig {
        kind: MarginKind::Arcface,
        ..Default::default()
    };
    grad_check(
        move |g, v| {
            let mut bound = Bound::bind(g, &store);
            bound.override_var("metric.class_weights", v[1]);
            let (_, emb, _) = crate::backbone::forward(g, &model.cfg.backbone, &bound, v[0], true)?;
            metric::metric_loss(g, "metric", &bound, &head, emb, &labels)
        },
        &[x, w],
        EPS,
    )
}

fn check_composite_transformer() -> Result<f64> {
    let (model, store) = tiny_model()?;
    let x = t(&[2, 3, 8, 8], |i| smooth(i) * 0.5);
    let wqkv = t(&[6, 18], |i| smooth(i + 29) * 0.3);
    let labels = [1usize, 2];
    grad_check(
        move |g, v| {
            let mut bound = Bound::bind(g, &store);
            bound.override_var("tf.l0.attn.wqkv", v[1]);
            let (fmap, _, _) =
                crate::backbone::forward(g, &model.cfg.backbone, &bound, v[0], true)?;
            let logits = transformer::transformer_logits(
                g,
                &model.cfg.encoder,
                &bound,
                fmap,
                model.cfg.train.head_variant,
                &model.cfg.head,
                Some(&labels),
                true,
            )?;
            g.cross_entropy(logits, &labels)
        },
        &[x, wqkv],
        EPS,
    )
}

fn check_composite_combined() -> Result<f64> {
    let (model, store) = tiny_model()?;
    let x = t(&[2, 3, 8, 8], |i| smooth(i) * 0.5);
    let labels = [0usize, 1];
    grad_check(
        move |g, v| {
            let bound = Bound::bind(g, &store);
            let out = model.forward_losses(g, &bound, v[0], &labels, true)?;
            Ok(out.loss_total)
        },
        &[x],
        EPS,
    )
}

pub fn suite() -> Vec<CheckItem> {
    vec![
        CheckItem { name: "matmul", threshold: OP_THRESHOLD, run: check_matmul },
        CheckItem { name: "conv2d", threshold: OP_THRESHOLD, run: check_conv2d },
        CheckItem { name: "relu", threshold: OP_THRESHOLD, run: check_relu },
        CheckItem { name: "prelu", threshold: OP_THRESHOLD, run: check_prelu },
        CheckItem { name: "exp_log", threshold: OP_THRESHOLD, run: check_exp_log },
        CheckItem { name: "sqrt", threshold: OP_THRESHOLD, run: check_sqrt },
        CheckItem { name: "softmax", threshold: OP_THRESHOLD, run: check_softmax },
        CheckItem { name: "cross_entropy", threshold: OP_THRESHOLD, run: check_cross_entropy },
        CheckItem { name: "layernorm", threshold: NORM_THRESHOLD, run: check_layernorm },
        CheckItem { name: "batchnorm", threshold: NORM_THRESHOLD, run: check_batchnorm },
        CheckItem { name: "l2_normalize", threshold: OP_THRESHOLD, run: check_l2_normalize },
        CheckItem { name: "margin_cosface", threshold: OP_THRESHOLD, run: check_margin_cosface },
        CheckItem { name: "margin_arcface", threshold: OP_THRESHOLD, run: check_margin_arcface },
        CheckItem { name: "margin_adaface", threshold: OP_THRESHOLD, run: check_margin_adaface },
        CheckItem { name: "attention_block", threshold: NORM_THRESHOLD, run: check_attention_block },
        CheckItem { name: "composite_metric_branch", threshold: NORM_THRESHOLD, run: check_composite_metric },
        CheckItem { name: "composite_transformer_branch", threshold: NORM_THRESHOLD, run: check_composite_transformer },
        CheckItem { name: "composite_combined_loss", threshold: NORM_THRESHOLD, run: check_composite_combined },
    ]
}

/// Run the full suite (optionally filtered by a substring) and collect the
/// worst relative error per item.
pub fn run_suite(only: Option<&str>) -> Vec<CheckResult> {
    suite()
        .into_iter()
        .filter(|item| only.map(|f| item.name.contains(f)).unwrap_or(true))
        .map(|item| CheckResult {
            name: item.name,
            threshold: item.threshold,
            error: (item.run)(),
        })
        .collect()
}
