//! Margin-based angular loss heads: plain softmax, CosFace, ArcFace, AdaFace.
//!
//! Logits are cosines between the l2-normalized embedding and l2-normalized
//! class weights; the target column gets the additive margin, everything is
//! scaled by s before cross entropy.

use crate::config::HeadConfig;
use crate::error::Result;
use crate::graph::{Graph, MarginKind, Var};
use crate::params::{uniform_fan_in, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

pub const COS_CLAMP: f64 = 1e-7;
pub const ADAFACE_H: f32 = 0.33;
pub const ADAFACE_STAT_MOMENTUM: f32 = 0.01;

/// Class-weight matrix plus AdaFace norm statistics under `prefix`.
pub fn init_params(
    prefix: &str,
    n_classes: usize,
    dim: usize,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) {
    store.insert(
        &format!("{prefix}.class_weights"),
        uniform_fan_in(rng, &[n_classes, dim], dim),
        true,
    );
    // running feature-norm stats, adaface only; init matches its reference
    store.insert(
        &format!("{prefix}.adaface_mean"),
        Tensor::full(&[1], 20.0),
        false,
    );
    store.insert(
        &format!("{prefix}.adaface_std"),
        Tensor::full(&[1], 100.0),
        false,
    );
}

/// cos theta_j between each embedding row and each class weight row, clamped
/// away from +-1 to keep the arccos derivative finite.
pub fn cosine_logits<T: Scalar>(g: &mut Graph<T>, emb: Var, weights: Var) -> Result<Var> {
    let ne = g.l2_normalize(emb, T::from_f64(1e-12))?;
    let nw = g.l2_normalize(weights, T::from_f64(1e-12))?;
    let wt = g.transpose(nw, &[1, 0])?;
    let cos = g.matmul(ne, wt)?;
    let bound = T::from_f64(1.0 - COS_CLAMP);
    Ok(g.clamp(cos, -bound, bound))
}

/// Per-sample (g_angle, g_add) for AdaFace from detached feature norms and
/// the running norm statistics.
pub fn adaface_terms<T: Scalar>(
    norms: &[T],
    running_mean: f32,
    running_std: f32,
    margin: f32,
    h: f32,
) -> Vec<(T, T)> {
    let m = margin as f64;
    let mu = running_mean as f64;
    let sigma = (running_std as f64).max(1e-3);
    let h = h as f64;
    norms
        .iter()
        .map(|&n| {
            let z = (n.to_f64() - mu) / (sigma / h);
            let nhat = z.clamp(-1.0, 1.0);
            let g_angle = -m * nhat;
            let g_add = m * nhat + m;
            (T::from_f64(g_angle), T::from_f64(g_add))
        })
        .collect()
}

/// Batch mean/std of embedding norms, for the running-stat update.
pub fn norm_stats<T: Scalar>(norms: &[T]) -> (f32, f32) {
    let n = norms.len().max(1) as f64;
    let mean = norms.iter().map(|&v| v.to_f64()).sum::<f64>() / n;
    let var = norms
        .iter()
        .map(|&v| {
            let d = v.to_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean as f32, var.sqrt() as f32)
}

pub fn embedding_norms<T: Scalar>(g: &Graph<T>, emb: Var) -> Vec<T> {
    let shape = g.shape(emb).to_vec();
    let d = shape[1];
    g.data(emb)
        .data()
        .chunks(d)
        .map(|row| {
            row.iter()
                .fold(T::zero(), |a, &v| a + v * v)
                .sqrt()
        })
        .collect()
}

/// Margin-adjusted logits for a full head under `prefix`. For adaface the
/// per-sample g terms come from detached norms and the stored running stats.
pub fn head_logits<T: Scalar>(
    g: &mut Graph<T>,
    prefix: &str,
    bound: &Bound<T>,
    head: &HeadConfig,
    emb: Var,
    labels: &[usize],
) -> Result<Var> {
    let weights = bound.var(&format!("{prefix}.class_weights"))?;
    let cos = cosine_logits(g, emb, weights)?;
    let s = T::from_f64(head.scale as f64);
    let m = T::from_f64(head.margin() as f64);
    let ada;
    let ada_ref = if head.kind == MarginKind::Adaface {
        let norms = embedding_norms(g, emb);
        let mu = bound.buffer(&format!("{prefix}.adaface_mean"))?.data()[0].to_f64() as f32;
        let sd = bound.buffer(&format!("{prefix}.adaface_std"))?.data()[0].to_f64() as f32;
        ada = adaface_terms(&norms, mu, sd, head.margin(), ADAFACE_H);
        Some(ada.as_slice())
    } else {
        None
    };
    g.margin_logits(cos, labels, head.kind, s, m, ada_ref)
}

/// cross_entropy(margin_logits(cosine_logits(emb), labels)).
pub fn metric_loss<T: Scalar>(
    g: &mut Graph<T>,
    prefix: &str,
    bound: &Bound<T>,
    head: &HeadConfig,
    emb: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = head_logits(g, prefix, bound, head, emb, labels)?;
    g.cross_entropy(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::MarginKind;
    use rand::SeedableRng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn cosine_hand_cases() {
        let mut g = Graph::<f64>::new();
        let emb = g.constant(t64(&[1, 2], &[1.0, 1.0]));
        let w = g.constant(t64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -2.0, -2.0]));
        let cos = cosine_logits(&mut g, emb, w).unwrap();
        let d = g.data(cos).data();
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((d[0] - inv_sqrt2).abs() < 1e-9, "emb=[1,1], w=[1,0]");
        assert!((d[1] - inv_sqrt2).abs() < 1e-9);
        // antiparallel: clamped to -(1 - 1e-7)
        assert!((d[2] + (1.0 - COS_CLAMP)).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_zero() {
        let mut g = Graph::<f64>::new();
        let emb = g.constant(t64(&[1, 2], &[5.0, 0.0]));
        let w = g.constant(t64(&[1, 2], &[0.0, 3.0]));
        let cos = cosine_logits(&mut g, emb, w).unwrap();
        assert!(g.data(cos).data()[0].abs() < 1e-6);
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut g = Graph::<f64>::new();
        let e1 = g.constant(t64(&[1, 3], &[0.2, -0.7, 0.4]));
        let e2 = g.constant(t64(&[1, 3], &[0.2 * 37.0, -0.7 * 37.0, 0.4 * 37.0]));
        let w = g.constant(t64(&[2, 3], &[1.0, 0.5, -0.2, 0.0, 2.0, 1.0]));
        let c1 = cosine_logits(&mut g, e1, w).unwrap();
        let c2 = cosine_logits(&mut g, e2, w).unwrap();
        for (a, b) in g.data(c1).data().iter().zip(g.data(c2).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cosface_target_logit() {
        // cos=0.8, m=0.35, s=64 -> 64 * 0.45 = 28.8
        let mut g = Graph::<f64>::new();
        let cos = g.constant(t64(&[1, 2], &[0.8, 0.1]));
        let out = g
            .margin_logits(cos, &[0], MarginKind::Cosface, 64.0, 0.35, None)
            .unwrap();
        let d = g.data(out).data();
        assert!((d[0] - 28.8).abs() < 1e-9);
        assert_eq!(d[1], 0.1 * 64.0); // non-target bit-identical to s*cos
    }

    #[test]
    fn arcface_theta_zero() {
        // theta = 0 (cos = 1), m=0.45 -> exactly 64*cos(0.45)
        let mut g = Graph::<f64>::new();
        let cos = g.constant(t64(&[1, 2], &[1.0, 0.0]));
        let out = g
            .margin_logits(cos, &[0], MarginKind::Arcface, 64.0, 0.45, None)
            .unwrap();
        let expect = 64.0 * 0.45f64.cos();
        assert!((g.data(out).data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_margin_reduces_to_scaled_cosine() {
        let cos_vals = [0.83, -0.4, 0.12, 0.55, -0.91, 0.3];
        for kind in [
            MarginKind::Softmax,
            MarginKind::Cosface,
            MarginKind::Arcface,
            MarginKind::Adaface,
        ] {
            let mut g = Graph::<f64>::new();
            let cos = g.constant(t64(&[2, 3], &cos_vals));
            let ada = vec![(0.0, 0.0); 2];
            let out = g
                .margin_logits(cos, &[1, 2], kind, 64.0, 0.0, Some(&ada))
                .unwrap();
            for (o, c) in g.data(out).data().iter().zip(&cos_vals) {
                assert!(
                    (o - c * 64.0).abs() < 1e-9,
                    "{kind:?}: {o} vs {}",
                    c * 64.0
                );
            }
        }
    }

    #[test]
    fn softmax_kind_ignores_margin() {
        let cos_vals = [0.4, -0.2, 0.9];
        let mut g = Graph::<f64>::new();
        let cos = g.constant(t64(&[1, 3], &cos_vals));
        let a = g
            .margin_logits(cos, &[0], MarginKind::Softmax, 64.0, 0.0, None)
            .unwrap();
        let b = g
            .margin_logits(cos, &[0], MarginKind::Softmax, 64.0, 0.77, None)
            .unwrap();
        assert_eq!(g.data(a).data(), g.data(b).data());
    }

    #[test]
    fn target_logit_decreasing_in_margin() {
        for kind in [MarginKind::Cosface, MarginKind::Arcface] {
            let mut last = f64::INFINITY;
            for &m in &[0.0, 0.2, 0.4, 0.6] {
                let mut g = Graph::<f64>::new();
                let cos = g.constant(t64(&[1, 1], &[0.6]));
                let out = g.margin_logits(cos, &[0], kind, 1.0, m, None).unwrap();
                let v = g.data(out).data()[0];
                assert!(v < last, "{kind:?} not decreasing at m={m}");
                last = v;
            }
        }
    }

    #[test]
    fn single_class_loss_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_params("metric", 1, 4, &mut store, &mut rng);
        let head = HeadConfig {
            kind: MarginKind::Cosface,
            ..Default::default()
        };
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let emb = g.constant(t64(&[2, 4], &[0.3, -0.2, 0.9, 0.1, 1.0, 0.0, -0.4, 0.2]));
        let loss = metric_loss(&mut g, "metric", &bound, &head, emb, &[0, 0]).unwrap();
        assert_eq!(g.data(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn aligned_embedding_near_zero_loss() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_params("metric", 2, 2, &mut store, &mut rng);
        store
            .set(
                "metric.class_weights",
                Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap(),
            )
            .unwrap();
        let head = HeadConfig {
            kind: MarginKind::Cosface,
            scale: 64.0,
            margin: Some(0.35),
        };
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let emb = g.constant(t64(&[1, 2], &[5.0, 0.0]));
        let loss = metric_loss(&mut g, "metric", &bound, &head, emb, &[0]).unwrap();
        assert!(g.data(loss).item().unwrap() < 1e-10);
    }

    #[test]
    fn class_permutation_covariance() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_params("metric", 3, 4, &mut store, &mut rng);
        let head = HeadConfig {
            kind: MarginKind::Arcface,
            ..Default::default()
        };
        let emb_data = [0.3, -0.2, 0.9, 0.1, -0.6, 0.4, 0.2, 0.8];
        let mut g = Graph::<f64>::new();
        let bound = Bound::bind(&mut g, &store);
        let emb = g.constant(t64(&[2, 4], &emb_data));
        let l1 = metric_loss(&mut g, "metric", &bound, &head, emb, &[0, 2]).unwrap();
        let base = g.data(l1).item().unwrap();

        // permute classes (rotate weight rows) and labels accordingly
        let w = store.get("metric.class_weights").unwrap().clone();
        let mut rows: Vec<&[f32]> = w.data().chunks(4).collect();
        rows.rotate_left(1); // class j -> j-1 (mod 3)
        let permuted: Vec<f32> = rows.concat();
        store
            .set(
                "metric.class_weights",
                Tensor::new(vec![3, 4], permuted).unwrap(),
            )
            .unwrap();
        let mut g2 = Graph::<f64>::new();
        let bound2 = Bound::bind(&mut g2, &store);
        let emb2 = g2.constant(t64(&[2, 4], &emb_data));
        let l2 = metric_loss(&mut g2, "metric", &bound2, &head, emb2, &[2, 1]).unwrap();
        assert!((g2.data(l2).item().unwrap() - base).abs() < 1e-7);
    }

    #[test]
    fn adaface_terms_bounded() {
        let norms: Vec<f64> = vec![5.0, 20.0, 80.0];
        let m = 0.4f32 as f64; // the f32 margin widened, as adaface_terms sees it
        let terms = adaface_terms(&norms, 20.0, 10.0, 0.4, 0.33);
        for &(ga, gadd) in &terms {
            assert!(ga.abs() <= m + 1e-12);
            assert!((0.0..=2.0 * m + 1e-12).contains(&gadd));
        }
        // norm at the running mean: nhat = 0 -> g_angle 0, g_add = m
        assert!(terms[1].0.abs() < 1e-12);
        assert!((terms[1].1 - m).abs() < 1e-12);
    }
}
