//! Verification-protocol evaluation over embeddings, and the inter/intra
//! class variance analysis.

use crate::data::{normalize, LabeledDataset, PairList};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub struct EmbeddingSet {
    /// N x eps, row-major
    pub matrix: Tensor<f32>,
    pub labels: Vec<usize>,
    pub normalized: bool,
}

impl EmbeddingSet {
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.matrix.shape()[1];
        &self.matrix.data()[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub accuracy: f64,
    pub best_threshold: f64,
    /// (far, tar) points, far nondecreasing
    pub roc: Vec<(f64, f64)>,
    /// requested FAR level -> interpolated TAR
    pub tar_at_far: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub intra: f64,
    pub inter: f64,
    /// None when intra is exactly zero (ratio undefined / infinite)
    pub ratio: Option<f64>,
    pub excluded_classes: Vec<usize>,
}

/// One l2-normalized embedding per image, eval mode, no augmentation.
pub fn embed_dataset(
    model: &Model,
    store: &ParamStore,
    dataset: &LabeledDataset,
    batch_size: usize,
) -> Result<EmbeddingSet> {
    let eps = model.cfg.backbone.embedding_dim;
    let mut matrix = Vec::with_capacity(dataset.len() * eps);
    let (c, h, w) = model.cfg.backbone.input_size;
    for chunk in dataset.images.chunks(batch_size.max(1)) {
        let b = chunk.len();
        let mut data = Vec::with_capacity(b * c * h * w);
        for img in chunk {
            let t = normalize(img);
            if t.shape() != [c, h, w] {
                return Err(Error::dim(format!(
                    "image {}x{} does not match configured input {:?}",
                    img.width, img.height, model.cfg.backbone.input_size
                )));
            }
            data.extend_from_slice(t.data());
        }
        let mut g = Graph::<f32>::new();
        let bound = Bound::bind(&mut g, store);
        let x = g.constant(Tensor::new(vec![b, c, h, w], data)?);
        let emb = model.embed(&mut g, &bound, x)?;
        let norm = g.l2_normalize(emb, 1e-12)?;
        matrix.extend_from_slice(g.data(norm).data());
    }
    Ok(EmbeddingSet {
        matrix: Tensor::new(vec![dataset.len(), eps], matrix)?,
        labels: dataset.labels.clone(),
        normalized: true,
    })
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// k-fold cross-validated verification over (similarity, same-identity)
/// scores. Threshold is picked on k-1 folds by accuracy and applied to the
/// held-out fold; reported accuracy is the mean over folds.
pub fn verify_scores(scores: &[(f64, bool)], folds: usize) -> Result<VerificationReport> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data(
            "verification needs both positive and negative pairs",
        ));
    }
    let folds = folds.max(1);
    if n_pos < folds || n_neg < folds {
        return Err(Error::data(format!(
            "need at least {folds} positive and negative pairs for {folds}-fold validation"
        )));
    }

    // candidate thresholds: midpoints between adjacent distinct scores, plus
    // sentinels outside the observed range (equal scores collapse to one step)
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.0).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    let mut candidates = Vec::with_capacity(sorted.len() + 1);
    candidates.push(sorted[0] - 1.0);
    for w in sorted.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(sorted[sorted.len() - 1] + 1.0);

    // stratified round-robin fold assignment so every fold sees both pair
    // kinds even when the input groups positives and negatives together
    let mut pos_seen = 0usize;
    let mut neg_seen = 0usize;
    let fold_of: Vec<usize> = scores
        .iter()
        .map(|&(_, same)| {
            let c = if same { &mut pos_seen } else { &mut neg_seen };
            let f = *c % folds;
            *c += 1;
            f
        })
        .collect();

    let acc_at = |thr: f64, include_fold: Option<usize>, exclude_fold: Option<usize>| -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (i, &(s, same)) in scores.iter().enumerate() {
            let fold = fold_of[i];
            if let Some(f) = include_fold {
                if fold != f {
                    continue;
                }
            }
            if let Some(f) = exclude_fold {
                if fold == f {
                    continue;
                }
            }
            total += 1;
            if (s >= thr) == same {
                correct += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    };

    let mut fold_acc = 0.0;
    let mut thresholds = Vec::with_capacity(folds);
    for f in 0..folds {
        // best training accuracy is usually reached on a plateau of adjacent
        // candidates; take the plateau midpoint rather than its edge so the
        // held-out fold is not judged at the training folds' score boundary
        let mut best = f64::NEG_INFINITY;
        let mut lo = candidates[0];
        let mut hi = candidates[0];
        for &t in &candidates {
            let a = acc_at(t, None, Some(f));
            if a > best {
                best = a;
                lo = t;
                hi = t;
            } else if a == best {
                hi = t;
            }
        }
        let thr = (lo + hi) / 2.0;
        thresholds.push(thr);
        fold_acc += acc_at(thr, Some(f), None);
    }
    let accuracy = fold_acc / folds as f64;
    let best_threshold = thresholds.iter().sum::<f64>() / folds as f64;

    // ROC over all scores
    let mut roc = Vec::with_capacity(candidates.len());
    for &t in candidates.iter().rev() {
        let tp = scores.iter().filter(|&&(s, same)| same && s >= t).count();
        let fp = scores.iter().filter(|&&(s, same)| !same && s >= t).count();
        roc.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }

    let levels = [1e-2, 1e-3, 1e-4];
    let tar_at_far = levels
        .iter()
        .map(|&far| (far, interpolate_tar(&roc, far)))
        .collect();

    Ok(VerificationReport {
        accuracy,
        best_threshold,
        roc,
        tar_at_far,
    })
}

/// Linear interpolation of TAR at a FAR level between adjacent ROC points.
fn interpolate_tar(roc: &[(f64, f64)], far: f64) -> f64 {
    let mut prev = (0.0, 0.0);
    for &(f, t) in roc {
        if f >= far {
            if (f - prev.0).abs() < 1e-15 {
                return t.max(prev.1);
            }
            let w = (far - prev.0) / (f - prev.0);
            return prev.1 + w * (t - prev.1);
        }
        prev = (f, t);
    }
    prev.1
}

pub fn verification_accuracy(
    pairs: &PairList,
    embeddings: &EmbeddingSet,
    folds: usize,
) -> Result<VerificationReport> {
    let scores: Vec<(f64, bool)> = pairs
        .entries
        .iter()
        .map(|&(a, b, same)| (cosine(embeddings.row(a), embeddings.row(b)), same))
        .collect();
    verify_scores(&scores, folds)
}

/// intra = mean over classes of trace of within-class covariance; inter =
/// trace of covariance of class centroids around the global centroid.
pub fn variance_report(embeddings: &EmbeddingSet) -> Result<VarianceReport> {
    let n = embeddings.labels.len();
    let d = embeddings.matrix.shape()[1];
    let n_classes = embeddings.labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    if n_classes < 2 {
        return Err(Error::data("variance report needs at least two classes"));
    }
    let mut counts = vec![0usize; n_classes];
    let mut centroids = vec![vec![0.0f64; d]; n_classes];
    for i in 0..n {
        let l = embeddings.labels[i];
        counts[l] += 1;
        for (c, &v) in centroids[l].iter_mut().zip(embeddings.row(i)) {
            *c += v as f64;
        }
    }
    let mut excluded = Vec::new();
    let mut kept = Vec::new();
    for c in 0..n_classes {
        if counts[c] >= 2 {
            kept.push(c);
            for v in centroids[c].iter_mut() {
                *v /= counts[c] as f64;
            }
        } else {
            if counts[c] == 1 {
                eprintln!("warning: class {c} has a single sample; excluded from variance report");
            }
            excluded.push(c);
        }
    }
    if kept.len() < 2 {
        return Err(Error::data(
            "variance report needs at least two classes with two or more samples",
        ));
    }

    // intra: mean squared deviation from the class centroid, summed over dims
    let mut intra = 0.0f64;
    for &c in &kept {
        let mut acc = 0.0f64;
        for i in 0..n {
            if embeddings.labels[i] != c {
                continue;
            }
            for (j, &v) in embeddings.row(i).iter().enumerate() {
                let dlt = v as f64 - centroids[c][j];
                acc += dlt * dlt;
            }
        }
        intra += acc / counts[c] as f64;
    }
    intra /= kept.len() as f64;

    // inter: trace of covariance of centroids around the global centroid
    let mut global = vec![0.0f64; d];
    for &c in &kept {
        for (gj, &cj) in global.iter_mut().zip(&centroids[c]) {
            *gj += cj;
        }
    }
    for g in global.iter_mut() {
        *g /= kept.len() as f64;
    }
    let mut inter = 0.0f64;
    for &c in &kept {
        for j in 0..d {
            let dlt = centroids[c][j] - global[j];
            inter += dlt * dlt;
        }
    }
    inter /= kept.len() as f64;

    if intra == 0.0 && inter == 0.0 {
        return Err(Error::data(
            "all embeddings identical: variance ratio undefined",
        ));
    }
    let ratio = if intra == 0.0 {
        None
    } else {
        Some(inter / intra)
    };
    Ok(VarianceReport {
        intra,
        inter,
        ratio,
        excluded_classes: excluded,
    })
}

/// CSV lines for the verification report.
pub fn verification_csv(report: &VerificationReport) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("accuracy,{:.6}\n", report.accuracy));
    out.push_str(&format!("best_threshold,{:.6}\n", report.best_threshold));
    for &(far, tar) in &report.tar_at_far {
        out.push_str(&format!("tar_at_far_{far:e},{tar:.6}\n"));
    }
    out
}

pub fn roc_csv(report: &VerificationReport) -> String {
    let mut out = String::from("far,tar\n");
    for &(far, tar) in &report.roc {
        out.push_str(&format!("{far:.8},{tar:.8}\n"));
    }
    out
}

/// Human-readable table in the style of the variance comparison table.
pub fn variance_table(label: &str, report: &VarianceReport) -> String {
    let ratio = match report.ratio {
        Some(r) => format!("{r:.2}"),
        None => "inf".to_string(),
    };
    let mut out = String::new();
    out.push_str("| Method | Intra-Class Variance | Inter-Class Variance | Inter/Intra Ratio |\n");
    out.push_str("|--------|----------------------|----------------------|-------------------|\n");
    out.push_str(&format!(
        "| {label} | {:.2} | {:.2} | {ratio} |\n",
        report.intra, report.inter
    ));
    out
}

pub fn variance_csv(report: &VarianceReport) -> String {
    let ratio = match report.ratio {
        Some(r) => format!("{r:.6}"),
        None => "inf".to_string(),
    };
    format!(
        "intra,inter,ratio\n{:.6},{:.6},{ratio}\n",
        report.intra, report.inter
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embset(rows: &[&[f32]], labels: &[usize]) -> EmbeddingSet {
        let d = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingSet {
            matrix: Tensor::new(vec![rows.len(), d], data).unwrap(),
            labels: labels.to_vec(),
            normalized: false,
        }
    }

    #[test]
    fn perfectly_separated_scores() {
        let mut scores = Vec::new();
        for i in 0..20 {
            scores.push((0.8 + 0.01 * i as f64, true));
            scores.push((0.2 - 0.005 * i as f64, false));
        }
        let r = verify_scores(&scores, 10).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for &(_, tar) in &r.tar_at_far {
            assert_eq!(tar, 1.0);
        }
    }

    #[test]
    fn four_pair_two_fold_case() {
        // pos {0.9, 0.8}, neg {0.2, 0.1}: accuracy 1.0, threshold in (0.2, 0.8)
        let scores = vec![(0.9, true), (0.2, false), (0.8, true), (0.1, false)];
        let r = verify_scores(&scores, 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.best_threshold > 0.2 && r.best_threshold < 0.8);
    }

    #[test]
    fn shuffled_labels_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let scores: Vec<(f64, bool)> = (0..1000)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_bool(0.5)))
            .collect();
        let r = verify_scores(&scores, 10).unwrap();
        assert!((r.accuracy - 0.5).abs() < 0.05, "accuracy {}", r.accuracy);
    }

    #[test]
    fn monotone_transform_invariance() {
        let scores: Vec<(f64, bool)> = (0..40)
            .map(|i| ((i as f64 * 0.713).sin(), i % 3 == 0))
            .collect();
        let transformed: Vec<(f64, bool)> = scores
            .iter()
            .map(|&(s, l)| ((s * 3.0).exp(), l)) // strictly increasing
            .collect();
        let a = verify_scores(&scores, 5).unwrap();
        let b = verify_scores(&transformed, 5).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn roc_tar_nondecreasing_in_far() {
        let scores: Vec<(f64, bool)> = (0..60)
            .map(|i| ((i as f64 * 0.37).cos(), i % 2 == 0))
            .collect();
        let r = verify_scores(&scores, 5).unwrap();
        for w in r.roc.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1 - 1e-12);
        }
    }

    #[test]
    fn degenerate_pair_lists_rejected() {
        let all_pos: Vec<(f64, bool)> = (0..10).map(|i| (i as f64, true)).collect();
        assert!(verify_scores(&all_pos, 2).is_err());
    }

    #[test]
    fn variance_two_centroids_zero_spread() {
        // classes at centroids +-e1 with zero spread: intra 0, inter 1, ratio flagged
        let r = variance_report(&embset(
            &[
                &[1.0, 0.0],
                &[1.0, 0.0],
                &[-1.0, 0.0],
                &[-1.0, 0.0],
            ],
            &[0, 0, 1, 1],
        ))
        .unwrap();
        assert_eq!(r.intra, 0.0);
        assert!((r.inter - 1.0).abs() < 1e-12);
        assert!(r.ratio.is_none());
    }

    #[test]
    fn variance_all_identical_is_error() {
        assert!(variance_report(&embset(
            &[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]],
            &[0, 0, 1, 1],
        ))
        .is_err());
    }

    #[test]
    fn variance_rotation_invariance() {
        let rows: Vec<Vec<f32>> = (0..8)
            .map(|i| vec![(i as f32 * 0.37).sin(), (i as f32 * 0.91).cos()])
            .collect();
        let labels = [0, 0, 0, 1, 1, 1, 1, 0];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let base = variance_report(&embset(&refs, &labels)).unwrap();
        // rotate by 37 degrees
        let (s, c) = (37f32.to_radians().sin(), 37f32.to_radians().cos());
        let rotated: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1]])
            .collect();
        let refs2: Vec<&[f32]> = rotated.iter().map(|r| r.as_slice()).collect();
        let rot = variance_report(&embset(&refs2, &labels)).unwrap();
        assert!((base.intra - rot.intra).abs() < 1e-6);
        assert!((base.inter - rot.inter).abs() < 1e-6);
        assert!((base.ratio.unwrap() - rot.ratio.unwrap()).abs() < 1e-6);
    }

    #[test]
    fn variance_scaling_quadratic() {
        let rows: Vec<Vec<f32>> = (0..6)
            .map(|i| vec![(i as f32 * 0.53).sin(), (i as f32 * 0.21).cos(), i as f32 * 0.1])
            .collect();
        let labels = [0, 0, 1, 1, 1, 0];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let base = variance_report(&embset(&refs, &labels)).unwrap();
        let c = 3.0f32;
        let scaled: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| v * c).collect())
            .collect();
        let refs2: Vec<&[f32]> = scaled.iter().map(|r| r.as_slice()).collect();
        let s = variance_report(&embset(&refs2, &labels)).unwrap();
        let c2 = (c * c) as f64;
        assert!((s.intra / base.intra - c2).abs() < 1e-6);
        assert!((s.inter / base.inter - c2).abs() < 1e-6);
        assert!((s.ratio.unwrap() - base.ratio.unwrap()).abs() < 1e-6);
    }

    #[test]
    fn variance_table_golden_rendering() {
        // rendering fixture only: the published row for a standard ArcFace run
        let report = VarianceReport {
            intra: 5.39,
            inter: 5.07,
            ratio: Some(0.94),
            excluded_classes: vec![],
        };
        let table = variance_table("Standard ArcFace Loss", &report);
        assert!(table.contains("| Standard ArcFace Loss | 5.39 | 5.07 | 0.94 |"));
    }
}
