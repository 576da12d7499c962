//! Whole-model assembly: shared backbone forward, both branch heads, and the
//! combined loss.

use crate::backbone;
use crate::config::{CombineMode, HeadVariant, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, MarginKind, Var};
use crate::metric;
use crate::params::{Bound, ParamStore};
use crate::tensor::Scalar;
use crate::transformer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
pub struct Model {
    pub cfg: RunConfig,
    pub n_classes: usize,
}

pub struct StepOut<T: Scalar> {
    pub fmap: Var,
    pub emb: Var,
    pub metric_logits: Var,
    pub transformer_logits: Option<Var>,
    pub loss_metric: Var,
    pub loss_transformer: Option<Var>,
    pub loss_total: Var,
    pub buffer_updates: backbone::BufferUpdates<T>,
    /// detached per-sample embedding norms, for adaface running stats
    pub emb_norms: Vec<T>,
}

impl Model {
    pub fn new(cfg: RunConfig, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if n_classes == 0 {
            return Err(Error::config("model needs at least one class"));
        }
        Ok(Model { cfg, n_classes })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        backbone::init_params(&self.cfg.backbone, &mut store, &mut rng);
        metric::init_params(
            "metric",
            self.n_classes,
            self.cfg.backbone.embedding_dim,
            &mut store,
            &mut rng,
        );
        let (_, _, d_f) = self.cfg.backbone.final_map()?;
        transformer::init_params(
            &self.cfg.encoder,
            d_f,
            self.cfg.backbone.seq_len()?,
            self.n_classes,
            self.cfg.train.head_variant,
            &mut store,
            &mut rng,
        );
        Ok(store)
    }

    /// Backbone only; the evaluation path.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound<T>,
        x: Var,
    ) -> Result<Var> {
        let (_, emb, _) = backbone::forward(g, &self.cfg.backbone, bound, x, false)?;
        Ok(emb)
    }

    /// Full two-branch forward with the configured combine mode.
    pub fn forward_losses<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound<T>,
        x: Var,
        labels: &[usize],
        training: bool,
    ) -> Result<StepOut<T>> {
        self.forward_losses_with(g, bound, x, labels, training, self.cfg.train.combine_mode, self.cfg.train.alpha)
    }

    /// Same as `forward_losses` with an explicit combine mode and alpha,
    /// used by the ablation harness and the alpha-algebra checks.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_losses_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound<T>,
        x: Var,
        labels: &[usize],
        training: bool,
        mode: CombineMode,
        alpha: f32,
    ) -> Result<StepOut<T>> {
        let (fmap, emb, buffer_updates) =
            backbone::forward(g, &self.cfg.backbone, bound, x, training)?;
        let emb_norms = metric::embedding_norms(g, emb);
        let metric_logits =
            metric::head_logits(g, "metric", bound, &self.cfg.head, emb, labels)?;
        let loss_metric = g.cross_entropy(metric_logits, labels)?;

        let needs_transformer = mode != CombineMode::MetricOnly;
        let (transformer_logits, loss_transformer, loss_total) = if needs_transformer {
            let t_logits = transformer::transformer_logits(
                g,
                &self.cfg.encoder,
                bound,
                fmap,
                self.cfg.train.head_variant,
                &self.cfg.head,
                Some(labels),
                training,
            )?;
            match mode {
                CombineMode::Weighted => {
                    let loss_t = g.cross_entropy(t_logits, labels)?;
                    let a = T::from_f64(alpha as f64);
                    let wo = g.scale(loss_metric, T::one() - a);
                    let wt = g.scale(loss_t, a);
                    let total = g.add(wo, wt)?;
                    (Some(t_logits), Some(loss_t), total)
                }
                CombineMode::SummedLogits => {
                    let summed = g.add(metric_logits, t_logits)?;
                    let total = g.cross_entropy(summed, labels)?;
                    let loss_t = g.cross_entropy(t_logits, labels)?;
                    (Some(t_logits), Some(loss_t), total)
                }
                CombineMode::MetricOnly => unreachable!(),
            }
        } else {
            (None, None, loss_metric)
        };

        Ok(StepOut {
            fmap,
            emb,
            metric_logits,
            transformer_logits,
            loss_metric,
            loss_transformer,
            loss_total,
            buffer_updates,
            emb_norms,
        })
    }

    pub fn uses_adaface(&self) -> bool {
        self.cfg.head.kind == MarginKind::Adaface
    }

    pub fn head_variant(&self) -> HeadVariant {
        self.cfg.train.head_variant
    }
}

/// (1-alpha) * CE(o_logits) + alpha * CE(t_logits) over already-built logits.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    o_logits: Var,
    t_logits: Var,
    labels: &[usize],
    alpha: T,
) -> Result<Var> {
    if g.shape(o_logits) != g.shape(t_logits) {
        return Err(Error::dim(format!(
            "combined_loss: {:?} vs {:?}",
            g.shape(o_logits),
            g.shape(t_logits)
        )));
    }
    let lo = g.cross_entropy(o_logits, labels)?;
    let lt = g.cross_entropy(t_logits, labels)?;
    let wo = g.scale(lo, T::one() - alpha);
    let wt = g.scale(lt, alpha);
    g.add(wo, wt)
}

/// CE(o_logits + t_logits): the sum-then-softmax combination.
pub fn summed_logits_loss<T: Scalar>(
    g: &mut Graph<T>,
    o_logits: Var,
    t_logits: Var,
    labels: &[usize],
) -> Result<Var> {
    let summed = g.add(o_logits, t_logits)?;
    g.cross_entropy(summed, labels)
}
