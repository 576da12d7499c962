//! Residual CNN backbone producing the final convolution feature map and,
//! through flatten + L1, the evaluation embedding (branch 1).

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform_fan_in, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

const BN_EPS: f64 = 1e-5;

/// Names of running-stat buffers to fold back after a training step.
pub type BufferUpdates<T> = Vec<(String, Tensor<T>)>;

pub fn init_params(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let (cin, _, _) = cfg.input_size;
    let ch0 = cfg.stage_channels[0];
    add_conv(store, rng, "backbone.stem.conv", ch0, cin, 3);
    add_bn(store, "backbone.stem.bn", ch0);
    add_prelu(store, "backbone.stem.prelu", ch0);

    let mut in_ch = ch0;
    for (si, (&ch, &blocks)) in cfg
        .stage_channels
        .iter()
        .zip(&cfg.blocks_per_stage)
        .enumerate()
    {
        for bi in 0..blocks {
            let prefix = format!("backbone.s{si}.b{bi}");
            add_conv(store, rng, &format!("{prefix}.conv1"), ch, in_ch, 3);
            add_bn(store, &format!("{prefix}.bn1"), ch);
            add_prelu(store, &format!("{prefix}.prelu"), ch);
            add_conv(store, rng, &format!("{prefix}.conv2"), ch, ch, 3);
            add_bn(store, &format!("{prefix}.bn2"), ch);
            // entry blocks stride, so the shortcut always needs a projection
            if bi == 0 {
                add_conv(store, rng, &format!("{prefix}.proj"), ch, in_ch, 1);
                add_bn(store, &format!("{prefix}.proj_bn"), ch);
            }
            in_ch = ch;
        }
    }

    let (h_f, w_f, d_f) = cfg.final_map().expect("validated config");
    let flat = h_f * w_f * d_f;
    store.insert(
        "backbone.l1.w",
        uniform_fan_in(rng, &[flat, cfg.embedding_dim], flat),
        true,
    );
    store.insert(
        "backbone.l1.b",
        Tensor::zeros(&[cfg.embedding_dim]),
        true,
    );
    if cfg.l1_batchnorm {
        add_bn(store, "backbone.l1_bn", cfg.embedding_dim);
    }
}

fn add_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    let fan_in = cin * k * k;
    store.insert(
        &format!("{name}.w"),
        uniform_fan_in(rng, &[cout, cin, k, k], fan_in),
        true,
    );
}

fn add_bn(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(&format!("{name}.gain"), Tensor::full(&[c], 1.0), true);
    store.insert(&format!("{name}.bias"), Tensor::zeros(&[c]), true);
    store.insert(
        &format!("{name}.running_mean"),
        Tensor::zeros(&[c]),
        false,
    );
    store.insert(
        &format!("{name}.running_var"),
        Tensor::full(&[c], 1.0),
        false,
    );
}

fn add_prelu(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(&format!("{name}.slope"), Tensor::full(&[c], 0.25), true);
}

struct Ctx<'a, T: Scalar> {
    bound: &'a Bound<T>,
    training: bool,
    momentum: T,
    updates: BufferUpdates<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    fn bn(&mut self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let gain = self.bound.var(&format!("{name}.gain"))?;
        let bias = self.bound.var(&format!("{name}.bias"))?;
        let rm = self.bound.buffer(&format!("{name}.running_mean"))?.clone();
        let rv = self.bound.buffer(&format!("{name}.running_var"))?.clone();
        let (out, stats) =
            g.batchnorm2d(x, gain, bias, &rm, &rv, self.training, T::from_f64(BN_EPS))?;
        if let Some((mean, var)) = stats {
            let one_m = T::one() - self.momentum;
            let mut new_mean = rm;
            let mut new_var = rv;
            for (d, s) in new_mean.data_mut().iter_mut().zip(mean.data()) {
                *d = *d * one_m + *s * self.momentum;
            }
            for (d, s) in new_var.data_mut().iter_mut().zip(var.data()) {
                *d = *d * one_m + *s * self.momentum;
            }
            self.updates
                .push((format!("{name}.running_mean"), new_mean));
            self.updates.push((format!("{name}.running_var"), new_var));
        }
        Ok(out)
    }
}

/// Shared forward pass: returns the final feature map O_f [B x D_f x H_f x W_f]
/// and the embedding O_e [B x eps], plus pending running-stat updates.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    bound: &Bound<T>,
    x: Var,
    training: bool,
) -> Result<(Var, Var, BufferUpdates<T>)> {
    let xs = g.shape(x).to_vec();
    let (cin, h, w) = cfg.input_size;
    if xs.len() != 4 || xs[1] != cin || xs[2] != h || xs[3] != w {
        return Err(Error::dim(format!(
            "backbone input {:?} does not match configured size {:?}",
            xs, cfg.input_size
        )));
    }
    let mut ctx = Ctx {
        bound,
        training,
        momentum: T::from_f64(cfg.bn_momentum as f64),
        updates: Vec::new(),
    };

    // stem: conv3x3 s1 - BN - PReLU, resolution preserved
    let stem_w = bound.var("backbone.stem.conv.w")?;
    let mut cur = g.conv2d(x, stem_w, 1, 1)?;
    cur = ctx.bn(g, cur, "backbone.stem.bn")?;
    let stem_slope = bound.var("backbone.stem.prelu.slope")?;
    cur = g.prelu(cur, stem_slope, 1)?;

    for (si, &blocks) in cfg.blocks_per_stage.iter().enumerate() {
        for bi in 0..blocks {
            let prefix = format!("backbone.s{si}.b{bi}");
            let stride = if bi == 0 { 2 } else { 1 };
            let shortcut = if bi == 0 {
                let pw = bound.var(&format!("{prefix}.proj.w"))?;
                let p = g.conv2d(cur, pw, stride, 0)?;
                ctx.bn(g, p, &format!("{prefix}.proj_bn"))?
            } else {
                cur
            };
            let w1 = bound.var(&format!("{prefix}.conv1.w"))?;
            let mut f = g.conv2d(cur, w1, stride, 1)?;
            f = ctx.bn(g, f, &format!("{prefix}.bn1"))?;
            let slope = bound.var(&format!("{prefix}.prelu.slope"))?;
            f = g.prelu(f, slope, 1)?;
            let w2 = bound.var(&format!("{prefix}.conv2.w"))?;
            f = g.conv2d(f, w2, 1, 1)?;
            f = ctx.bn(g, f, &format!("{prefix}.bn2"))?;
            cur = g.add(shortcut, f)?;
        }
    }

    let fmap = cur;
    let fs = g.shape(fmap).to_vec();
    let flat = fs[1] * fs[2] * fs[3];
    let flat_var = g.reshape(fmap, vec![fs[0], flat])?;
    let l1w = bound.var("backbone.l1.w")?;
    let l1b = bound.var("backbone.l1.b")?;
    let mut emb = g.matmul(flat_var, l1w)?;
    emb = g.add_broadcast(emb, l1b, 1)?;
    if cfg.l1_batchnorm {
        let eps_dim = cfg.embedding_dim;
        let as4d = g.reshape(emb, vec![fs[0], eps_dim, 1, 1])?;
        let n = ctx.bn(g, as4d, "backbone.l1_bn")?;
        emb = g.reshape(n, vec![fs[0], eps_dim])?;
    }
    Ok((fmap, emb, ctx.updates))
}
