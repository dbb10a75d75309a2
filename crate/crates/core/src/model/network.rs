//! The multi-task network and its hand-written backward pass.
//!
//! Layout, input to output:
//!
//! ```text
//! categorical idx ─ lookup W_k ─────────────────┐
//! numerical x_m ─ [sin, cos](2π c_m x) ─ Linear ─ ReLU ─┤ concat → z
//!                                                       │
//! z ─ (Linear ─ ReLU ─ Dropout) × n_blocks → h
//! h ─ Linear ─ sigmoid → p̂
//! [h, p̂] ─ Linear ─ ReLU ─ Linear → delayed quantiles
//! [h, p̂] ─ Linear ─ ReLU ─ Linear → on-time quantiles
//! ```

use serde::{Deserialize, Serialize};

use super::config::{embed_dim, ArchitectureConfig};
use super::losses::{regression_loss_grad, sigmoid_f1_grad};
use super::sort_quantiles;
use crate::data::EncodedSet;
use crate::error::{Error, Result};
use crate::numerics::layers::{
    dropout, dropout_backward, embedding_backward, embedding_forward, kaiming_uniform,
    linear_backward, linear_forward, normal_init, relu, relu_backward, sigmoid_scalar,
    sin_cos_backward_freqs, sin_cos_features,
};
use crate::numerics::{seeded, DetRng, Param, Tensor2D};

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, heads routed by ground truth.
    Train,
    /// No dropout, heads routed by ground truth (validation losses).
    Eval,
    /// No dropout, heads routed by the classifier (`p̂ > 0.5`).
    Infer,
}

impl Mode {
    fn dropout_active(self) -> bool {
        matches!(self, Mode::Train)
    }

    fn ground_truth_routing(self) -> bool {
        matches!(self, Mode::Train | Mode::Eval)
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Backbone,
    Classifier,
    DelayedHead,
    OntimeHead,
}

impl ParamGroup {
    pub fn is_regression_head(self) -> bool {
        matches!(self, ParamGroup::DelayedHead | ParamGroup::OntimeHead)
    }
}

/// A gathered mini-batch of encoded rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub n_cat: usize,
    pub n_num: usize,
    pub cat: Vec<usize>,
    pub num: Vec<f64>,
    pub y: Vec<f64>,
    pub delayed: Vec<bool>,
}

impl Batch {
    pub fn gather(set: &EncodedSet, idx: &[usize]) -> Self {
        let mut b = Batch {
            size: idx.len(),
            n_cat: set.n_cat,
            n_num: set.n_num,
            cat: Vec::with_capacity(idx.len() * set.n_cat),
            num: Vec::with_capacity(idx.len() * set.n_num),
            y: Vec::with_capacity(idx.len()),
            delayed: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            b.cat.extend_from_slice(set.cat_row(i));
            b.num.extend_from_slice(set.num_row(i));
            b.y.push(set.y[i]);
            b.delayed.push(set.delayed[i]);
        }
        b
    }

    pub fn range(set: &EncodedSet, start: usize, end: usize) -> Self {
        Self::gather(set, &(start..end).collect::<Vec<_>>())
    }

    fn cat_column(&self, k: usize) -> Vec<usize> {
        (0..self.size).map(|i| self.cat[i * self.n_cat + k]).collect()
    }

    fn num_column(&self, m: usize) -> Vec<f64> {
        (0..self.size).map(|i| self.num[i * self.n_num + m]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    fn new(name: &str, d_out: usize, d_in: usize, rng: &mut DetRng) -> Self {
        let (w, b) = kaiming_uniform(d_out, d_in, rng);
        Self {
            w: Param::new(format!("{name}.weight"), w),
            b: Param::new(format!("{name}.bias"), b),
        }
    }

    fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        linear_forward(x, &self.w.value, self.b.value.data())
    }

    fn backward(&mut self, x: &Tensor2D, dy: &Tensor2D, need_dx: bool) -> Option<Tensor2D> {
        let Linear { w, b } = self;
        let gb = b.grad_mut().map(|g| g.data_mut());
        let (rows, cols) = w.value.shape();
        let gw = if w.requires_grad {
            Some(w.grad.get_or_insert_with(|| Tensor2D::zeros(rows, cols)))
        } else {
            None
        };
        let value = &w.value;
        linear_backward(x, value, dy, gw, gb, need_dx)
    }

    fn params(&self) -> [&Param; 2] {
        [&self.w, &self.b]
    }

    fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.w, &mut self.b]
    }
}

/// Periodic numerical embedding: `ReLU(W [sin(2πcx); cos(2πcx)] + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlrEmbedding {
    pub freqs: Param,
    pub linear: Linear,
}

/// Shallow MLP mapping `[h, p̂]` to three quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileHead {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub hidden: Tensor2D,
    pub delay_prob: Vec<f64>,
    pub delayed_quantiles: Tensor2D,
    pub ontime_quantiles: Tensor2D,
    pub routed_quantiles: Tensor2D,
    /// True where the row was routed to the delayed head.
    pub routed_head: Vec<bool>,
}

struct PlrCache {
    x: Vec<f64>,
    feats: Tensor2D,
    pre: Tensor2D,
}

struct BlockCache {
    input: Tensor2D,
    pre: Tensor2D,
    mask: Option<Vec<f64>>,
}

struct HeadCache {
    pre: Tensor2D,
    act: Tensor2D,
}

/// Activations saved by [`DelayModel::forward`] for the backward pass.
pub struct ForwardCache {
    cat_cols: Vec<Vec<usize>>,
    plr: Vec<PlrCache>,
    blocks: Vec<BlockCache>,
    h: Tensor2D,
    r: Tensor2D,
    prob: Vec<f64>,
    delayed: HeadCache,
    ontime: HeadCache,
}

impl ForwardCache {
    /// `true` where each ReLU pre-activation is positive, in a fixed order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor2D| out.extend(t.data().iter().map(|&v| v > 0.0));
        for p in &self.plr {
            push(&p.pre);
        }
        for b in &self.blocks {
            push(&b.pre);
        }
        push(&self.delayed.pre);
        push(&self.ontime.pre);
        out
    }
}

/// Classification and regression losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Losses {
    pub classification: f64,
    pub regression: f64,
}

impl Losses {
    pub fn total(&self) -> f64 {
        self.classification + self.regression
    }
}

/// Network parameters plus the dimensions they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayModel {
    pub arch: ArchitectureConfig,
    pub cardinalities: Vec<usize>,
    pub n_num: usize,
    pub embeddings: Vec<Param>,
    pub plr: Vec<PlrEmbedding>,
    pub backbone: Vec<Linear>,
    pub classifier: Linear,
    pub delayed_head: QuantileHead,
    pub ontime_head: QuantileHead,
}

impl DelayModel {
    pub fn new(arch: &ArchitectureConfig, cardinalities: &[usize], n_num: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if cardinalities.is_empty() && n_num == 0 {
            return Err(Error::Schema("model needs at least one input feature".into()));
        }
        let mut rng = seeded(seed);
        let embeddings: Vec<Param> = cardinalities
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let d = embed_dim(c, arch.d_cat_max);
                Param::new(format!("embedding.{k}"), normal_init(c, d, 0.1, &mut rng))
            })
            .collect();
        let l = arch.plr_frequencies;
        let plr = (0..n_num)
            .map(|m| PlrEmbedding {
                freqs: Param::new(
                    format!("plr.{m}.freqs"),
                    normal_init(1, l, arch.freq_init_std, &mut rng),
                ),
                linear: Linear::new(&format!("plr.{m}.linear"), arch.d_num, 2 * l, &mut rng),
            })
            .collect();
        let d_z: usize = embeddings.iter().map(|e| e.value.cols()).sum::<usize>() + n_num * arch.d_num;
        let mut backbone = Vec::with_capacity(arch.n_blocks);
        let mut d_in = d_z;
        for i in 0..arch.n_blocks {
            backbone.push(Linear::new(&format!("backbone.{i}"), arch.d_hidden, d_in, &mut rng));
            d_in = arch.d_hidden;
        }
        let classifier = Linear::new("classifier", 1, arch.d_hidden, &mut rng);
        let hh = arch.head_hidden();
        let mut head = |name: &str| QuantileHead {
            hidden: Linear::new(&format!("{name}.hidden"), hh, arch.d_hidden + 1, &mut rng),
            out: Linear::new(&format!("{name}.out"), 3, hh, &mut rng),
        };
        let delayed_head = head("delayed_head");
        let ontime_head = head("ontime_head");
        Ok(Self {
            arch: arch.clone(),
            cardinalities: cardinalities.to_vec(),
            n_num,
            embeddings,
            plr,
            backbone,
            classifier,
            delayed_head,
            ontime_head,
        })
    }

    /// Width of the concatenated embedding `z`.
    pub fn d_z(&self) -> usize {
        self.embeddings.iter().map(|e| e.value.cols()).sum::<usize>() + self.n_num * self.arch.d_num
    }

    /// Every parameter in a fixed order, tagged with its group.
    pub fn params(&self) -> Vec<(ParamGroup, &Param)> {
        let mut v: Vec<(ParamGroup, &Param)> = Vec::new();
        v.extend(self.embeddings.iter().map(|p| (ParamGroup::Embedding, p)));
        for p in &self.plr {
            v.push((ParamGroup::Embedding, &p.freqs));
            v.extend(p.linear.params().map(|q| (ParamGroup::Embedding, q)));
        }
        for l in &self.backbone {
            v.extend(l.params().map(|q| (ParamGroup::Backbone, q)));
        }
        v.extend(self.classifier.params().map(|q| (ParamGroup::Classifier, q)));
        for (g, h) in [
            (ParamGroup::DelayedHead, &self.delayed_head),
            (ParamGroup::OntimeHead, &self.ontime_head),
        ] {
            v.extend(h.hidden.params().map(|q| (g, q)));
            v.extend(h.out.params().map(|q| (g, q)));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Param)> {
        let mut v: Vec<(ParamGroup, &mut Param)> = Vec::new();
        v.extend(self.embeddings.iter_mut().map(|p| (ParamGroup::Embedding, p)));
        for p in &mut self.plr {
            v.push((ParamGroup::Embedding, &mut p.freqs));
            v.extend(p.linear.params_mut().map(|q| (ParamGroup::Embedding, q)));
        }
        for l in &mut self.backbone {
            v.extend(l.params_mut().map(|q| (ParamGroup::Backbone, q)));
        }
        v.extend(self.classifier.params_mut().map(|q| (ParamGroup::Classifier, q)));
        for (g, h) in [
            (ParamGroup::DelayedHead, &mut self.delayed_head),
            (ParamGroup::OntimeHead, &mut self.ontime_head),
        ] {
            v.extend(h.hidden.params_mut().map(|q| (g, q)));
            v.extend(h.out.params_mut().map(|q| (g, q)));
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Freezes (or unfreezes) everything except the two regression heads.
    pub fn set_trunk_trainable(&mut self, trainable: bool) {
        for (g, p) in self.params_mut() {
            if !g.is_regression_head() {
                p.requires_grad = trainable;
                if !trainable {
                    p.grad = None;
                }
            }
        }
    }

    fn trunk_trainable(&self) -> bool {
        self.params()
            .iter()
            .any(|(g, p)| !g.is_regression_head() && p.requires_grad)
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.data().len()).sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.n_cat != self.cardinalities.len() || batch.n_num != self.n_num {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "batch has {}/{} features, model expects {}/{}",
                    batch.n_cat,
                    batch.n_num,
                    self.cardinalities.len(),
                    self.n_num
                ),
            });
        }
        for i in 0..batch.size {
            for (k, &c) in self.cardinalities.iter().enumerate() {
                let idx = batch.cat[i * batch.n_cat + k];
                if idx >= c {
                    return Err(Error::IndexOutOfRange {
                        feature: format!("categorical #{k}"),
                        index: idx,
                        cardinality: c,
                    });
                }
            }
        }
        Ok(())
    }

    /// Full forward pass. `rng` drives dropout and is required only in
    /// [`Mode::Train`] with a positive dropout rate.
    pub fn forward(
        &self,
        batch: &Batch,
        mode: Mode,
        mut rng: Option<&mut DetRng>,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        self.check_batch(batch)?;
        let n = batch.size;

        let cat_cols: Vec<Vec<usize>> = (0..self.cardinalities.len()).map(|k| batch.cat_column(k)).collect();
        let mut pieces: Vec<Tensor2D> = cat_cols
            .iter()
            .zip(&self.embeddings)
            .map(|(idx, table)| embedding_forward(&table.value, idx))
            .collect();
        let mut plr_cache = Vec::with_capacity(self.n_num);
        for (m, emb) in self.plr.iter().enumerate() {
            let x = batch.num_column(m);
            let feats = sin_cos_features(&x, emb.freqs.value.data());
            let pre = emb.linear.forward(&feats)?;
            pieces.push(relu(&pre));
            plr_cache.push(PlrCache { x, feats, pre });
        }
        let refs: Vec<&Tensor2D> = pieces.iter().collect();
        let z = Tensor2D::hcat(&refs);

        let mut blocks = Vec::with_capacity(self.backbone.len());
        let mut act = z;
        for layer in &self.backbone {
            let pre = layer.forward(&act)?;
            let post = relu(&pre);
            let (out, mask) = match (mode.dropout_active(), rng.as_deref_mut()) {
                (true, Some(r)) => dropout(&post, self.arch.dropout, true, r),
                (true, None) if self.arch.dropout > 0.0 => {
                    return Err(Error::Shape {
                        op: "forward",
                        detail: "training-mode dropout needs an RNG".into(),
                    })
                }
                _ => (post, None),
            };
            blocks.push(BlockCache {
                input: act,
                pre,
                mask,
            });
            act = out;
        }
        let h = act;

        let logits = self.classifier.forward(&h)?;
        let prob: Vec<f64> = logits.data().iter().map(|&z| sigmoid_scalar(z)).collect();
        let p_col = Tensor2D::from_vec(n, 1, prob.clone());
        let r = Tensor2D::hcat(&[&h, &p_col]);

        let run_head = |head: &QuantileHead| -> Result<(Tensor2D, HeadCache)> {
            let pre = head.hidden.forward(&r)?;
            let act = relu(&pre);
            let out = head.out.forward(&act)?;
            Ok((out, HeadCache { pre, act }))
        };
        let (delayed_q, delayed_cache) = run_head(&self.delayed_head)?;
        let (ontime_q, ontime_cache) = run_head(&self.ontime_head)?;

        let routed_head: Vec<bool> = if mode.ground_truth_routing() {
            batch.delayed.clone()
        } else {
            prob.iter().map(|&p| p > 0.5).collect()
        };
        let mut routed = Tensor2D::zeros(n, 3);
        for i in 0..n {
            let src = if routed_head[i] { delayed_q.row(i) } else { ontime_q.row(i) };
            routed.row_mut(i).copy_from_slice(src);
        }

        let output = ForwardOutput {
            hidden: h.clone(),
            delay_prob: prob.clone(),
            delayed_quantiles: delayed_q,
            ontime_quantiles: ontime_q,
            routed_quantiles: routed,
            routed_head,
        };
        let cache = ForwardCache {
            cat_cols,
            plr: plr_cache,
            blocks,
            h,
            r,
            prob,
            delayed: delayed_cache,
            ontime: ontime_cache,
        };
        Ok((output, cache))
    }

    /// Back-propagates output gradients into parameter gradients.
    ///
    /// `d_prob` is the gradient with respect to `p̂` coming from the
    /// classification loss; `d_delayed` / `d_ontime` are gradients with
    /// respect to each head's raw quantile outputs. Frozen parameters
    /// receive nothing; when the whole trunk is frozen the pass stops at the
    /// heads.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        d_prob: &[f64],
        d_delayed: &Tensor2D,
        d_ontime: &Tensor2D,
    ) {
        let trunk = self.trunk_trainable();
        let d_h = self.arch.d_hidden;
        let n = cache.prob.len();

        let head_back = |head: &mut QuantileHead, hc: &HeadCache, dy: &Tensor2D| -> Option<Tensor2D> {
            let d_act = head.out.backward(&hc.act, dy, true).expect("requested dx");
            let d_pre = relu_backward(&hc.pre, &d_act);
            head.hidden.backward(&cache.r, &d_pre, trunk)
        };
        let dr_del = head_back(&mut self.delayed_head, &cache.delayed, d_delayed);
        let dr_on = head_back(&mut self.ontime_head, &cache.ontime, d_ontime);
        if !trunk {
            return;
        }
        let (dr_del, dr_on) = (dr_del.expect("dx"), dr_on.expect("dx"));

        let mut dh = Tensor2D::zeros(n, d_h);
        let mut d_logit = Tensor2D::zeros(n, 1);
        for i in 0..n {
            let (a, b) = (dr_del.row(i), dr_on.row(i));
            for (j, v) in dh.row_mut(i).iter_mut().enumerate() {
                *v = a[j] + b[j];
            }
            let dp = d_prob[i] + a[d_h] + b[d_h];
            let p = cache.prob[i];
            d_logit[(i, 0)] = dp * p * (1.0 - p);
        }
        let dh_cls = self.classifier.backward(&cache.h, &d_logit, true).expect("dx");
        for (v, g) in dh.data_mut().iter_mut().zip(dh_cls.data()) {
            *v += g;
        }

        let mut grad = dh;
        for (layer, bc) in self.backbone.iter_mut().zip(&cache.blocks).rev() {
            let d_post = dropout_backward(bc.mask.as_deref(), grad);
            let d_pre = relu_backward(&bc.pre, &d_post);
            grad = layer.backward(&bc.input, &d_pre, true).expect("dx");
        }
        let dz = grad;

        let mut off = 0;
        for (table, idx) in self.embeddings.iter_mut().zip(&cache.cat_cols) {
            let d = table.value.cols();
            if let Some(g) = table.grad_mut() {
                embedding_backward(idx, &dz.slice_cols(off, d), g);
            }
            off += d;
        }
        let d_num = self.arch.d_num;
        for (emb, pc) in self.plr.iter_mut().zip(&cache.plr) {
            let d_out = relu_backward(&pc.pre, &dz.slice_cols(off, d_num));
            off += d_num;
            let need_feats = emb.freqs.requires_grad;
            let d_feats = emb.linear.backward(&pc.feats, &d_out, need_feats);
            let freqs = emb.freqs.value.data().to_vec();
            if let (Some(df), Some(gf)) = (d_feats, emb.freqs.grad_mut()) {
                sin_cos_backward_freqs(&pc.x, &freqs, &df, gf.data_mut());
            }
        }
    }

    /// Classification and regression losses for a forward output, using the
    /// batch's ground-truth labels for routing.
    pub fn losses(&self, out: &ForwardOutput, batch: &Batch) -> Losses {
        Losses {
            classification: super::losses::sigmoid_f1_loss(&out.delay_prob, &batch.delayed),
            regression: super::losses::regression_loss(
                &out.delayed_quantiles,
                &out.ontime_quantiles,
                &batch.y,
                &batch.delayed,
                &self.arch.quantile_levels,
            ),
        }
    }

    /// Forward, loss and backward in one call. With `with_classification`
    /// the objective is `L_c + L_r`, otherwise `L_r` alone.
    pub fn forward_backward(
        &mut self,
        batch: &Batch,
        mode: Mode,
        rng: Option<&mut DetRng>,
        with_classification: bool,
    ) -> Result<(Losses, ForwardOutput)> {
        debug_assert!(mode.ground_truth_routing(), "training losses route by ground truth");
        let (out, cache) = self.forward(batch, mode, rng)?;
        debug_assert_eq!(out.routed_head, batch.delayed);
        let (lc, d_prob) = if with_classification {
            sigmoid_f1_grad(&out.delay_prob, &batch.delayed)
        } else {
            (
                super::losses::sigmoid_f1_loss(&out.delay_prob, &batch.delayed),
                vec![0.0; batch.size],
            )
        };
        let (lr, g_del, g_on) = regression_loss_grad(
            &out.delayed_quantiles,
            &out.ontime_quantiles,
            &batch.y,
            &batch.delayed,
            &self.arch.quantile_levels,
        );
        self.backward(&cache, &d_prob, &g_del, &g_on);
        Ok((
            Losses {
                classification: lc,
                regression: lr,
            },
            out,
        ))
    }

    /// Inference over a whole encoded set in chunks.
    pub fn predict(&self, set: &EncodedSet, chunk: usize) -> Result<Vec<super::QuantilePrediction>> {
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(set.len());
        let mut start = 0;
        while start < set.len() {
            let end = (start + chunk).min(set.len());
            let batch = Batch::range(set, start, end);
            let (fo, _) = self.forward(&batch, Mode::Infer, None)?;
            for i in 0..batch.size {
                let q = |t: &Tensor2D| sort_quantiles([t[(i, 0)], t[(i, 1)], t[(i, 2)]]);
                out.push(super::QuantilePrediction {
                    delay_prob: fo.delay_prob[i],
                    predicted_delayed: fo.routed_head[i],
                    quantiles: q(&fo.routed_quantiles),
                    delayed_head: q(&fo.delayed_quantiles),
                    ontime_head: q(&fo.ontime_quantiles),
                });
            }
            start = end;
        }
        Ok(out)
    }
}

/// Wraps a model and a fixed batch as a finite-difference check target for
/// the full `L_c + L_r` objective (or `L_r` alone), without dropout.
pub struct ModelGradCheck {
    pub model: DelayModel,
    pub batch: Batch,
    pub with_classification: bool,
}

impl ModelGradCheck {
    fn objective(&self, out: &ForwardOutput) -> f64 {
        let l = self.model.losses(out, &self.batch);
        if self.with_classification {
            l.total()
        } else {
            l.regression
        }
    }
}

impl crate::numerics::GradCheckable for ModelGradCheck {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.model.params_mut().into_iter().map(|(_, p)| p).collect()
    }

    fn eval(&mut self) -> (f64, Vec<bool>) {
        let (out, cache) = self
            .model
            .forward(&self.batch, Mode::Eval, None)
            .expect("batch matches model");
        let mut pattern = cache.relu_pattern();
        for i in 0..self.batch.size {
            for j in 0..3 {
                pattern.push(self.batch.y[i] - out.routed_quantiles[(i, j)] >= 0.0);
            }
        }
        (self.objective(&out), pattern)
    }

    fn eval_with_grad(&mut self) -> f64 {
        self.model.zero_grad();
        let (l, _) = self
            .model
            .forward_backward(&self.batch, Mode::Eval, None, self.with_classification)
            .expect("batch matches model");
        if self.with_classification {
            l.total()
        } else {
            l.regression
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheckConfig};
    use rand::Rng;

    fn small_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            n_blocks: 2,
            d_hidden: 16,
            dropout: 0.1,
            plr_frequencies: 4,
            d_num: 6,
            ..ArchitectureConfig::default()
        }
    }

    fn random_batch(n: usize, cards: &[usize], n_num: usize, seed: u64) -> Batch {
        let mut rng = seeded(seed);
        let mut cat = Vec::new();
        let mut num = Vec::new();
        let mut y = Vec::new();
        let mut delayed = Vec::new();
        for i in 0..n {
            for &c in cards {
                cat.push(rng.random_range(0..c));
            }
            for _ in 0..n_num {
                num.push(rng.random_range(-2.0..2.0));
            }
            let d = i % 3 == 0;
            delayed.push(d);
            y.push(if d { rng.random_range(1.0..10.0) } else { -rng.random_range(0.0..2.0f64).floor() });
        }
        Batch {
            size: n,
            n_cat: cards.len(),
            n_num,
            cat,
            num,
            y,
            delayed,
        }
    }

    #[test]
    fn single_row_shapes() {
        let m = DelayModel::new(&ArchitectureConfig::default(), &[5, 3], 2, 0).unwrap();
        let b = random_batch(1, &[5, 3], 2, 1);
        let (out, _) = m.forward(&b, Mode::Infer, None).unwrap();
        assert_eq!(out.hidden.shape(), (1, 128));
        assert_eq!(out.delay_prob.len(), 1);
        assert!(out.delay_prob[0] > 0.0 && out.delay_prob[0] < 1.0);
        assert_eq!(out.delayed_quantiles.shape(), (1, 3));
        assert_eq!(out.ontime_quantiles.shape(), (1, 3));
        assert_eq!(m.d_z(), 3 + 2 + 2 * 24);
    }

    #[test]
    fn probability_of_one_half_routes_on_time() {
        let mut m = DelayModel::new(&small_arch(), &[4], 1, 0).unwrap();
        m.classifier.w.value.fill(0.0);
        m.classifier.b.value.fill(0.0);
        let b = random_batch(3, &[4], 1, 2);
        let (out, _) = m.forward(&b, Mode::Infer, None).unwrap();
        assert!(out.delay_prob.iter().all(|&p| p == 0.5));
        assert_eq!(out.routed_head, vec![false; 3]);
        assert_eq!(out.routed_quantiles, out.ontime_quantiles);
    }

    #[test]
    fn train_mode_routes_by_ground_truth() {
        let m = DelayModel::new(&small_arch(), &[4], 1, 0).unwrap();
        let mut b = random_batch(2, &[4], 1, 3);
        b.delayed = vec![true, false];
        let mut rng = seeded(9);
        let (out, _) = m.forward(&b, Mode::Train, Some(&mut rng)).unwrap();
        assert_eq!(out.routed_head, vec![true, false]);
        assert_eq!(out.routed_quantiles.row(0), out.delayed_quantiles.row(0));
        assert_eq!(out.routed_quantiles.row(1), out.ontime_quantiles.row(1));
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let m = DelayModel::new(&small_arch(), &[4], 1, 0).unwrap();
        let mut b = random_batch(2, &[4], 1, 3);
        b.cat[1] = 4;
        assert!(matches!(
            m.forward(&b, Mode::Infer, None),
            Err(Error::IndexOutOfRange { index: 4, cardinality: 4, .. })
        ));
    }

    #[test]
    fn forward_is_deterministic_and_eval_ignores_dropout() {
        let m = DelayModel::new(&small_arch(), &[4, 7], 2, 11).unwrap();
        let b = random_batch(8, &[4, 7], 2, 4);
        let a = m.forward(&b, Mode::Eval, None).unwrap().0;
        let c = m.forward(&b, Mode::Eval, None).unwrap().0;
        assert_eq!(a, c);
        let t = m.forward(&b, Mode::Train, Some(&mut seeded(1))).unwrap().0;
        assert_ne!(a.hidden, t.hidden);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cards = [5, 3];
        let model = DelayModel::new(&small_arch(), &cards, 2, 21).unwrap();
        let mut frag = ModelGradCheck {
            model,
            batch: random_batch(12, &cards, 2, 5),
            with_classification: true,
        };
        let rep = check_gradients(&mut frag, &GradCheckConfig { samples: 150, ..Default::default() });
        assert!(rep.checked >= 100, "{rep:?}");
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn frozen_trunk_receives_no_gradient() {
        let cards = [5];
        let mut m = DelayModel::new(&small_arch(), &cards, 1, 3).unwrap();
        m.set_trunk_trainable(false);
        let b = random_batch(6, &cards, 1, 6);
        m.zero_grad();
        m.forward_backward(&b, Mode::Eval, None, false).unwrap();
        for (g, p) in m.params() {
            if g.is_regression_head() {
                assert!(p.grad.is_some(), "{}", p.name);
            } else {
                assert!(p.grad.is_none(), "{}", p.name);
            }
        }
    }

    #[test]
    fn predict_sorts_each_triple() {
        let m = DelayModel::new(&small_arch(), &[4], 1, 0).unwrap();
        let set = EncodedSet {
            n: 5,
            n_cat: 1,
            n_num: 1,
            cat: vec![0, 1, 2, 3, 1],
            num: vec![0.1, -0.3, 1.0, 2.0, 0.0],
            y: vec![0.0; 5],
            delayed: vec![false; 5],
        };
        let preds = m.predict(&set, 2).unwrap();
        assert_eq!(preds.len(), 5);
        for p in preds {
            assert!(p.quantiles[0] <= p.quantiles[1] && p.quantiles[1] <= p.quantiles[2]);
            assert_eq!(p.predicted_delayed, p.delay_prob > 0.5);
        }
    }
}
