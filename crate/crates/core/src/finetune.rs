//! Retrieval fine-tuning of the visual backbone: an identity classifier on
//! the pooled embedding, cross-entropy plus a triplet loss over PK batches,
//! and Adam with a linear warmup.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normal, Backbone, ModelConfig};
use crate::optim::{warmup_constant, Adam};
use crate::tape::{Graph, Mat, ParamGroup, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Backbone arrays from a pretraining checkpoint.
    VtbrCheckpoint,
    /// Fresh random backbone.
    Random,
    /// Backbone arrays from any other checkpoint holding `visual.*` arrays.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletMining {
    /// Hardest positive and hardest negative per anchor.
    #[default]
    BatchHard,
    /// Mean over every valid (anchor, positive, negative) triple.
    AllTriplets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    pub margin: f64,
    pub mining: TripletMining,
    pub steps: usize,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub init: InitKind,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            p: 16,
            k: 4,
            margin: 0.5,
            mining: TripletMining::BatchHard,
            steps: 100,
            warmup_fraction: 0.1,
            lr: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            seed: 0,
            init: InitKind::VtbrCheckpoint,
        }
    }
}

impl FinetuneConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::config(
                "finetune.p",
                "triplets need at least 2 identities per batch",
            ));
        }
        if self.k < 2 {
            return Err(Error::config(
                "finetune.k",
                "triplets need at least 2 images per identity",
            ));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(Error::config("finetune.margin", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("finetune.warmup_fraction", "must lie in [0, 1]"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::config("finetune.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("finetune.beta", "betas must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config(
                "finetune.eps",
                "eps must be positive and weight decay non-negative",
            ));
        }
        Ok(())
    }
}

/// Picks `p` distinct identities and `k` entries of each. Identities with
/// fewer than `k` entries are drawn with replacement.
pub fn pk_sample<T: Clone>(
    index: &BTreeMap<u64, Vec<T>>,
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(T, u64)>> {
    let ids: Vec<u64> = index.iter().filter(|(_, v)| !v.is_empty()).map(|(&id, _)| id).collect();
    if ids.len() < p {
        return Err(Error::Sampling(format!(
            "{p} identities requested, {} available",
            ids.len()
        )));
    }
    let mut batch = Vec::with_capacity(p * k);
    for &id in ids.choose_multiple(rng, p) {
        let items = &index[&id];
        if items.len() >= k {
            batch.extend(items.choose_multiple(rng, k).map(|t| (t.clone(), id)));
        } else {
            batch.extend((0..k).map(|_| (items.choose(rng).expect("non-empty").clone(), id)));
        }
    }
    Ok(batch)
}

fn check_triplet_labels(labels: &[u64]) -> Result<()> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Precondition(
            "triplet loss needs at least two distinct labels".into(),
        ));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Precondition(format!("label {l} occurs once in the batch")));
    }
    Ok(())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Adds `scale · ∂d(a, b)/∂e_a` to row `a` of `grad` and its negation to row `b`.
fn distance_grad(emb: &Mat, a: usize, b: usize, scale: f64, grad: &mut Mat) {
    let d = distance(
        emb.row(a).as_slice().expect("row-major"),
        emb.row(b).as_slice().expect("row-major"),
    );
    if d == 0.0 {
        return;
    }
    for j in 0..emb.ncols() {
        let v = scale * (emb[[a, j]] - emb[[b, j]]) / d;
        grad[[a, j]] += v;
        grad[[b, j]] -= v;
    }
}

/// Triplet loss over a batch (one embedding per row) and its gradient with
/// respect to the embeddings.
pub fn triplet_loss_with_grad(
    embeddings: &Mat,
    labels: &[u64],
    margin: f64,
    mining: TripletMining,
) -> Result<(f64, Mat)> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: embeddings.nrows(),
            right: labels.len(),
        });
    }
    check_triplet_labels(labels)?;
    let n = labels.len();
    let rows: Vec<&[f64]> = embeddings
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("row-major"))
        .collect();
    let mut dist = Mat::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            dist[[i, j]] = distance(rows[i], rows[j]);
        }
    }
    let mut grad = Mat::zeros(embeddings.dim());
    let mut total = 0.0;
    match mining {
        TripletMining::BatchHard => {
            for a in 0..n {
                let mut pos = None::<usize>;
                let mut neg = None::<usize>;
                for j in 0..n {
                    if j == a {
                        continue;
                    }
                    if labels[j] == labels[a] {
                        if pos.is_none_or(|p| dist[[a, j]] > dist[[a, p]]) {
                            pos = Some(j);
                        }
                    } else if neg.is_none_or(|q| dist[[a, j]] < dist[[a, q]]) {
                        neg = Some(j);
                    }
                }
                let (p, q) = (pos.expect("checked"), neg.expect("checked"));
                let v = dist[[a, p]] - dist[[a, q]] + margin;
                if v > 0.0 {
                    total += v;
                    distance_grad(embeddings, a, p, 1.0 / n as f64, &mut grad);
                    distance_grad(embeddings, a, q, -1.0 / n as f64, &mut grad);
                }
            }
            Ok((total / n as f64, grad))
        }
        TripletMining::AllTriplets => {
            let mut active = Vec::new();
            let mut count = 0usize;
            for a in 0..n {
                for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
                    for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                        count += 1;
                        let v = dist[[a, p]] - dist[[a, q]] + margin;
                        if v > 0.0 {
                            total += v;
                            active.push((a, p, q));
                        }
                    }
                }
            }
            let w = 1.0 / count as f64;
            for (a, p, q) in active {
                distance_grad(embeddings, a, p, w, &mut grad);
                distance_grad(embeddings, a, q, -w, &mut grad);
            }
            Ok((total * w, grad))
        }
    }
}

pub fn triplet_loss(embeddings: &Mat, labels: &[u64], margin: f64) -> Result<f64> {
    triplet_loss_with_grad(embeddings, labels, margin, TripletMining::BatchHard).map(|(l, _)| l)
}

/// Mean softmax cross-entropy of `logits` (one row per sample) against class indices.
pub fn cross_entropy_mean(logits: &Mat, classes: &[usize]) -> Result<f64> {
    if logits.nrows() != classes.len() {
        return Err(Error::LengthMismatch {
            left: logits.nrows(),
            right: classes.len(),
        });
    }
    let mut total = 0.0;
    for (row, &c) in logits.rows().into_iter().zip(classes) {
        if c >= row.len() {
            return Err(Error::Range(format!("class {c} outside {} logits", row.len())));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[c];
    }
    Ok(total / classes.len() as f64)
}

/// Cross-entropy plus triplet loss, unit weights. `labels` are class indices.
pub fn reid_loss(logits: &Mat, embeddings: &Mat, labels: &[usize], config: &FinetuneConfig) -> Result<f64> {
    let ce = cross_entropy_mean(logits, labels)?;
    let ids: Vec<u64> = labels.iter().map(|&l| l as u64).collect();
    let (tri, _) = triplet_loss_with_grad(embeddings, &ids, config.margin, config.mining)?;
    Ok(ce + tri)
}

/// Backbone plus an identity classifier over the pooled embedding.
#[derive(Debug, Clone)]
pub struct ReidModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    classifier: Option<(ParamId, ParamId)>,
}

impl ReidModel {
    /// Fresh backbone; a classifier is attached when `classes > 0`.
    pub fn new(config: ModelConfig, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&config, &mut params, rng);
        let classifier = (classes > 0).then(|| {
            let d = config.embed_dim();
            let w = params.add("head.w", normal(rng, d, classes, 0.01), ParamGroup::Head, true);
            let b = params.add("head.b", Mat::zeros((1, classes)), ParamGroup::Head, false);
            (w, b)
        });
        params.round_to_f32();
        Ok(Self {
            config,
            params,
            backbone,
            classifier,
        })
    }

    /// Replaces every backbone array with the one stored under the same name.
    pub fn load_backbone(&mut self, stored: &ParamStore) -> Result<()> {
        let ids = self.backbone.param_ids();
        for id in &ids {
            let name = &self.params.entry(*id).name;
            let src = stored
                .id(name)
                .ok_or_else(|| Error::Dimension(format!("checkpoint lacks backbone array `{name}`")))?;
            if stored.get(src).dim() != self.params.get(*id).dim() {
                return Err(Error::Dimension(format!(
                    "backbone array `{name}` has a different shape"
                )));
            }
        }
        let copied = self.params.copy_matching(stored, "visual.");
        debug_assert_eq!(copied, ids.len());
        Ok(())
    }

    /// Backbone plus, when present in `stored`, the classifier.
    pub fn from_params(config: ModelConfig, stored: &ParamStore) -> Result<Self> {
        let classes = stored.id("head.b").map_or(0, |id| stored.get(id).ncols());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, classes, &mut rng)?;
        model.load_backbone(stored)?;
        if classes > 0 {
            model.params.copy_matching(stored, "head.");
        }
        Ok(model)
    }

    pub fn classes(&self) -> usize {
        self.classifier.map_or(0, |(_, b)| self.params.get(b).ncols())
    }

    /// Records the pooled embedding (1 × D) and, if a classifier exists, logits.
    pub fn forward_var(&self, g: &mut Graph, image: Var) -> Result<(Var, Option<Var>)> {
        let (features, _, _) = self.backbone.forward(g, image)?;
        let emb = g.pool_channels(features);
        let logits = self.classifier.map(|(w, b)| {
            let (w, b) = (g.param(w), g.param(b));
            g.linear(emb, w, b)
        });
        Ok((emb, logits))
    }

    /// Pooled backbone embedding of a channel-major image.
    pub fn embed(&self, image: &Mat) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let x = g.input(image.clone());
        let (features, _, _) = self.backbone.forward(&mut g, x)?;
        let emb = g.pool_channels(features);
        Ok(g.value(emb).iter().copied().collect())
    }
}

/// A labelled training image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidSample {
    pub image: Mat,
    pub identity: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogLine {
    pub step: usize,
    pub loss: f64,
    pub loss_ce: f64,
    pub loss_triplet: f64,
    pub lr: f64,
}

/// Identity to class index, in ascending identity order.
pub fn class_map(samples: &[ReidSample]) -> BTreeMap<u64, usize> {
    let ids: std::collections::BTreeSet<u64> = samples.iter().map(|s| s.identity).collect();
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// Loss terms and parameter gradients of one batch.
fn batch_step(
    model: &ReidModel,
    batch: &[(usize, u64)],
    samples: &[ReidSample],
    classes: &BTreeMap<u64, usize>,
    config: &FinetuneConfig,
) -> Result<(f64, f64, Vec<Mat>)> {
    let n = batch.len();
    let mut graphs = Vec::with_capacity(n);
    let mut embeddings = Mat::zeros((n, model.config.embed_dim()));
    let mut ce = 0.0;
    for (row, &(i, id)) in batch.iter().enumerate() {
        let mut g = Graph::new(&model.params);
        let x = g.input(samples[i].image.clone());
        let (emb, logits) = model.forward_var(&mut g, x)?;
        let logits = logits.ok_or_else(|| Error::Precondition("model has no classifier".into()))?;
        let loss = g.cross_entropy(logits, &[classes[&id]]);
        ce += g.scalar(loss) / n as f64;
        embeddings.row_mut(row).assign(&g.value(emb).row(0));
        graphs.push((g, emb, loss));
    }
    let labels: Vec<u64> = batch.iter().map(|&(_, id)| id).collect();
    let (tri, emb_grad) = triplet_loss_with_grad(&embeddings, &labels, config.margin, config.mining)?;
    let mut grads = model.params.zeros_like();
    for (row, (g, emb, loss)) in graphs.iter().enumerate() {
        let seed_emb = emb_grad.row(row).to_owned().insert_axis(ndarray::Axis(0));
        g.backward(&[(*loss, Mat::from_elem((1, 1), 1.0 / n as f64)), (*emb, seed_emb)])
            .accumulate_into(&mut grads, 1.0);
    }
    Ok((ce, tri, grads))
}

/// Fine-tunes `model` in place on `samples`; its classifier must cover every
/// identity in `samples` (see [`class_map`]).
pub fn run_finetune(
    config: &FinetuneConfig,
    model: &mut ReidModel,
    samples: &[ReidSample],
) -> Result<Vec<FinetuneLogLine>> {
    config.validate()?;
    let classes = class_map(samples);
    if classes.len() < 2 {
        return Err(Error::Precondition(format!(
            "triplet loss needs two identities, dataset has {}",
            classes.len()
        )));
    }
    if model.classes() != classes.len() {
        return Err(Error::Dimension(format!(
            "classifier has {} outputs for {} identities",
            model.classes(),
            classes.len()
        )));
    }
    let mut index: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        index.entry(s.identity).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6669_6e65);
    let mut adam = Adam::new(
        &model.params,
        config.beta1,
        config.beta2,
        config.eps,
        config.weight_decay,
    );
    let warmup = config.warmup_steps();
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = pk_sample(&index, config.p, config.k, &mut rng)?;
        let (ce, tri, grads) = batch_step(model, &batch, samples, &classes, config)?;
        if !(ce + tri).is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss {} (ce {ce}, triplet {tri})", ce + tri),
            });
        }
        let lr = config.lr * warmup_constant(step + 1, warmup);
        adam.step(&mut model.params, &grads, lr).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { step, reason },
            other => other,
        })?;
        log::debug!("finetune step {step}: ce {ce:.4} triplet {tri:.4}");
        log.push(FinetuneLogLine {
            step,
            loss: ce + tri,
            loss_ce: ce,
            loss_triplet: tri,
            lr,
        });
    }
    model.params.round_to_f32();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_hand_values() {
        // anchor 0 at origin; positive at 0.2, negative at 1.0 on one axis
        let emb = Mat::from_shape_vec((4, 1), vec![0.0, 0.2, 1.0, 1.2]).unwrap();
        let labels = [0, 0, 1, 1];
        let (l, _) = triplet_loss_with_grad(&emb, &labels, 0.5, TripletMining::BatchHard).unwrap();
        // every anchor: d_ap = 0.2, d_an = 0.8 -> hinge 0
        assert_eq!(l, 0.0);
        let emb = Mat::from_shape_vec((4, 1), vec![0.0, 1.0, -0.8, 5.0]).unwrap();
        let (l, _) = triplet_loss_with_grad(&emb, &[0, 0, 1, 1], 0.5, TripletMining::BatchHard).unwrap();
        // anchor 0: d_ap 1.0, d_an 0.8 -> 0.7; anchor 1: 1.0 - 1.8 + 0.5 < 0;
        // anchor 2: d_ap 5.8, d_an 0.8 -> 5.5; anchor 3: 5.8 - 4.0 + 0.5 = 2.3
        assert!((l - (0.7 + 5.5 + 2.3) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_label_is_rejected() {
        let emb = Mat::zeros((3, 2));
        assert!(matches!(
            triplet_loss(&emb, &[0, 0, 1], 0.5),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            triplet_loss(&emb, &[0, 0, 0], 0.5),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pk_batch_shape() {
        let index: BTreeMap<u64, Vec<u32>> = (0..20).map(|id| (id, (0..6).collect())).collect();
        let batch = pk_sample(&index, 16, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(batch.len(), 64);
        let two: BTreeMap<u64, Vec<u32>> = [(0, vec![10, 11])].into_iter().collect();
        let batch = pk_sample(&two, 1, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(batch.iter().all(|(t, id)| *id == 0 && (*t == 10 || *t == 11)));
        assert!(matches!(
            pk_sample(&two, 2, 1, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Mat::zeros((3, 7));
        assert!((cross_entropy_mean(&logits, &[0, 3, 6]).unwrap() - 7f64.ln()).abs() < 1e-12);
    }
}
