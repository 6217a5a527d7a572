//! Learned reward `F(o, r)` in (0, 1) and the score-function policy gradient
//! that pushes the speaker toward expressions the reward accepts.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Linear, Lstm, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::encode_final;
use crate::optim::{learning_rate, Adam};
use crate::rng::Rng;
use crate::speaker::SequencePolicy;
use crate::visual::FeatureCache;
use crate::world::{Dataset, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub halve_every: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            hidden: 32,
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.003,
            halve_every: 2000,
        }
    }
}

/// Object/expression matcher with its own fusion layer, word embedding and
/// LSTM, ending in one logistic unit. Parameters live under `reward.`.
#[derive(Clone, Debug)]
pub struct RewardModel {
    pub fuse: Linear,
    pub lstm: Lstm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub vocab_size: usize,
    pub embed: usize,
}

pub const REWARD_EMBED: &str = "reward.embed";

/// Distance kept between a reward and either end of the unit interval.
pub const SCORE_FLOOR: f64 = f64::EPSILON;

impl RewardModel {
    pub fn new(feature_dim: usize, vocab_size: usize, cfg: &RewardConfig) -> Self {
        Self {
            fuse: Linear::new("reward.fuse", feature_dim, cfg.embed),
            lstm: Lstm::new("reward.lstm", cfg.embed, cfg.hidden),
            mlp1: Linear::new("reward.mlp1", cfg.embed + cfg.hidden, cfg.hidden),
            mlp2: Linear::new("reward.mlp2", cfg.hidden, 1),
            vocab_size,
            embed: cfg.embed,
        }
    }

    pub fn init(&self, rng: &mut Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        store.insert(
            REWARD_EMBED,
            Array::uniform(&[self.vocab_size, self.embed], 0.1, rng),
        )?;
        self.fuse.init(&mut store, rng)?;
        self.lstm.init(&mut store, rng)?;
        self.mlp1.init(&mut store, rng)?;
        self.mlp2.init(&mut store, rng)?;
        Ok(store)
    }

    /// Pre-sigmoid match scores, `n x 1`.
    pub fn logits<R: AsRef<[f64]>, S: AsRef<[usize]>>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[R],
        exprs: &[S],
    ) -> Result<Var> {
        if features.len() != exprs.len() {
            return Err(Error::Shape {
                op: "reward",
                lhs: vec![features.len()],
                rhs: vec![exprs.len()],
            });
        }
        let x = g.constant(Array::from_rows(features)?);
        let r = self.fuse.forward(g, store, x)?;
        let table = g.param(store, REWARD_EMBED)?;
        let seqs: Vec<&[usize]> = exprs.iter().map(|e| e.as_ref()).collect();
        let enc = encode_final(g, store, &self.lstm, table, &seqs)?;
        let joint = g.concat(&[r, enc])?;
        let h = self.mlp1.forward(g, store, joint)?;
        let h = g.relu(h);
        self.mlp2.forward(g, store, h)
    }

    /// `F(o, r)` for every pair, computed without a gradient path. Saturated
    /// logits are held just inside the open unit interval.
    pub fn score<R: AsRef<[f64]>, S: AsRef<[usize]>>(
        &self,
        store: &ParamStore,
        features: &[R],
        exprs: &[S],
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(features.len());
        for (f, e) in features.chunks(512).zip(exprs.chunks(512)) {
            let mut g = Graph::eval();
            let z = self.logits(&mut g, store, f, e)?;
            let s = g.sigmoid(z);
            out.extend(
                g.value(s)
                    .data()
                    .iter()
                    .map(|v| v.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)),
            );
        }
        Ok(out)
    }
}

/// Mean binary cross-entropy of logits `z` (`n x 1`) against 0/1 labels,
/// via `log softmax([0, z])`.
pub fn bce_loss(g: &mut Graph, z: Var, labels: &[bool]) -> Result<Var> {
    let n = g.value(z).rows();
    let zero = g.constant(Array::zeros(&[n, 1]));
    let pair = g.concat(&[zero, z])?;
    let lp = g.log_softmax(pair)?;
    let idx: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let picked = g.pick(lp, &idx)?;
    let m = g.mean(picked)?;
    Ok(g.scale(m, -1.0))
}

/// One labelled (object, expression) pair; features come from a
/// [`FeatureCache`].
#[derive(Clone, Debug, PartialEq)]
pub struct RewardExample {
    pub scene: usize,
    pub object: usize,
    pub tokens: Vec<usize>,
    pub label: bool,
}

/// Every ground-truth pair of `split` plus, for each, one mismatch: the same
/// object with an expression of another object in its scene.
pub fn reward_examples(dataset: &Dataset, split: Split, rng: &mut Rng) -> Vec<RewardExample> {
    let mut out = Vec::new();
    for (si, scene) in dataset.split(split) {
        for r in &scene.refs {
            let Some(oi) = scene.object_index(r.target_id) else {
                continue;
            };
            out.push(RewardExample {
                scene: si,
                object: oi,
                tokens: r.tokens.clone(),
                label: true,
            });
            let others: Vec<_> = scene
                .refs
                .iter()
                .filter(|x| x.target_id != r.target_id)
                .collect();
            if let Some(neg) = others.choose(rng) {
                out.push(RewardExample {
                    scene: si,
                    object: oi,
                    tokens: neg.tokens.clone(),
                    label: false,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub steps: u64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Minimises cross-entropy with Adam for `cfg.epochs` shuffled passes, then
/// freezes the store.
pub fn pretrain_reward(
    model: &RewardModel,
    store: &mut ParamStore,
    features: &FeatureCache,
    examples: &[RewardExample],
    cfg: &RewardConfig,
    rng: &mut Rng,
) -> Result<RewardReport> {
    if examples.is_empty() {
        return Err(Error::Empty("reward training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("reward batch size must be positive".into()));
    }
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0u64;
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&RewardExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let feats: Vec<&[f64]> = batch
                .iter()
                .map(|e| features.get(e.scene, e.object))
                .collect();
            let toks: Vec<&[usize]> = batch.iter().map(|e| &e.tokens[..]).collect();
            let labels: Vec<bool> = batch.iter().map(|e| e.label).collect();
            let mut g = Graph::train();
            let z = model.logits(&mut g, store, &feats, &toks)?;
            let loss = bce_loss(&mut g, z, &labels)?;
            last = g.value(loss).item();
            if !last.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: "reward cross-entropy".into(),
                });
            }
            g.backward(loss)?;
            let grads = store.gradients(&g);
            adam.step(
                store,
                &grads,
                learning_rate(cfg.learning_rate, cfg.halve_every, step),
            )?;
            step += 1;
        }
    }
    let train_accuracy = reward_accuracy(model, store, features, examples)?;
    store.freeze();
    Ok(RewardReport {
        steps: step,
        final_loss: last,
        train_accuracy,
    })
}

/// Fraction of pairs whose score falls on the side of 0.5 given by the label.
pub fn reward_accuracy(
    model: &RewardModel,
    store: &ParamStore,
    features: &FeatureCache,
    examples: &[RewardExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("reward evaluation set"));
    }
    let feats: Vec<&[f64]> = examples
        .iter()
        .map(|e| features.get(e.scene, e.object))
        .collect();
    let toks: Vec<&[usize]> = examples.iter().map(|e| &e.tokens[..]).collect();
    let scores = model.score(store, &feats, &toks)?;
    let correct = scores
        .iter()
        .zip(examples)
        .filter(|(s, e)| (**s > 0.5) == e.label)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Surrogate whose gradient is the policy-gradient estimate
/// `-weight * mean_b (F_b - baseline) * grad log p(w_b)`.
pub fn policy_gradient_loss(
    g: &mut Graph,
    log_prob: Var,
    rewards: &[f64],
    baseline: f64,
    weight: f64,
) -> Result<Var> {
    let n = g.value(log_prob).rows();
    if rewards.len() != n {
        return Err(Error::Shape {
            op: "policy_gradient",
            lhs: vec![n],
            rhs: vec![rewards.len()],
        });
    }
    let adv: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
    let a = g.constant(Array::new(vec![n, 1], adv)?);
    let weighted = g.mul(log_prob, a)?;
    let m = g.mean(weighted)?;
    Ok(g.scale(m, -weight))
}

/// Softmax policy with one logit table per step, each row indexed by the
/// previous token (step zero has a single row). Small enough to enumerate.
pub struct TabularPolicy<'a> {
    pub store: &'a ParamStore,
    pub rows: usize,
    step: usize,
}

impl<'a> TabularPolicy<'a> {
    pub fn table_name(step: usize) -> String {
        format!("tabular.{step}")
    }

    /// Tables for `steps` steps over `vocab` tokens with logits drawn from
    /// `N(0, scale^2)`.
    pub fn init(vocab: usize, steps: usize, scale: f64, rng: &mut Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for t in 0..steps {
            let rows = if t == 0 { 1 } else { vocab };
            store.insert(
                Self::table_name(t),
                Array::normal(&[rows, vocab], scale, rng),
            )?;
        }
        Ok(store)
    }

    pub fn new(store: &'a ParamStore, rows: usize) -> Self {
        Self {
            store,
            rows,
            step: 0,
        }
    }
}

impl SequencePolicy for TabularPolicy<'_> {
    fn rows(&self) -> usize {
        self.rows
    }

    fn next_logits(&mut self, g: &mut Graph, prev: &[usize]) -> Result<Var> {
        let t = self.step;
        self.step += 1;
        let table = g.param(self.store, &Self::table_name(t))?;
        let idx: Vec<usize> = if t == 0 {
            vec![0; prev.len()]
        } else {
            prev.to_vec()
        };
        g.embedding(table, &idx)
    }
}
