//! Multi-task training of speaker, listener and reinforcer on shared
//! triplets, with learning-rate halving, periodic validation and resumable
//! checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::eval::{self, ComprehensionMode, Query, RerankWeights, Scorer};
use crate::listener::{similarity, triplet_loss};
use crate::model::{Model, ModelConfig};
use crate::optim::{learning_rate, Adam};
use crate::reinforcer::{
    policy_gradient_loss, pretrain_reward, reward_accuracy, reward_examples, RewardConfig,
    RewardModel, RewardReport,
};
use crate::rng::{self, Rng};
use crate::speaker::{mmi_loss, sample_sequences, Margins};
use crate::visual::{FeatureCache, VisualConfig};
use crate::world::{Dataset, Split, Vocabulary, DEFAULT_MAX_LEN};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Every knob of a run. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub halve_every: u64,
    pub batch_size: usize,
    pub embed: usize,
    pub hidden: usize,
    pub joint: usize,
    pub mlp_dropout: f64,
    pub word_dropout: f64,
    pub lstm_dropout: f64,
    pub margin: f64,
    pub lambda_s1: f64,
    pub lambda_s2: f64,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub lambda_r: f64,
    pub use_nll: bool,
    pub use_mmi: bool,
    pub use_listener: bool,
    pub use_reinforcer: bool,
    /// Decay of the moving-average reward baseline; zero disables it.
    pub reward_baseline: f64,
    pub sample_temperature: f64,
    pub reward_embed: usize,
    pub reward_hidden: usize,
    pub reward_epochs: usize,
    pub reward_batch_size: usize,
    pub reward_learning_rate: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub patience: u32,
    /// Cap on validation queries per evaluation; zero means all.
    pub val_limit: usize,
    pub beam_width: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub ensemble_lambda: f64,
    pub rerank_lambda1: f64,
    pub rerank_lambda2: f64,
    pub rerank_lambda3: f64,
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let reward = RewardConfig::default();
        let rerank = RerankWeights::default();
        Self {
            seed: 0,
            learning_rate: 0.0004,
            halve_every: 2000,
            batch_size: 32,
            embed: 64,
            hidden: 64,
            joint: 64,
            mlp_dropout: 0.2,
            word_dropout: 0.5,
            lstm_dropout: 0.5,
            margin: 0.1,
            lambda_s1: 1.0,
            lambda_s2: 0.1,
            lambda_l1: 1.0,
            lambda_l2: 1.0,
            lambda_r: 1.0,
            use_nll: true,
            use_mmi: true,
            use_listener: true,
            use_reinforcer: true,
            reward_baseline: 0.0,
            sample_temperature: 1.0,
            reward_embed: reward.embed,
            reward_hidden: reward.hidden,
            reward_epochs: reward.epochs,
            reward_batch_size: reward.batch_size,
            reward_learning_rate: reward.learning_rate,
            max_steps: 6000,
            eval_every: 500,
            patience: 10,
            val_limit: 0,
            beam_width: 3,
            max_len: DEFAULT_MAX_LEN,
            temperature: 1.0,
            ensemble_lambda: 1.0,
            rerank_lambda1: rerank.lambda1,
            rerank_lambda2: rerank.lambda2,
            rerank_lambda3: rerank.lambda3,
            jitter: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("learning_rate", self.learning_rate),
            ("margin", self.margin),
            ("lambda_s1", self.lambda_s1),
            ("lambda_s2", self.lambda_s2),
            ("lambda_l1", self.lambda_l1),
            ("lambda_l2", self.lambda_l2),
            ("lambda_r", self.lambda_r),
            ("reward_learning_rate", self.reward_learning_rate),
            ("sample_temperature", self.sample_temperature),
            ("temperature", self.temperature),
            ("ensemble_lambda", self.ensemble_lambda),
            ("rerank_lambda1", self.rerank_lambda1),
            ("rerank_lambda2", self.rerank_lambda2),
            ("rerank_lambda3", self.rerank_lambda3),
            ("jitter", self.jitter),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.reward_baseline) {
            return Err(Error::Config(
                "reward_baseline decay must lie in [0, 1)".into(),
            ));
        }
        if self.batch_size == 0 || self.reward_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "beam_width and max_len must be positive".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.use_reinforcer && self.sample_temperature == 0.0 {
            return Err(Error::Config(
                "policy-gradient sampling needs a positive temperature".into(),
            ));
        }
        self.model_config(2).validate()?;
        self.terms().ensure_nonempty()
    }

    /// Applies `key=value` overrides; values parse as JSON, falling back to a
    /// bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        let obj = v.as_object_mut().expect("config serialises to an object");
        for s in sets {
            let s = s.as_ref();
            let (k, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
            let k = k.trim();
            if !obj.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            let val = serde_json::from_str(raw.trim())
                .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
            obj.insert(k.to_string(), val);
        }
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed: self.embed,
            hidden: self.hidden,
            joint: self.joint,
            visual: VisualConfig::default(),
            listener_input: self.use_listener,
            word_dropout: self.word_dropout,
            lstm_dropout: self.lstm_dropout,
            mlp_dropout: self.mlp_dropout,
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            embed: self.reward_embed,
            hidden: self.reward_hidden,
            epochs: self.reward_epochs,
            batch_size: self.reward_batch_size,
            learning_rate: self.reward_learning_rate,
            halve_every: self.halve_every,
        }
    }

    pub fn rerank(&self) -> RerankWeights {
        RerankWeights {
            lambda1: self.rerank_lambda1,
            lambda2: self.rerank_lambda2,
            lambda3: self.rerank_lambda3,
        }
    }

    pub fn terms(&self) -> Terms {
        Terms {
            nll: self.use_nll,
            mmi: self.use_mmi,
            listener: self.use_listener,
            policy_gradient: self.use_reinforcer && self.lambda_r > 0.0,
        }
    }

    pub fn speaker_margins(&self) -> Margins {
        Margins {
            margin: self.margin,
            object_weight: self.lambda_s1,
            expression_weight: self.lambda_s2,
        }
    }

    pub fn listener_margins(&self) -> Margins {
        Margins {
            margin: self.margin,
            object_weight: self.lambda_l1,
            expression_weight: self.lambda_l2,
        }
    }
}

/// Which loss terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub nll: bool,
    pub mmi: bool,
    pub listener: bool,
    pub policy_gradient: bool,
}

impl Terms {
    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.nll || self.mmi || self.listener || self.policy_gradient {
            Ok(())
        } else {
            Err(Error::Config(
                "every loss term is disabled; the objective is empty".into(),
            ))
        }
    }
}

/// A training expression with the scene and object position it refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene: usize,
    pub object: usize,
    pub tokens: Vec<usize>,
}

/// Training split with features and a per-object index of its expressions.
pub struct TrainData {
    pub dataset: Dataset,
    pub features: FeatureCache,
    pub examples: Vec<Example>,
    by_object: BTreeMap<(usize, usize), Vec<usize>>,
}

impl TrainData {
    pub fn new(dataset: Dataset, visual: &VisualConfig) -> Result<Self> {
        let features = FeatureCache::build(&dataset, visual)?;
        let examples: Vec<Example> = eval::queries(&dataset, Split::Train)
            .into_iter()
            .map(|q| Example {
                scene: q.scene,
                object: q.target,
                tokens: q.tokens,
            })
            .collect();
        if examples.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let mut by_object: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            by_object.entry((e.scene, e.object)).or_default().push(i);
        }
        Ok(Self {
            dataset,
            features,
            examples,
            by_object,
        })
    }

    pub fn objects_in(&self, scene: usize) -> usize {
        self.features.scenes[scene].len()
    }
}

/// Contrastive partners of one positive: another object `o_k` of the scene
/// and an expression `r_j` written for it. Invalid sides have mask zero and
/// repeat the positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub positive: usize,
    pub neg_object: usize,
    pub neg_expr: Vec<usize>,
    pub object_valid: bool,
    pub expr_valid: bool,
}

/// One `(o_k, r_j)` draw per positive, shared by the speaker and listener
/// losses of the same step.
pub fn sample_triplets(data: &TrainData, batch: &[usize], rng: &mut Rng) -> Vec<Triplet> {
    batch
        .iter()
        .map(|&p| {
            let e = &data.examples[p];
            let n = data.objects_in(e.scene);
            if n < 2 {
                return Triplet {
                    positive: p,
                    neg_object: e.object,
                    neg_expr: e.tokens.clone(),
                    object_valid: false,
                    expr_valid: false,
                };
            }
            let mut k = rng.random_range(0..n - 1);
            if k >= e.object {
                k += 1;
            }
            let expr = data
                .by_object
                .get(&(e.scene, k))
                .and_then(|ids| ids.choose(rng))
                .map(|&j| data.examples[j].tokens.clone());
            Triplet {
                positive: p,
                neg_object: k,
                expr_valid: expr.is_some(),
                neg_expr: expr.unwrap_or_else(|| e.tokens.clone()),
                object_valid: true,
            }
        })
        .collect()
}

/// Frozen reward function used by the policy-gradient term.
#[derive(Clone, Copy)]
pub struct Reward<'a> {
    pub model: &'a RewardModel,
    pub store: &'a ParamStore,
}

/// Scalar objective and the value of each active term.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub nll: Option<f64>,
    pub mmi: Option<f64>,
    pub listener: Option<f64>,
    pub policy_gradient: Option<f64>,
    /// Mean reward of the sampled expressions.
    pub mean_reward: Option<f64>,
}

/// Builds the joint objective for one batch. Every random draw comes from
/// streams derived from `step_seed`, one per term, so switching a term off
/// leaves the others' values untouched.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    data: &TrainData,
    triplets: &[Triplet],
    cfg: &TrainConfig,
    terms: Terms,
    reward: Option<Reward<'_>>,
    baseline: f64,
    step_seed: u64,
) -> Result<LossParts> {
    terms.ensure_nonempty()?;
    if triplets.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if terms.policy_gradient && reward.is_none() {
        return Err(Error::Config(
            "policy-gradient term needs a reward model".into(),
        ));
    }
    let n = triplets.len();
    let pos: Vec<&Example> = triplets
        .iter()
        .map(|t| &data.examples[t.positive])
        .collect();
    let mut rows: Vec<&[f64]> = pos
        .iter()
        .map(|e| data.features.get(e.scene, e.object))
        .collect();
    rows.extend(
        triplets
            .iter()
            .zip(&pos)
            .map(|(t, e)| data.features.get(e.scene, t.neg_object)),
    );
    let obj_mask: Vec<f64> = triplets
        .iter()
        .map(|t| f64::from(u8::from(t.object_valid)))
        .collect();
    let expr_mask: Vec<f64> = triplets
        .iter()
        .map(|t| f64::from(u8::from(t.expr_valid)))
        .collect();
    let pos_idx: Vec<usize> = (0..n).collect();
    let neg_idx: Vec<usize> = (n..2 * n).collect();
    let r_i: Vec<&[usize]> = pos.iter().map(|e| &e.tokens[..]).collect();
    let r_j: Vec<&[usize]> = triplets.iter().map(|t| &t.neg_expr[..]).collect();
    let stream = |label: &str| rng::stream(step_seed, label);

    let fused = model.fuse_rows(g, store, &rows)?;
    let views = if model.config.listener_input || terms.listener {
        Some(
            model
                .listener
                .object_view(g, store, fused, &mut stream("dropout/object"))?,
        )
    } else {
        None
    };
    let cond_all = model.speaker_input(g, fused, views)?;
    let cond_pos = g.embedding(cond_all, &pos_idx)?;

    let mut parts: Vec<Var> = Vec::new();
    let mut out = LossParts {
        total: cond_pos,
        nll: None,
        mmi: None,
        listener: None,
        policy_gradient: None,
        mean_reward: None,
    };
    if terms.nll || terms.mmi {
        let speaker = &model.speaker;
        let lp_pos =
            speaker.log_likelihood(g, store, cond_pos, &r_i, &mut stream("dropout/speaker-pos"))?;
        if terms.nll {
            let m = g.mean(lp_pos)?;
            let l = g.scale(m, -1.0);
            out.nll = Some(g.value(l).item());
            parts.push(l);
        }
        if terms.mmi {
            let cond_neg = g.embedding(cond_all, &neg_idx)?;
            let lp_obj = speaker.log_likelihood(
                g,
                store,
                cond_neg,
                &r_i,
                &mut stream("dropout/speaker-object"),
            )?;
            let lp_expr = speaker.log_likelihood(
                g,
                store,
                cond_pos,
                &r_j,
                &mut stream("dropout/speaker-expression"),
            )?;
            let l = mmi_loss(
                g,
                lp_pos,
                lp_obj,
                lp_expr,
                &obj_mask,
                &expr_mask,
                cfg.speaker_margins(),
            )?;
            out.mmi = Some(g.value(l).item());
            parts.push(l);
        }
    }
    if terms.listener {
        let ov = views.ok_or_else(|| Error::Config("listener loss needs object views".into()))?;
        let mut exprs = r_i.clone();
        exprs.extend(&r_j);
        let ev =
            model
                .listener
                .expression_view(g, store, &exprs, &mut stream("dropout/expression"))?;
        let e_i = g.embedding(ev, &pos_idx)?;
        let e_j = g.embedding(ev, &neg_idx)?;
        let o_i = g.embedding(ov, &pos_idx)?;
        let o_k = g.embedding(ov, &neg_idx)?;
        let s_pos = similarity(g, e_i, o_i)?;
        let s_obj = similarity(g, e_i, o_k)?;
        let s_expr = similarity(g, e_j, o_i)?;
        let l = triplet_loss(
            g,
            s_pos,
            s_obj,
            s_expr,
            &obj_mask,
            &expr_mask,
            cfg.listener_margins(),
        )?;
        out.listener = Some(g.value(l).item());
        parts.push(l);
    }
    if terms.policy_gradient {
        let reward = reward.expect("checked above");
        let mut pg_rng = stream("dropout/policy");
        let mut policy = model.speaker.policy(g, store, cond_pos, &mut pg_rng)?;
        let samples = sample_sequences(
            g,
            &mut policy,
            cfg.sample_temperature,
            cfg.max_len,
            &mut stream("sample"),
        )?;
        let feats = &rows[..n];
        let f = reward
            .model
            .score(reward.store, feats, &samples.sequences)?;
        let l = policy_gradient_loss(g, samples.log_prob, &f, baseline, cfg.lambda_r)?;
        out.mean_reward = Some(f.iter().sum::<f64>() / n as f64);
        out.policy_gradient = Some(g.value(l).item());
        parts.push(l);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    out.total = total;
    Ok(out)
}

/// Held-out quality of the pretrained reward function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardState {
    pub params: ParamStore,
    pub report: RewardReport,
    pub heldout_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub val_accuracy: f64,
    pub loss: f64,
}

/// Progress that is not parameters or optimiser moments.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub best_params: Option<ParamStore>,
    pub best_val: Option<f64>,
    pub best_step: u64,
    pub stale_evals: u32,
    pub baseline: f64,
    pub stopped_early: bool,
    /// Mean loss over steps since the last evaluation.
    pub running_loss: f64,
    pub running_steps: u64,
    pub history: Vec<EvalRecord>,
}

/// Complete training state: reloading it continues the run bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub params: ParamStore,
    pub reward: Option<RewardState>,
    pub optimizer_state: Adam,
    pub step: u64,
    pub rng: Rng,
    pub progress: Progress,
}

impl Checkpoint {
    /// Parameters with the best validation accuracy, else the latest.
    pub fn eval_params(&self) -> &ParamStore {
        self.progress.best_params.as_ref().unwrap_or(&self.params)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_words(self.vocab.clone())
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.model_config(self.vocab.len()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Replaces `path` with `bytes` so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Statistics of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub nll: Option<f64>,
    pub mmi: Option<f64>,
    pub listener: Option<f64>,
    pub policy_gradient: Option<f64>,
    pub mean_reward: Option<f64>,
    pub learning_rate: f64,
}

/// Owns the model, data and checkpointable state of a run.
pub struct Trainer {
    pub model: Model,
    pub reward_model: Option<RewardModel>,
    pub data: TrainData,
    pub state: Checkpoint,
    val_queries: Vec<Query>,
}

impl Trainer {
    /// Fresh run: initialises parameters and, when the reinforcer is on,
    /// pretrains and freezes the reward function.
    pub fn new(dataset: Dataset, vocab: &Vocabulary, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(vocab.len()))?;
        let params = model.init(&mut rng::stream(config.seed, "init"))?;
        let data = TrainData::new(dataset, &model.config.visual)?;
        let (reward_model, reward) = if config.use_reinforcer {
            let (m, s) = pretrain(&data, vocab.len(), &config)?;
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        let state = Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab: vocab.words().to_vec(),
            params,
            reward,
            optimizer_state: Adam::default(),
            step: 0,
            rng: rng::stream(config.seed, "train"),
            progress: Progress::default(),
            config,
        };
        Self::assemble(model, reward_model, data, state)
    }

    /// Continues from a checkpoint over the dataset it was trained on.
    pub fn resume(dataset: Dataset, state: Checkpoint) -> Result<Self> {
        state.config.validate()?;
        let model = state.model()?;
        let data = TrainData::new(dataset, &model.config.visual)?;
        let reward_model = match (&state.reward, state.config.use_reinforcer) {
            (Some(_), true) => Some(reward_model(&data, state.vocab.len(), &state.config)),
            (None, true) => {
                return Err(Error::Checkpoint(
                    "reinforcer enabled but no reward parameters".into(),
                ))
            }
            _ => None,
        };
        Self::assemble(model, reward_model, data, state)
    }

    fn assemble(
        model: Model,
        reward_model: Option<RewardModel>,
        data: TrainData,
        state: Checkpoint,
    ) -> Result<Self> {
        let mut val_queries = eval::queries(&data.dataset, Split::Val);
        if state.config.val_limit > 0 {
            val_queries.truncate(state.config.val_limit);
        }
        if let Some(r) = &state.reward {
            if !r.params.is_frozen() {
                return Err(Error::Checkpoint("reward parameters must be frozen".into()));
            }
        }
        Ok(Self {
            model,
            reward_model,
            data,
            state,
            val_queries,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.state.config.max_steps || self.state.progress.stopped_early
    }

    /// Draws a batch, builds the objective and applies one Adam update.
    pub fn step(&mut self) -> Result<StepStats> {
        let cfg = self.state.config.clone();
        let step_seed: u64 = self.state.rng.random();
        let mut batch_rng = rng::stream(step_seed, "batch");
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.random_range(0..self.data.examples.len()))
            .collect();
        let triplets = sample_triplets(&self.data, &batch, &mut rng::stream(step_seed, "triplets"));
        let reward = match (&self.reward_model, &self.state.reward) {
            (Some(model), Some(r)) => Some(Reward {
                model,
                store: &r.params,
            }),
            _ => None,
        };
        let mut g = Graph::train();
        let parts = joint_loss(
            &mut g,
            &self.model,
            &self.state.params,
            &self.data,
            &triplets,
            &cfg,
            cfg.terms(),
            reward,
            self.state.progress.baseline,
            step_seed,
        )?;
        let loss = g.value(parts.total).item();
        if !loss.is_finite() {
            return Err(self.non_finite(&triplets, "loss"));
        }
        g.backward(parts.total)?;
        let grads = self.state.params.gradients(&g);
        if grads.values().any(|a| !a.is_finite()) {
            return Err(self.non_finite(&triplets, "gradient"));
        }
        let lr = learning_rate(cfg.learning_rate, cfg.halve_every, self.state.step);
        self.state
            .optimizer_state
            .step(&mut self.state.params, &grads, lr)?;
        if let Some(f) = parts.mean_reward {
            if cfg.reward_baseline > 0.0 {
                let p = &mut self.state.progress;
                p.baseline = cfg.reward_baseline * p.baseline + (1.0 - cfg.reward_baseline) * f;
            }
        }
        self.state.step += 1;
        self.state.progress.running_loss += loss;
        self.state.progress.running_steps += 1;
        Ok(StepStats {
            step: self.state.step,
            loss,
            nll: parts.nll,
            mmi: parts.mmi,
            listener: parts.listener,
            policy_gradient: parts.policy_gradient,
            mean_reward: parts.mean_reward,
            learning_rate: lr,
        })
    }

    fn non_finite(&self, triplets: &[Triplet], what: &str) -> Error {
        let dump: Vec<String> = triplets
            .iter()
            .map(|t| {
                let e = &self.data.examples[t.positive];
                format!(
                    "scene={} object={} tokens={:?} neg_object={} neg_expr={:?}",
                    self.data.dataset.scenes[e.scene].id,
                    e.object,
                    e.tokens,
                    t.neg_object,
                    t.neg_expr
                )
            })
            .collect();
        Error::NonFinite {
            step: self.state.step,
            detail: format!("{what} is not finite; batch:\n{}", dump.join("\n")),
        }
    }

    /// Speaker-mode comprehension accuracy on the validation queries.
    pub fn validate(&self) -> Result<f64> {
        if self.val_queries.is_empty() {
            return Ok(0.0);
        }
        let scorer = Scorer::new(&self.model, &self.state.params, &self.data.features);
        let scores = scorer.score(&self.val_queries)?;
        let scenes = &self.data.dataset.scenes;
        let preds = eval::predictions(
            &scores,
            &self.val_queries,
            scenes,
            ComprehensionMode::Speaker,
            0.0,
        )?;
        Ok(eval::accuracy(&preds, &self.val_queries, scenes, scenes))
    }

    /// Validates, keeps the best parameters and updates early stopping.
    pub fn evaluate(&mut self) -> Result<EvalRecord> {
        let acc = self.validate()?;
        let p = &mut self.state.progress;
        let loss = if p.running_steps > 0 {
            p.running_loss / p.running_steps as f64
        } else {
            f64::NAN
        };
        p.running_loss = 0.0;
        p.running_steps = 0;
        let rec = EvalRecord {
            step: self.state.step,
            val_accuracy: acc,
            loss,
        };
        if p.best_val.is_none_or(|b| acc > b) {
            p.best_val = Some(acc);
            p.best_step = self.state.step;
            p.best_params = Some(self.state.params.clone());
            p.stale_evals = 0;
        } else {
            p.stale_evals += 1;
            if p.stale_evals >= self.state.config.patience {
                p.stopped_early = true;
            }
        }
        p.history.push(rec.clone());
        Ok(rec)
    }

    /// Steps until `max_steps` or early stopping, validating every
    /// `eval_every` steps and once at the end. `on_eval` sees each record.
    pub fn run(&mut self, mut on_eval: impl FnMut(&EvalRecord)) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
            if self.state.step.is_multiple_of(self.state.config.eval_every)
                || self.state.step == self.state.config.max_steps
            {
                let rec = self.evaluate()?;
                on_eval(&rec);
            }
        }
        if self.state.progress.best_params.is_none() {
            let rec = self.evaluate()?;
            on_eval(&rec);
        }
        Ok(())
    }

    /// Steps at most `n` times without evaluating.
    pub fn run_steps(&mut self, n: u64) -> Result<Vec<StepStats>> {
        let mut out = Vec::new();
        for _ in 0..n {
            if self.state.step >= self.state.config.max_steps {
                break;
            }
            out.push(self.step()?);
        }
        Ok(out)
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }
}

fn reward_model(data: &TrainData, vocab_size: usize, cfg: &TrainConfig) -> RewardModel {
    let dim = data
        .features
        .scenes
        .iter()
        .flatten()
        .next()
        .map_or(0, Vec::len);
    RewardModel::new(dim, vocab_size, &cfg.reward_config())
}

/// Fits the reward function on train pairs and measures it on val pairs.
pub fn pretrain(
    data: &TrainData,
    vocab_size: usize,
    cfg: &TrainConfig,
) -> Result<(RewardModel, RewardState)> {
    let model = reward_model(data, vocab_size, cfg);
    let mut params = model.init(&mut rng::stream(cfg.seed, "reward-init"))?;
    let train = reward_examples(
        &data.dataset,
        Split::Train,
        &mut rng::stream(cfg.seed, "reward-pairs"),
    );
    let report = pretrain_reward(
        &model,
        &mut params,
        &data.features,
        &train,
        &cfg.reward_config(),
        &mut rng::stream(cfg.seed, "reward-train"),
    )?;
    let held = reward_examples(
        &data.dataset,
        Split::Val,
        &mut rng::stream(cfg.seed, "reward-heldout"),
    );
    let heldout_accuracy = if held.is_empty() {
        f64::NAN
    } else {
        reward_accuracy(&model, &params, &data.features, &held)?
    };
    Ok((
        model,
        RewardState {
            params,
            report,
            heldout_accuracy,
        },
    ))
}

/// Trains to completion and returns the final checkpoint.
pub fn train(dataset: Dataset, vocab: &Vocabulary, config: TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(dataset, vocab, config)?;
    t.run(|_| {})?;
    Ok(t.into_checkpoint())
}

/// Values of a parameter store flattened in name order, for bitwise
/// comparisons.
pub fn fingerprint(store: &ParamStore) -> Vec<u64> {
    store
        .iter()
        .flat_map(|(_, a)| a.data().iter().map(|v| v.to_bits()))
        .collect()
}
