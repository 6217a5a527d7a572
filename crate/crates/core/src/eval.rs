//! Comprehension by speaker/listener ensembling, joint generation with a
//! duplicate-penalising energy, and the evaluation protocols built on them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, Rng};
use crate::speaker::{argmax, beam_search, greedy, sample_sequences, Hypothesis, SpeakerStepper};
use crate::visual::FeatureCache;
use crate::world::{denote, iou, jitter_boxes, Dataset, Scene, Split, Vocabulary};

/// How candidate objects are ranked for a query expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComprehensionMode {
    /// `argmax log P(r|o)`.
    Speaker,
    /// `argmax S(r, o)`.
    Listener,
    /// `argmax log P(r|o) + lambda * log((S + 1) / 2)`.
    Ensemble,
}

impl ComprehensionMode {
    pub const ALL: [ComprehensionMode; 3] = [Self::Speaker, Self::Listener, Self::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            Self::Speaker => "speaker",
            Self::Listener => "listener",
            Self::Ensemble => "ensemble",
        }
    }
}

impl FromStr for ComprehensionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown comprehension mode `{s}`")))
    }
}

impl fmt::Display for ComprehensionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Similarity shifted into `[0, 1]` and logged.
pub fn log_shifted(s: f64) -> f64 {
    ((s + 1.0) / 2.0).ln()
}

/// Per-object scores of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub log_prob: Vec<f64>,
    pub similarity: Vec<f64>,
}

impl QueryScores {
    pub fn combined(&self, mode: ComprehensionMode, lambda: f64) -> Vec<f64> {
        match mode {
            ComprehensionMode::Speaker => self.log_prob.clone(),
            ComprehensionMode::Listener => self.similarity.clone(),
            ComprehensionMode::Ensemble => self
                .log_prob
                .iter()
                .zip(&self.similarity)
                .map(|(lp, s)| {
                    if lambda == 0.0 {
                        *lp
                    } else {
                        lp + lambda * log_shifted(*s)
                    }
                })
                .collect(),
        }
    }
}

/// Position of the best score; ties go to the smallest object id.
pub fn best_object(scores: &[f64], ids: &[usize]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let mut best = 0;
    for i in 1..scores.len() {
        match scores[i].total_cmp(&scores[best]) {
            std::cmp::Ordering::Greater => best = i,
            std::cmp::Ordering::Equal if ids[i] < ids[best] => best = i,
            _ => {}
        }
    }
    Ok(best)
}

/// A query: an expression about object position `target` of scene position
/// `scene`.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub scene: usize,
    pub target: usize,
    pub tokens: Vec<usize>,
}

pub fn queries(dataset: &Dataset, split: Split) -> Vec<Query> {
    dataset
        .split(split)
        .flat_map(|(si, s)| {
            s.refs.iter().filter_map(move |r| {
                Some(Query {
                    scene: si,
                    target: s.object_index(r.target_id)?,
                    tokens: r.tokens.clone(),
                })
            })
        })
        .collect()
}

/// Graph rows per evaluation chunk.
const CHUNK_ROWS: usize = 2048;

/// A trained model with features for the scenes it is asked about.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub features: &'a FeatureCache,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore, features: &'a FeatureCache) -> Self {
        Self {
            model,
            store,
            features,
        }
    }

    /// Fused rows and, when needed, listener object views for the given
    /// (scene, object) pairs.
    fn objects(
        &self,
        g: &mut Graph,
        pairs: &[(usize, usize)],
        views: bool,
    ) -> Result<(Var, Option<Var>)> {
        let rows: Vec<&[f64]> = pairs
            .iter()
            .map(|&(s, o)| self.features.get(s, o))
            .collect();
        let fused = self.model.fuse_rows(g, self.store, &rows)?;
        let ov = if views || self.model.config.listener_input {
            let mut unused = rng::seeded(0);
            Some(
                self.model
                    .listener
                    .object_view(g, self.store, fused, &mut unused)?,
            )
        } else {
            None
        };
        Ok((fused, ov))
    }

    /// Speaker conditioning rows, one per pair.
    pub fn conditions(&self, pairs: &[(usize, usize)]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::eval();
        let (fused, ov) = self.objects(&mut g, pairs, false)?;
        let cond = self.model.speaker_input(&mut g, fused, ov)?;
        let v = g.value(cond);
        Ok((0..pairs.len()).map(|r| v.row(r).to_vec()).collect())
    }

    /// `log P(r|o)` and `S(r, o)` of every query against every object of its
    /// scene.
    pub fn score(&self, queries: &[Query]) -> Result<Vec<QueryScores>> {
        let mut out = Vec::with_capacity(queries.len());
        let mut start = 0;
        while start < queries.len() {
            let mut end = start;
            let mut rows = 0;
            while end < queries.len() && (end == start || rows < CHUNK_ROWS) {
                rows += self.features.scenes[queries[end].scene].len();
                end += 1;
            }
            out.extend(self.score_chunk(&queries[start..end])?);
            start = end;
        }
        Ok(out)
    }

    fn score_chunk(&self, qs: &[Query]) -> Result<Vec<QueryScores>> {
        let mut pairs = Vec::new();
        let mut pair_of = std::collections::HashMap::new();
        let mut obj_rows = Vec::new();
        let mut query_rows = Vec::new();
        let mut exprs: Vec<&[usize]> = Vec::new();
        for (qi, q) in qs.iter().enumerate() {
            let n = self.features.scenes[q.scene].len();
            if n == 0 {
                return Err(Error::Empty("candidate set"));
            }
            for o in 0..n {
                let idx = *pair_of.entry((q.scene, o)).or_insert_with(|| {
                    pairs.push((q.scene, o));
                    pairs.len() - 1
                });
                obj_rows.push(idx);
                query_rows.push(qi);
                exprs.push(&q.tokens);
            }
        }
        let mut g = Graph::eval();
        let (fused, ov) = self.objects(&mut g, &pairs, true)?;
        let ov = ov.expect("object views requested");
        let f_rows = g.embedding(fused, &obj_rows)?;
        let o_rows = g.embedding(ov, &obj_rows)?;
        let cond = self.model.speaker_input(&mut g, f_rows, Some(o_rows))?;
        let mut unused = rng::seeded(0);
        let lp =
            self.model
                .speaker
                .log_likelihood(&mut g, self.store, cond, &exprs, &mut unused)?;
        let q_exprs: Vec<&[usize]> = qs.iter().map(|q| &q.tokens[..]).collect();
        let ev = self
            .model
            .listener
            .expression_view(&mut g, self.store, &q_exprs, &mut unused)?;
        let e_rows = g.embedding(ev, &query_rows)?;
        let s = g.inner_product(e_rows, o_rows)?;
        let (lp, s) = (g.value(lp).data(), g.value(s).data());
        let mut out: Vec<QueryScores> = qs
            .iter()
            .map(|_| QueryScores {
                log_prob: Vec::new(),
                similarity: Vec::new(),
            })
            .collect();
        for (r, &qi) in query_rows.iter().enumerate() {
            out[qi].log_prob.push(lp[r]);
            out[qi].similarity.push(s[r]);
        }
        Ok(out)
    }

    /// `S(r, o)` for every candidate expression against every listed object.
    pub fn similarity_matrix(
        &self,
        exprs: &[Vec<usize>],
        objects: &[(usize, usize)],
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::eval();
        let (_, ov) = self.objects(&mut g, objects, true)?;
        let ov = ov.expect("object views requested");
        let mut unused = rng::seeded(0);
        let ev = self
            .model
            .listener
            .expression_view(&mut g, self.store, exprs, &mut unused)?;
        let ovt = transpose(g.value(ov));
        let ovt = g.constant(ovt);
        let s = g.matmul(ev, ovt)?;
        let v = g.value(s);
        Ok((0..exprs.len()).map(|r| v.row(r).to_vec()).collect())
    }
}

fn transpose(a: &Array) -> Array {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Array::new(vec![c, r], out).expect("transpose keeps the element count")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComprehensionResult {
    pub tokens: Vec<usize>,
    pub object_ids: Vec<usize>,
    pub log_prob: Vec<f64>,
    pub similarity: Vec<f64>,
    pub combined: Vec<f64>,
    pub predicted: usize,
    pub iou: f64,
    pub correct: bool,
}

/// Ranks every object of `scene` for one expression. `boxes_from` supplies
/// the candidate boxes (the scene itself, or a jittered copy); IoU is measured
/// against the target's box in `scene` when a target is given.
#[allow(clippy::too_many_arguments)]
pub fn comprehend(
    scorer: &Scorer<'_>,
    scene_index: usize,
    scene: &Scene,
    candidates: &Scene,
    tokens: &[usize],
    target_id: Option<usize>,
    mode: ComprehensionMode,
    lambda: f64,
) -> Result<ComprehensionResult> {
    if candidates.objects.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let q = Query {
        scene: scene_index,
        target: 0,
        tokens: tokens.to_vec(),
    };
    let scores = scorer
        .score(std::slice::from_ref(&q))?
        .pop()
        .expect("one query");
    let ids: Vec<usize> = candidates.objects.iter().map(|o| o.id).collect();
    let combined = scores.combined(mode, lambda);
    let best = best_object(&combined, &ids)?;
    let (overlap, correct) = match target_id.and_then(|t| scene.object(t)) {
        Some(t) => {
            let v = iou(&candidates.objects[best].bbox, &t.bbox);
            (v, v > 0.5)
        }
        None => (f64::NAN, false),
    };
    Ok(ComprehensionResult {
        tokens: tokens.to_vec(),
        object_ids: ids.clone(),
        log_prob: scores.log_prob,
        similarity: scores.similarity,
        combined,
        predicted: ids[best],
        iou: overlap,
        correct,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComprehensionReport {
    pub split: Split,
    pub mode: ComprehensionMode,
    pub lambda: f64,
    pub jitter: Option<f64>,
    pub queries: usize,
    pub accuracy: f64,
    /// Expected accuracy of a uniform random guess, `mean(1 / #objects)`.
    pub chance: f64,
}

impl ComprehensionReport {
    pub fn to_text(&self) -> String {
        let rows = [
            ("split", self.split.name().to_string()),
            ("mode", self.mode.to_string()),
            ("lambda", format!("{}", self.lambda)),
            (
                "jitter",
                self.jitter.map_or("none".to_string(), |j| format!("{j}")),
            ),
            ("queries", self.queries.to_string()),
            ("accuracy", format!("{:.4}", self.accuracy)),
            ("chance", format!("{:.4}", self.chance)),
        ];
        rows.iter().map(|(k, v)| format!("{k:<10} {v}\n")).collect()
    }
}

/// Predicted positions for scored queries.
pub fn predictions(
    scores: &[QueryScores],
    qs: &[Query],
    scenes: &[Scene],
    mode: ComprehensionMode,
    lambda: f64,
) -> Result<Vec<usize>> {
    scores
        .iter()
        .zip(qs)
        .map(|(s, q)| {
            let ids: Vec<usize> = scenes[q.scene].objects.iter().map(|o| o.id).collect();
            best_object(&s.combined(mode, lambda), &ids)
        })
        .collect()
}

/// Fraction of queries whose predicted box overlaps the target box (taken
/// from `truth`) with IoU above one half.
pub fn accuracy(preds: &[usize], qs: &[Query], candidates: &[Scene], truth: &[Scene]) -> f64 {
    if qs.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(qs)
        .filter(|(&p, q)| {
            let target = &truth[q.scene].objects[q.target].bbox;
            iou(&candidates[q.scene].objects[p].bbox, target) > 0.5
        })
        .count();
    hits as f64 / qs.len() as f64
}

pub fn chance_level(qs: &[Query], scenes: &[Scene]) -> f64 {
    if qs.is_empty() {
        return 0.0;
    }
    qs.iter()
        .map(|q| 1.0 / scenes[q.scene].objects.len() as f64)
        .sum::<f64>()
        / qs.len() as f64
}

/// Boxes of every scene perturbed as a stand-in for detector output.
pub fn jittered(dataset: &Dataset, magnitude: f64, seed: u64) -> Dataset {
    Dataset {
        scenes: dataset
            .scenes
            .iter()
            .map(|s| {
                jitter_boxes(
                    s,
                    magnitude,
                    &mut rng::stream(seed, &format!("jitter/{}", s.id)),
                )
            })
            .collect(),
    }
}

/// Accuracy of one mode over a split. With `jitter`, candidate features and
/// boxes come from a jittered copy of the scenes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_comprehension(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    features: &FeatureCache,
    split: Split,
    mode: ComprehensionMode,
    lambda: f64,
    jitter: Option<(f64, u64)>,
) -> Result<ComprehensionReport> {
    let qs = queries(dataset, split);
    if qs.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let jittered_set;
    let jittered_features;
    let (cands, feats) = match jitter {
        Some((m, seed)) => {
            jittered_set = jittered(dataset, m, seed);
            jittered_features = FeatureCache::build(&jittered_set, &model.config.visual)?;
            (&jittered_set, &jittered_features)
        }
        None => (dataset, features),
    };
    let scorer = Scorer::new(model, store, feats);
    let scores = scorer.score(&qs)?;
    let preds = predictions(&scores, &qs, &cands.scenes, mode, lambda)?;
    Ok(ComprehensionReport {
        split,
        mode,
        lambda,
        jitter: jitter.map(|j| j.0),
        queries: qs.len(),
        accuracy: accuracy(&preds, &qs, &cands.scenes, &dataset.scenes),
        chance: chance_level(&qs, &dataset.scenes),
    })
}

/// Ensemble weights tried when tuning `lambda`.
pub const LAMBDA_GRID: [f64; 10] = [0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0];

/// The grid value with the best accuracy on already-scored queries; the
/// smaller value wins ties.
pub fn tune_lambda(
    scores: &[QueryScores],
    qs: &[Query],
    scenes: &[Scene],
    grid: &[f64],
) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &l in grid {
        let p = predictions(scores, qs, scenes, ComprehensionMode::Ensemble, l)?;
        let acc = accuracy(&p, qs, scenes, scenes);
        if acc > best.0 {
            best = (acc, l);
        }
    }
    Ok(best.1)
}

/// Tunes the ensemble weight on the first `limit` queries of `split`
/// (all when zero).
pub fn tune_lambda_on(
    scorer: &Scorer<'_>,
    dataset: &Dataset,
    split: Split,
    limit: usize,
) -> Result<f64> {
    let mut qs = queries(dataset, split);
    if limit > 0 {
        qs.truncate(limit);
    }
    if qs.is_empty() {
        return Err(Error::Empty("tuning split"));
    }
    let scores = scorer.score(&qs)?;
    tune_lambda(&scores, &qs, &dataset.scenes, &LAMBDA_GRID)
}

/// Weights of the joint generation energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for RerankWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 5.0,
        }
    }
}

/// One beam hypothesis for one object, with its shifted log-similarity to
/// every object of the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub log_sim: Vec<f64>,
}

/// `-log P(r|o_i) - l1 log S'(r, o_i) + l2 max_{j != i} log S'(r, o_j)`.
pub fn unary(c: &Candidate, i: usize, w: &RerankWeights) -> f64 {
    let others = c
        .log_sim
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let contrast = if others == f64::NEG_INFINITY || w.lambda2 == 0.0 {
        0.0
    } else {
        w.lambda2 * others
    };
    let own = if w.lambda1 == 0.0 {
        0.0
    } else {
        w.lambda1 * c.log_sim[i]
    };
    -c.log_prob - own + contrast
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationAssignment {
    /// Chosen candidate position per object.
    pub choice: Vec<usize>,
    pub expressions: Vec<Vec<usize>>,
    pub energy: f64,
    pub unary: Vec<f64>,
    pub pairwise: f64,
    pub duplicates: usize,
    pub exhaustive: bool,
    /// Energy after initialisation and after each local-search sweep.
    pub trace: Vec<f64>,
}

/// Assignments up to this count are searched exhaustively.
pub const EXHAUSTIVE_LIMIT: f64 = 1e5;

const ICM_SWEEPS: usize = 3;

fn energy_of(theta: &[Vec<f64>], cands: &[Vec<Candidate>], choice: &[usize], l3: f64) -> f64 {
    let mut e: f64 = choice.iter().enumerate().map(|(i, &c)| theta[i][c]).sum();
    for i in 0..choice.len() {
        for j in i + 1..choice.len() {
            if cands[i][choice[i]].tokens == cands[j][choice[j]].tokens {
                e += l3;
            }
        }
    }
    e
}

/// Strategy for minimising the generation energy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Search {
    /// Exhaustive when the product space is small, local search otherwise.
    Auto,
    Exhaustive,
    /// Iterated conditional modes.
    Icm,
}

/// Minimises `sum_i theta_i(r_i) + l3 * #{i < j : r_i = r_j}` over one
/// candidate per object.
pub fn joint_generate(cands: &[Vec<Candidate>], w: &RerankWeights) -> Result<GenerationAssignment> {
    joint_generate_with(cands, w, Search::Auto)
}

/// Local search runs three sweeps in object order, starting from each
/// object's best unary candidate; ties go to the earlier candidate.
pub fn joint_generate_with(
    cands: &[Vec<Candidate>],
    w: &RerankWeights,
    search: Search,
) -> Result<GenerationAssignment> {
    if cands.iter().any(Vec::is_empty) {
        return Err(Error::Empty("beam"));
    }
    let n = cands.len();
    let theta: Vec<Vec<f64>> = cands
        .iter()
        .enumerate()
        .map(|(i, cs)| cs.iter().map(|c| unary(c, i, w)).collect())
        .collect();
    let space = cands.iter().map(|c| c.len() as f64).product::<f64>();
    let exhaustive = match search {
        Search::Auto => space <= EXHAUSTIVE_LIMIT,
        Search::Exhaustive => true,
        Search::Icm => false,
    };
    let mut trace = Vec::new();
    let choice = if n == 0 {
        Vec::new()
    } else if exhaustive {
        let mut cur = vec![0usize; n];
        let mut best = (energy_of(&theta, cands, &cur, w.lambda3), cur.clone());
        'outer: loop {
            let mut k = n;
            loop {
                if k == 0 {
                    break 'outer;
                }
                k -= 1;
                cur[k] += 1;
                if cur[k] < cands[k].len() {
                    break;
                }
                cur[k] = 0;
            }
            let e = energy_of(&theta, cands, &cur, w.lambda3);
            if e < best.0 {
                best = (e, cur.clone());
            }
        }
        trace.push(best.0);
        best.1
    } else {
        let mut cur: Vec<usize> = theta
            .iter()
            .map(|t| {
                let neg: Vec<f64> = t.iter().map(|v| -v).collect();
                argmax(&neg)
            })
            .collect();
        trace.push(energy_of(&theta, cands, &cur, w.lambda3));
        for _ in 0..ICM_SWEEPS {
            for i in 0..n {
                let mut best = (f64::INFINITY, cur[i]);
                for c in 0..cands[i].len() {
                    let mut e = theta[i][c];
                    for j in (0..n).filter(|&j| j != i) {
                        if cands[i][c].tokens == cands[j][cur[j]].tokens {
                            e += w.lambda3;
                        }
                    }
                    if e < best.0 {
                        best = (e, c);
                    }
                }
                cur[i] = best.1;
            }
            trace.push(energy_of(&theta, cands, &cur, w.lambda3));
        }
        cur
    };
    let unary: Vec<f64> = choice
        .iter()
        .enumerate()
        .map(|(i, &c)| theta[i][c])
        .collect();
    let expressions: Vec<Vec<usize>> = choice
        .iter()
        .enumerate()
        .map(|(i, &c)| cands[i][c].tokens.clone())
        .collect();
    let duplicates = duplicate_pairs(&expressions);
    let pairwise = w.lambda3 * duplicates as f64;
    Ok(GenerationAssignment {
        energy: unary.iter().sum::<f64>() + pairwise,
        choice,
        expressions,
        unary,
        pairwise,
        duplicates,
        exhaustive,
        trace,
    })
}

/// Unordered pairs of identical sequences.
pub fn duplicate_pairs(exprs: &[Vec<usize>]) -> usize {
    let mut d = 0;
    for i in 0..exprs.len() {
        for j in i + 1..exprs.len() {
            if exprs[i] == exprs[j] {
                d += 1;
            }
        }
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationVariant {
    Greedy,
    Sample,
    BeamTop1,
    Rerank,
}

impl GenerationVariant {
    pub const ALL: [GenerationVariant; 4] =
        [Self::Greedy, Self::Sample, Self::BeamTop1, Self::Rerank];

    pub fn name(self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::Sample => "sample",
            Self::BeamTop1 => "beam-top1",
            Self::Rerank => "rerank",
        }
    }
}

impl FromStr for GenerationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown generation variant `{s}`")))
    }
}

impl fmt::Display for GenerationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationSettings {
    pub beam: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub weights: RerankWeights,
}

/// Beam candidates for every object of a scene, scored for the rerank energy.
pub fn candidates(
    scorer: &Scorer<'_>,
    scene: usize,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Vec<Candidate>>> {
    let n = scorer.features.scenes[scene].len();
    let pairs: Vec<(usize, usize)> = (0..n).map(|o| (scene, o)).collect();
    let conds = scorer.conditions(&pairs)?;
    let mut beams: Vec<Vec<Hypothesis>> = Vec::with_capacity(n);
    for cond in conds {
        let st = SpeakerStepper {
            speaker: &scorer.model.speaker,
            store: scorer.store,
            cond,
        };
        beams.push(beam_search(&st, beam, max_len)?);
    }
    let flat: Vec<Vec<usize>> = beams.iter().flatten().map(|h| h.tokens.clone()).collect();
    let sims = scorer.similarity_matrix(&flat, &pairs)?;
    let mut k = 0;
    Ok(beams
        .into_iter()
        .map(|b| {
            b.into_iter()
                .map(|h| {
                    let log_sim = sims[k].iter().map(|&s| log_shifted(s)).collect();
                    k += 1;
                    Candidate {
                        tokens: h.tokens,
                        log_prob: h.log_prob,
                        log_sim,
                    }
                })
                .collect()
        })
        .collect())
}

/// One expression per object of scene position `scene`.
pub fn generate_scene(
    scorer: &Scorer<'_>,
    scene: usize,
    variant: GenerationVariant,
    s: &GenerationSettings,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let n = scorer.features.scenes[scene].len();
    let pairs: Vec<(usize, usize)> = (0..n).map(|o| (scene, o)).collect();
    match variant {
        GenerationVariant::Rerank => {
            let c = candidates(scorer, scene, s.beam, s.max_len)?;
            Ok(joint_generate(&c, &s.weights)?.expressions)
        }
        GenerationVariant::Sample => {
            let conds = scorer.conditions(&pairs)?;
            let mut g = Graph::eval();
            let c = g.constant(Array::from_rows(&conds)?);
            let mut unused = rng::seeded(0);
            let mut pol = scorer
                .model
                .speaker
                .policy(&mut g, scorer.store, c, &mut unused)?;
            Ok(sample_sequences(&mut g, &mut pol, s.temperature, s.max_len, rng)?.sequences)
        }
        GenerationVariant::Greedy | GenerationVariant::BeamTop1 => scorer
            .conditions(&pairs)?
            .into_iter()
            .map(|cond| {
                let st = SpeakerStepper {
                    speaker: &scorer.model.speaker,
                    store: scorer.store,
                    cond,
                };
                Ok(if variant == GenerationVariant::Greedy {
                    greedy(&st, s.max_len)?.tokens
                } else {
                    beam_search(&st, s.beam, s.max_len)?.remove(0).tokens
                })
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub split: Split,
    pub variant: GenerationVariant,
    pub expressions: usize,
    /// Fraction of expressions whose denotation is exactly their target.
    pub oracle_accuracy: f64,
    /// Fraction of same-scene object pairs given identical expressions.
    pub duplicate_rate: f64,
    /// Mean number of tokens before END.
    pub mean_length: f64,
}

impl GenerationReport {
    pub fn to_text(&self) -> String {
        let rows = [
            ("split", self.split.name().to_string()),
            ("variant", self.variant.to_string()),
            ("expressions", self.expressions.to_string()),
            ("oracle_acc", format!("{:.4}", self.oracle_accuracy)),
            ("dup_rate", format!("{:.4}", self.duplicate_rate)),
            ("mean_len", format!("{:.3}", self.mean_length)),
        ];
        rows.iter().map(|(k, v)| format!("{k:<12} {v}\n")).collect()
    }
}

/// Oracle accuracy, duplicate rate and length of per-object expressions
/// (END included) for the listed scene positions.
pub fn generation_metrics(
    dataset: &Dataset,
    vocab: &Vocabulary,
    scenes: &[usize],
    exprs: &[Vec<Vec<usize>>],
) -> (usize, f64, f64, f64) {
    let (mut total, mut hits, mut pairs, mut dups, mut len) =
        (0usize, 0usize, 0usize, 0usize, 0usize);
    for (&si, per_obj) in scenes.iter().zip(exprs) {
        let scene = &dataset.scenes[si];
        for (o, e) in scene.objects.iter().zip(per_obj) {
            total += 1;
            let d = denote(e, scene, vocab);
            if d.len() == 1 && d.contains(&o.id) {
                hits += 1;
            }
            len += e.iter().filter(|&&t| t != crate::world::END).count();
        }
        let n = per_obj.len();
        pairs += n * n.saturating_sub(1) / 2;
        dups += duplicate_pairs(per_obj);
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (
        total,
        frac(hits, total),
        frac(dups, pairs),
        frac(len, total),
    )
}

pub fn evaluate_generation(
    scorer: &Scorer<'_>,
    dataset: &Dataset,
    vocab: &Vocabulary,
    split: Split,
    variant: GenerationVariant,
    settings: &GenerationSettings,
    seed: u64,
) -> Result<GenerationReport> {
    let scenes: Vec<usize> = dataset.split(split).map(|(i, _)| i).collect();
    if scenes.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut r = rng::stream(seed, "generation");
    let exprs = scenes
        .iter()
        .map(|&si| generate_scene(scorer, si, variant, settings, &mut r))
        .collect::<Result<Vec<_>>>()?;
    let (n, acc, dup, len) = generation_metrics(dataset, vocab, &scenes, &exprs);
    Ok(GenerationReport {
        split,
        variant,
        expressions: n,
        oracle_accuracy: acc,
        duplicate_rate: dup,
        mean_length: len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::IndexedRandom;
    use rand::Rng as _;

    #[test]
    fn ensemble_arithmetic() {
        let s = QueryScores {
            log_prob: vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()],
            // mapped similarities 0.4, 0.9, 0.5
            similarity: vec![-0.2, 0.8, 0.0],
        };
        let c = s.combined(ComprehensionMode::Ensemble, 1.0);
        let want = [0.20, 0.27, 0.10];
        for (a, b) in c.iter().zip(want) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
        assert_eq!(best_object(&c, &[0, 1, 2]).unwrap(), 1);
        let sp = s.combined(ComprehensionMode::Ensemble, 0.0);
        assert_eq!(best_object(&sp, &[0, 1, 2]).unwrap(), 0);
        assert_eq!(
            best_object(&s.combined(ComprehensionMode::Listener, 0.0), &[0, 1, 2]).unwrap(),
            1
        );
    }

    #[test]
    fn argmax_invariances_and_ties() {
        let mut rng = rng::seeded(1);
        for _ in 0..200 {
            let n = rng.random_range(1..6);
            let s = QueryScores {
                log_prob: (0..n).map(|_| -rng.random::<f64>() * 5.0).collect(),
                similarity: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let ids: Vec<usize> = (0..n).collect();
            let lam = rng.random_range(0.0..4.0);
            let base = best_object(&s.combined(ComprehensionMode::Ensemble, lam), &ids).unwrap();
            let scaled = QueryScores {
                log_prob: s.log_prob.iter().map(|v| v + 0.7f64.ln()).collect(),
                similarity: s.similarity.clone(),
            };
            assert_eq!(
                best_object(&scaled.combined(ComprehensionMode::Ensemble, lam), &ids).unwrap(),
                base
            );
            let mono: Vec<f64> = s
                .combined(ComprehensionMode::Ensemble, lam)
                .iter()
                .map(|v| 3.0 * v.exp() + 1.0)
                .collect();
            assert_eq!(best_object(&mono, &ids).unwrap(), base);
        }
        assert_eq!(best_object(&[1.0, 2.0, 2.0], &[5, 9, 3]).unwrap(), 2);
        assert!(best_object(&[], &[]).is_err());
    }

    fn cand(tokens: &[usize], log_prob: f64, log_sim: &[f64]) -> Candidate {
        Candidate {
            tokens: tokens.to_vec(),
            log_prob,
            log_sim: log_sim.to_vec(),
        }
    }

    #[test]
    fn single_object_takes_unary_argmin() {
        let w = RerankWeights::default();
        let c = vec![vec![
            cand(&[3, 1], -1.0, &[-0.1]),
            cand(&[4, 1], -0.5, &[-2.0]),
            cand(&[5, 1], -0.6, &[-0.05]),
        ]];
        let a = joint_generate(&c, &w).unwrap();
        let th: Vec<f64> = c[0].iter().map(|x| unary(x, 0, &w)).collect();
        let want = th
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(a.choice, vec![want]);
        assert_eq!(a.pairwise, 0.0);
    }

    #[test]
    fn huge_duplicate_penalty_separates_shared_tops() {
        let w = RerankWeights {
            lambda3: 1e9,
            ..Default::default()
        };
        let c = vec![
            vec![
                cand(&[3, 1], -0.1, &[-0.1, -0.1]),
                cand(&[4, 1], -3.0, &[-0.1, -0.1]),
            ],
            vec![
                cand(&[3, 1], -0.1, &[-0.1, -0.1]),
                cand(&[5, 1], -3.0, &[-0.1, -0.1]),
            ],
        ];
        let a = joint_generate(&c, &w).unwrap();
        assert_ne!(a.expressions[0], a.expressions[1]);
        assert_eq!(a.duplicates, 0);
    }

    #[test]
    fn reduces_to_beam_top1_without_interactions() {
        let w = RerankWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let c = vec![
            vec![cand(&[3, 1], -0.3, &[-0.2, -0.9])],
            vec![cand(&[3, 1], -0.7, &[-0.4, -0.1])],
        ];
        let a = joint_generate(&c, &w).unwrap();
        assert_eq!(a.expressions, vec![vec![3, 1], vec![3, 1]]);
        assert!(joint_generate(&[vec![]], &w).is_err());
    }

    /// Two or more objects whose candidate lists draw from a shared pool of
    /// sequences, so duplicates are possible.
    pub fn random_instance(
        rng: &mut Rng,
        objects: usize,
        beam: usize,
        pool: usize,
    ) -> Vec<Vec<Candidate>> {
        let seqs: Vec<Vec<usize>> = (0..pool).map(|i| vec![3 + i % 20, 3 + i / 20, 1]).collect();
        (0..objects)
            .map(|_| {
                let picked: Vec<&Vec<usize>> = seqs.choose_multiple(rng, beam).collect();
                let mut lp = 0.0;
                picked
                    .into_iter()
                    .map(|t| {
                        lp -= rng.random::<f64>() * 2.0;
                        let sims: Vec<f64> = (0..objects)
                            .map(|_| log_shifted(rng.random_range(-1.0..1.0)))
                            .collect();
                        cand(t, lp, &sims)
                    })
                    .collect()
            })
            .collect()
    }

    fn independent_energy(c: &[Vec<Candidate>], choice: &[usize], w: &RerankWeights) -> f64 {
        let n = c.len();
        let mut e = 0.0;
        for i in 0..n {
            let x = &c[i][choice[i]];
            let mut best_other = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i {
                    best_other = best_other.max(x.log_sim[j]);
                }
            }
            e += -x.log_prob - w.lambda1 * x.log_sim[i];
            if n > 1 {
                e += w.lambda2 * best_other;
            }
            for j in i + 1..n {
                if c[j][choice[j]].tokens == x.tokens {
                    e += w.lambda3;
                }
            }
        }
        e
    }

    #[test]
    fn energy_decomposes_and_local_search_never_ascends() {
        let mut rng = rng::seeded(8);
        let w = RerankWeights::default();
        for _ in 0..30 {
            let c = random_instance(&mut rng, 6, 10, 30);
            let a = joint_generate(&c, &w).unwrap();
            assert!(!a.exhaustive);
            assert!((a.energy - independent_energy(&c, &a.choice, &w)).abs() < 1e-9);
            for t in a.trace.windows(2) {
                assert!(t[1] <= t[0] + 1e-12);
            }
        }
        for _ in 0..30 {
            let c = random_instance(&mut rng, 3, 5, 8);
            let a = joint_generate(&c, &w).unwrap();
            assert!(a.exhaustive);
            assert!((a.energy - independent_energy(&c, &a.choice, &w)).abs() < 1e-9);
        }
    }
}
