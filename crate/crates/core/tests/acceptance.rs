//! End-to-end acceptance run. Prints one PASS/FAIL verdict line per criterion
//! straight to stdout, so the lines survive output capture. A red criterion
//! fails the test only when `ACCEPTANCE_STRICT` is set. Takes roughly ten
//! minutes on one core.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::time::Instant;

use rand::Rng as _;

use refgame_core::autodiff::{Array, Graph, ParamStore};
use refgame_core::eval::{
    self, Candidate, ComprehensionMode, GenerationReport, GenerationSettings, GenerationVariant,
    RerankWeights, Scorer, Search,
};
use refgame_core::gradsuite;
use refgame_core::listener::{similarity, triplet_loss};
use refgame_core::model::{Model, ModelConfig};
use refgame_core::reinforcer::{policy_gradient_loss, RewardConfig, RewardModel, TabularPolicy};
use refgame_core::rng::{self, Rng};
use refgame_core::speaker::{
    beam_search, mmi_loss, sample_sequences, Hypothesis, Margins, SpeakerStepper, StepModel,
};
use refgame_core::trainer::{fingerprint, Checkpoint, StepStats, TrainConfig, Trainer};
use refgame_core::world::{generate_dataset, Dataset, Split, Vocabulary, WorldConfig, BEGIN, END};

/// Seeds of the ablation and generation runs.
const SEEDS: [u64; 3] = [1, 2, 3];
/// World shared by every ablation run.
const WORLD_SEED: u64 = 0;
/// Training schedule of every ablation variant.
const SCHEDULE: [&str; 5] = [
    "max_steps=1500",
    "eval_every=250",
    "val_limit=600",
    "learning_rate=0.003",
    "halve_every=500",
];
/// Train queries used to tune the ensemble weight.
const TUNE_QUERIES: usize = 3000;
const ABLATION_BUDGET_SECS: f64 = 15.0 * 60.0;

/// `println!` that bypasses the test harness capture.
macro_rules! say {
    ($($arg:tt)*) => {{
        let mut out = std::io::stdout().lock();
        writeln!(out, $($arg)*).expect("stdout");
        out.flush().expect("stdout");
    }};
}

struct Verdict {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(id: &'static str, title: &'static str, passed: bool, detail: String) -> Self {
        let v = Self {
            id,
            title,
            passed,
            detail,
        };
        say!(
            "[{}] criterion {:<3} {:<26} {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.title,
            v.detail
        );
        v
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt_all(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join("/")
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let cases = gradsuite::run(1).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .expect("cases");
    let failed: Vec<&str> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name)
        .collect();
    let checked: usize = cases.iter().map(|c| c.report.checked).sum();
    let skipped: usize = cases.iter().map(|c| c.report.skipped).sum();
    Verdict::new(
        "1",
        "gradient suite",
        failed.is_empty() && secs < 60.0,
        format!(
            "{} cases, {checked} coordinates ({skipped} at kinks), max rel err {:.2e} in {} (< {:.0e}), failed {:?}, {secs:.1}s (< 60s)",
            cases.len(),
            worst.report.max_rel_err,
            worst.name,
            gradsuite::THRESHOLD,
            failed
        ),
    )
}

/// Every sequence the sampler can emit with its probability, walking the
/// tables directly: a row stops at END or after `steps` tokens.
fn enumerate_tabular(store: &ParamStore, vocab: usize, steps: usize) -> Vec<(Vec<usize>, f64)> {
    let probs = |t: usize, row: usize| -> Vec<f64> {
        let table = store.get(&TabularPolicy::table_name(t)).expect("table");
        let logits = table.row(row);
        let m = logits.iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        logits.iter().map(|l| (l - m).exp() / z).collect()
    };
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<usize>::new(), 1.0)];
    while let Some((prefix, p)) = stack.pop() {
        let t = prefix.len();
        let row = if t == 0 { 0 } else { prefix[t - 1] };
        let dist = probs(t, row);
        for (w, &pw) in dist.iter().enumerate().take(vocab) {
            let mut s = prefix.clone();
            s.push(w);
            if w == END || t + 1 == steps {
                out.push((s, p * pw));
            } else {
                stack.push((s, p * pw));
            }
        }
    }
    out
}

/// `grad log p(seq)` with respect to every table entry, keyed like the store.
fn score_function(store: &ParamStore, seq: &[usize], steps: usize) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = store
        .iter()
        .map(|(n, a)| (n.to_string(), vec![0.0; a.len()]))
        .collect();
    for t in 0..seq.len().min(steps) {
        let name = TabularPolicy::table_name(t);
        let table = store.get(&name).expect("table");
        let vocab = table.cols();
        let row = if t == 0 { 0 } else { seq[t - 1] };
        let logits = table.row(row);
        let m = logits.iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let g = out.get_mut(&name).expect("entry");
        for k in 0..vocab {
            let p = (logits[k] - m).exp() / z;
            g[row * vocab + k] += if k == seq[t] { 1.0 } else { 0.0 } - p;
        }
    }
    out
}

type RewardFn = Box<dyn Fn(&[usize]) -> f64>;

struct PgCase {
    label: &'static str,
    vocab: usize,
    steps: usize,
    store: ParamStore,
    reward: RewardFn,
}

/// Largest |estimate - exact| / SE over coordinates, and whether every
/// coordinate lies within three standard errors.
fn pg_check(case: &PgCase, samples: usize, seed: u64) -> (f64, bool, usize) {
    let exact = {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (seq, p) in enumerate_tabular(&case.store, case.vocab, case.steps) {
            let f = (case.reward)(&seq);
            for (name, g) in score_function(&case.store, &seq, case.steps) {
                let e = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, v) in e.iter_mut().zip(g) {
                    *a += p * f * v;
                }
            }
        }
        acc
    };
    let mut g = Graph::train();
    let mut pol = TabularPolicy::new(&case.store, samples);
    let s = sample_sequences(&mut g, &mut pol, 1.0, case.steps, &mut rng::seeded(seed))
        .expect("samples");
    let rewards: Vec<f64> = s.sequences.iter().map(|q| (case.reward)(q)).collect();
    let loss = policy_gradient_loss(&mut g, s.log_prob, &rewards, 0.0, 1.0).expect("loss");
    g.backward(loss).expect("backward");
    let grads = case.store.gradients(&g);

    let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut sq: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (seq, f) in s.sequences.iter().zip(&rewards) {
        for (name, v) in score_function(&case.store, seq, case.steps) {
            let a = sum
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; v.len()]);
            let b = sq.entry(name).or_insert_with(|| vec![0.0; v.len()]);
            for i in 0..v.len() {
                a[i] += f * v[i];
                b[i] += (f * v[i]).powi(2);
            }
        }
    }
    let n = samples as f64;
    let (mut worst, mut ok, mut coords) = (0.0f64, true, 0);
    for (name, ex) in &exact {
        let est: Vec<f64> = grads[name].data().iter().map(|v| -v).collect();
        for i in 0..ex.len() {
            coords += 1;
            let mean = sum[name][i] / n;
            assert!(
                (mean - est[i]).abs() < 1e-9,
                "graph estimate disagrees with per-sample mean"
            );
            let var = (sq[name][i] / n - mean * mean).max(0.0) * n / (n - 1.0);
            let se = (var / n).sqrt();
            let dev = (est[i] - ex[i]).abs();
            if se > 0.0 {
                worst = worst.max(dev / se);
            }
            ok &= dev <= 3.0 * se + 1e-12;
        }
    }
    (worst, ok, coords)
}

fn policy_gradient_oracle() -> Verdict {
    let t = Instant::now();
    let mut one_step = ParamStore::new();
    one_step
        .insert(
            TabularPolicy::table_name(0),
            Array::from_rows(&[[0.6f64.ln(), 0.4f64.ln()]]).unwrap(),
        )
        .unwrap();
    let table: BTreeMap<Vec<usize>, f64> = enumerate_tabular(
        &TabularPolicy::init(3, 2, 1.0, &mut rng::seeded(21)).unwrap(),
        3,
        2,
    )
    .into_iter()
    .enumerate()
    .map(|(i, (s, _))| (s, 0.1 + 0.8 * ((i * 7919) % 13) as f64 / 12.0))
    .collect();
    let cases = [
        PgCase {
            label: "|V|=2,T=1",
            vocab: 2,
            steps: 1,
            store: one_step,
            reward: Box::new(|s: &[usize]| if s[0] == 0 { 1.0 } else { 0.0 }),
        },
        PgCase {
            label: "|V|=3,T=2",
            vocab: 3,
            steps: 2,
            store: TabularPolicy::init(3, 2, 1.0, &mut rng::seeded(21)).unwrap(),
            reward: Box::new(move |s: &[usize]| table[&s[..s.len().min(2)]]),
        },
        PgCase {
            label: "|V|=3,T=2,F=0.7",
            vocab: 3,
            steps: 2,
            store: TabularPolicy::init(3, 2, 1.5, &mut rng::seeded(22)).unwrap(),
            reward: Box::new(|_: &[usize]| 0.7),
        },
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, c) in cases.iter().enumerate() {
        let (worst, pass, coords) = pg_check(c, 100_000, 100 + i as u64);
        ok &= pass;
        parts.push(format!("{} {coords} coords max {worst:.2} SE", c.label));
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict::new(
        "2",
        "policy-gradient oracle",
        ok && secs < 60.0,
        format!(
            "100k samples: {} (<= 3 SE); {secs:.1}s (< 60s)",
            parts.join(", ")
        ),
    )
}

fn loss_zero_cases() -> Verdict {
    let m = Margins {
        margin: 0.1,
        object_weight: 1.0,
        expression_weight: 0.1,
    };
    let mut g = Graph::eval();
    let pos = g.constant(Array::from_rows(&[[-1.0], [-2.5], [-0.3]]).unwrap());
    let neg_o = g.constant(Array::from_rows(&[[-1.2], [-4.0], [-9.0]]).unwrap());
    let neg_e = g.constant(Array::from_rows(&[[-3.0], [-2.7], [-0.41]]).unwrap());
    let mmi = mmi_loss(&mut g, pos, neg_o, neg_e, &[1.0; 3], &[1.0; 3], m).unwrap();
    let mmi = g.value(mmi).item();
    let lm = Margins {
        margin: 0.1,
        object_weight: 1.0,
        expression_weight: 1.0,
    };
    let sp = g.constant(Array::from_rows(&[[0.9], [0.2], [-0.1]]).unwrap());
    let so = g.constant(Array::from_rows(&[[0.5], [0.05], [-0.8]]).unwrap());
    let se = g.constant(Array::from_rows(&[[0.79], [-1.0], [-0.25]]).unwrap());
    let trip = triplet_loss(&mut g, sp, so, se, &[1.0; 3], &[1.0; 3], lm).unwrap();
    let trip = g.value(trip).item();

    let vocab = Vocabulary::standard();
    let model = Model::new(ModelConfig::new(vocab.len())).unwrap();
    let mut r = rng::seeded(31);
    let store = model.init(&mut r).unwrap();
    let n = 1000;
    let mut g = Graph::eval();
    let rows = g.constant(Array::uniform(&[n, model.config.embed], 3.0, &mut r));
    let exprs: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let len = r.random_range(1..=10);
            let mut e: Vec<usize> = (0..len).map(|_| r.random_range(3..vocab.len())).collect();
            e.push(END);
            e
        })
        .collect();
    let o = model
        .listener
        .object_view(&mut g, &store, rows, &mut r)
        .unwrap();
    let e = model
        .listener
        .expression_view(&mut g, &store, &exprs, &mut r)
        .unwrap();
    let s = similarity(&mut g, e, o).unwrap();
    let s_max = g.value(s).data().iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let rm = RewardModel::new(81, vocab.len(), &RewardConfig::default());
    let mut rstore = rm.init(&mut r).unwrap();
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|_| Array::uniform(&[81], 50.0, &mut r).into_data())
        .collect();
    let mut rewards = rm.score(&rstore, &feats, &exprs).unwrap();
    for bias in [1e3, -1e3] {
        rstore.get_mut(&rm.mlp2.bias_name()).unwrap().data_mut()[0] = bias;
        rewards.extend(rm.score(&rstore, &feats[..10], &exprs[..10]).unwrap());
    }
    let (lo, hi) = rewards
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let in_open = rewards.iter().all(|&v| v > 0.0 && v < 1.0);
    Verdict::new(
        "3",
        "loss zero-cases and ranges",
        mmi == 0.0 && trip == 0.0 && s_max <= 1.0 + 1e-12 && in_open,
        format!(
            "mmi {mmi}, triplet {trip} (both exactly 0); max |S| {s_max:.6} over {n} pairs (<= 1); reward min {lo:.3e}, 1 - max {:.3e} incl. saturated logits (both > 0)",
            1.0 - hi
        ),
    )
}

fn enumerate_decoder<M: StepModel>(m: &M, max_len: usize) -> Vec<Hypothesis> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<usize>::new(), 0.0, m.initial().unwrap())];
    while let Some((toks, lp, st)) = stack.pop() {
        let prev = toks.last().copied().unwrap_or(BEGIN);
        let (row, next) = m.advance(&[st], &[prev]).unwrap().pop().unwrap();
        for (w, l) in row.iter().enumerate() {
            let mut t = toks.clone();
            t.push(w);
            if w == END {
                out.push(Hypothesis {
                    tokens: t,
                    log_prob: lp + l,
                    truncated: false,
                });
            } else if t.len() == max_len {
                t.push(END);
                out.push(Hypothesis {
                    tokens: t,
                    log_prob: lp + l,
                    truncated: true,
                });
            } else {
                stack.push((t, lp + l, next.clone()));
            }
        }
    }
    out.sort_by(|a, b| {
        b.log_prob
            .total_cmp(&a.log_prob)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    out
}

fn random_generation_instance(
    r: &mut Rng,
    objects: usize,
    beam: usize,
    pool: usize,
) -> Vec<Vec<Candidate>> {
    let seqs: Vec<Vec<usize>> = (0..pool)
        .map(|i| vec![3 + i % 20, 3 + i / 20, END])
        .collect();
    (0..objects)
        .map(|_| {
            (0..beam)
                .map(|_| Candidate {
                    tokens: seqs[r.random_range(0..pool)].clone(),
                    log_prob: -r.random_range(0.05..6.0),
                    log_sim: (0..objects)
                        .map(|_| (r.random_range(0.01..1.0f64)).ln())
                        .collect(),
                })
                .collect()
        })
        .collect()
}

fn beam_and_icm() -> Verdict {
    let cfg = ModelConfig {
        embed: 8,
        hidden: 8,
        joint: 8,
        listener_input: false,
        ..ModelConfig::new(3)
    };
    let model = Model::new(cfg).unwrap();
    let mut beam_ok = 0;
    let instances = 100;
    for i in 0..instances {
        let mut r = rng::seeded(500 + i);
        let mut store = model.init(&mut r).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            store
                .get_mut(&n)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 6.0);
        }
        let st = SpeakerStepper {
            speaker: &model.speaker,
            store: &store,
            cond: Array::uniform(&[model.speaker.input.input], 2.0, &mut r).into_data(),
        };
        let all = enumerate_decoder(&st, 2);
        let beam = beam_search(&st, 9, 2).unwrap();
        let same = all.len() == beam.len()
            && all
                .iter()
                .zip(&beam)
                .all(|(a, b)| a.tokens == b.tokens && (a.log_prob - b.log_prob).abs() < 1e-12);
        beam_ok += usize::from(same);
    }

    let w = RerankWeights::default();
    let mut r = rng::seeded(77);
    let mut icm_ok = 0;
    for _ in 0..instances {
        let inst = random_generation_instance(&mut r, 2, 5, 20);
        let ex = eval::joint_generate_with(&inst, &w, Search::Exhaustive).unwrap();
        let icm = eval::joint_generate_with(&inst, &w, Search::Icm).unwrap();
        icm_ok += usize::from((ex.energy - icm.energy).abs() <= 1e-9);
    }
    let rate = icm_ok as f64 / instances as f64;
    Verdict::new(
        "4",
        "beam and ICM oracles",
        beam_ok == instances as usize && rate >= 0.95,
        format!(
            "B=9 beam equals enumeration on {beam_ok}/{instances} speakers (|V|=3, max_len=2); ICM reaches the exhaustive minimum on {icm_ok}/{instances} (>= 95%)"
        ),
    )
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Variant {
    Speaker,
    SpeakerMmi,
    Full,
}

impl Variant {
    const ALL: [Variant; 3] = [Variant::Speaker, Variant::SpeakerMmi, Variant::Full];

    fn flags(self) -> &'static [&'static str] {
        match self {
            Variant::Speaker => &[
                "use_mmi=false",
                "use_listener=false",
                "use_reinforcer=false",
            ],
            Variant::SpeakerMmi => &["use_listener=false", "use_reinforcer=false"],
            Variant::Full => &[],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Variant::Speaker => "speaker",
            Variant::SpeakerMmi => "speaker+MMI",
            Variant::Full => "full",
        }
    }
}

struct Run {
    speaker: f64,
    listener: f64,
    ensemble: f64,
    lambda: f64,
    chance: f64,
    generation: BTreeMap<&'static str, GenerationReport>,
    reward_heldout: Option<f64>,
    reward_frozen: Option<bool>,
}

fn train_and_score(ds: &Dataset, vocab: &Vocabulary, seed: u64, variant: Variant) -> Run {
    let mut sets: Vec<String> = SCHEDULE.iter().map(|s| s.to_string()).collect();
    sets.extend(variant.flags().iter().map(|s| s.to_string()));
    sets.push(format!("seed={seed}"));
    let cfg = TrainConfig::default().with_overrides(&sets).unwrap();
    let mut t = Trainer::new(ds.clone(), vocab, cfg).unwrap();
    let reward_before = t.state.reward.as_ref().map(|r| fingerprint(&r.params));
    t.run(|_| {}).unwrap();
    let ck = &t.state;
    let reward_frozen = ck
        .reward
        .as_ref()
        .map(|r| r.params.is_frozen() && Some(fingerprint(&r.params)) == reward_before);

    let model = ck.model().unwrap();
    let scorer = Scorer::new(&model, ck.eval_params(), &t.data.features);
    let qs = eval::queries(ds, Split::Val);
    let scores = scorer.score(&qs).unwrap();
    let acc = |mode, lambda| {
        let p = eval::predictions(&scores, &qs, &ds.scenes, mode, lambda).unwrap();
        eval::accuracy(&p, &qs, &ds.scenes, &ds.scenes)
    };
    let settings = GenerationSettings {
        beam: ck.config.beam_width,
        max_len: ck.config.max_len,
        temperature: ck.config.temperature,
        weights: ck.config.rerank(),
    };
    let variants: &[GenerationVariant] = match variant {
        Variant::Speaker => &[],
        Variant::SpeakerMmi => &[GenerationVariant::Greedy, GenerationVariant::BeamTop1],
        Variant::Full => &[
            GenerationVariant::Greedy,
            GenerationVariant::BeamTop1,
            GenerationVariant::Rerank,
        ],
    };
    let generation = variants
        .iter()
        .map(|&v| {
            let rep = eval::evaluate_generation(&scorer, ds, vocab, Split::Val, v, &settings, seed)
                .unwrap();
            (v.name(), rep)
        })
        .collect();
    let (listener, ensemble, lambda) = if variant == Variant::Full {
        let lambda = eval::tune_lambda_on(&scorer, ds, Split::Train, TUNE_QUERIES).unwrap();
        (
            acc(ComprehensionMode::Listener, 0.0),
            acc(ComprehensionMode::Ensemble, lambda),
            lambda,
        )
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Run {
        speaker: acc(ComprehensionMode::Speaker, 0.0),
        listener,
        ensemble,
        lambda,
        chance: eval::chance_level(&qs, &ds.scenes),
        generation,
        reward_heldout: ck.reward.as_ref().map(|r| r.heldout_accuracy),
        reward_frozen,
    }
}

fn ablation(runs: &BTreeMap<(Variant, u64), Run>, secs: f64) -> Vec<Verdict> {
    let pick = |v: Variant, f: &dyn Fn(&Run) -> f64| -> Vec<f64> {
        SEEDS.iter().map(|&s| f(&runs[&(v, s)])).collect()
    };
    let chance = runs[&(Variant::Full, SEEDS[0])].chance;
    let sp: BTreeMap<Variant, Vec<f64>> = Variant::ALL
        .iter()
        .map(|&v| (v, pick(v, &|r| r.speaker)))
        .collect();
    let li = pick(Variant::Full, &|r| r.listener);
    let en = pick(Variant::Full, &|r| r.ensemble);
    let lambdas = pick(Variant::Full, &|r| r.lambda);
    let m = |v: &[f64]| median(v.to_vec());
    for v in Variant::ALL {
        say!(
            "    {:<12} speaker-mode val accuracy {} (median {:.4})",
            v.name(),
            fmt_all(&sp[&v]),
            m(&sp[&v])
        );
    }
    say!(
        "    {:<12} listener {} ensemble {} with lambda {}",
        "full",
        fmt_all(&li),
        fmt_all(&en),
        fmt_all(&lambdas)
    );

    let mut floor: Vec<(String, f64)> = Variant::ALL
        .iter()
        .map(|&v| (v.name().to_string(), m(&sp[&v])))
        .collect();
    floor.push(("full/listener".into(), m(&li)));
    floor.push(("full/ensemble".into(), m(&en)));
    let (low_name, low) = floor
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .expect("models");
    let mut out = vec![Verdict::new(
        "5a",
        "every model beats chance",
        low - chance >= 0.30,
        format!(
            "weakest median {low_name} {low:.4} vs chance {chance:.4}: +{:.1} points (>= 30)",
            100.0 * (low - chance)
        ),
    )];
    let (s, smmi, full) = (
        m(&sp[&Variant::Speaker]),
        m(&sp[&Variant::SpeakerMmi]),
        m(&sp[&Variant::Full]),
    );
    out.push(Verdict::new(
        "5b",
        "MMI helps the speaker",
        smmi > s,
        format!("median speaker+MMI {smmi:.4} > speaker {s:.4}"),
    ));
    out.push(Verdict::new(
        "5c",
        "full model >= speaker+MMI",
        full >= smmi,
        format!("median full {full:.4} >= speaker+MMI {smmi:.4} (speaker as comprehender)"),
    ));
    let best_single = m(&sp[&Variant::Full]).max(m(&li));
    out.push(Verdict::new(
        "5d",
        "ensemble vs single modules",
        m(&en) >= best_single - 0.005,
        format!(
            "median ensemble {:.4} >= max(speaker {:.4}, listener {:.4}) - 0.5 points",
            m(&en),
            m(&sp[&Variant::Full]),
            m(&li)
        ),
    ));
    out.push(Verdict::new(
        "5t",
        "ablation runtime",
        secs < ABLATION_BUDGET_SECS,
        format!("9 training runs plus evaluation in {secs:.0}s (< {ABLATION_BUDGET_SECS:.0}s)"),
    ));

    let gen = |v: Variant, variant: &str, f: &dyn Fn(&GenerationReport) -> f64| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| f(&runs[&(v, s)].generation[variant]))
            .collect()
    };
    let dup_rr = gen(Variant::Full, "rerank", &|g| g.duplicate_rate);
    let dup_gr = gen(Variant::Full, "greedy", &|g| g.duplicate_rate);
    let acc_rr = gen(Variant::Full, "rerank", &|g| g.oracle_accuracy);
    let acc_sm_greedy = gen(Variant::SpeakerMmi, "greedy", &|g| g.oracle_accuracy);
    let acc_sm_beam = gen(Variant::SpeakerMmi, "beam-top1", &|g| g.oracle_accuracy);
    let sm_best = m(&acc_sm_greedy).max(m(&acc_sm_beam));
    say!(
        "    generation: full+rerank acc {} dup {}; full greedy dup {}; speaker+MMI greedy acc {} beam-top1 acc {}",
        fmt_all(&acc_rr),
        fmt_all(&dup_rr),
        fmt_all(&dup_gr),
        fmt_all(&acc_sm_greedy),
        fmt_all(&acc_sm_beam)
    );
    out.push(Verdict::new(
        "6",
        "generation ordering",
        m(&dup_rr) <= m(&dup_gr) && m(&acc_rr) >= sm_best,
        format!(
            "median +rerank duplicate rate {:.4} <= greedy {:.4}; median +rerank oracle accuracy {:.4} >= speaker+MMI {:.4} (best of greedy {:.4}, beam-top1 {:.4})",
            m(&dup_rr),
            m(&dup_gr),
            m(&acc_rr),
            sm_best,
            m(&acc_sm_greedy),
            m(&acc_sm_beam)
        ),
    ));

    let held: Vec<f64> = SEEDS
        .iter()
        .map(|&s| runs[&(Variant::Full, s)].reward_heldout.expect("reward"))
        .collect();
    let frozen = SEEDS
        .iter()
        .all(|&s| runs[&(Variant::Full, s)].reward_frozen == Some(true));
    let min_held = held.iter().copied().fold(f64::MAX, f64::min);
    out.push(Verdict::new(
        "7",
        "reward quality",
        min_held > 0.9 && frozen,
        format!(
            "held-out pair accuracy {} (every seed > 0.9); reward parameters frozen and bit-identical after training: {frozen}",
            fmt_all(&held)
        ),
    ));
    out
}

fn stats_bits(s: &[StepStats]) -> Vec<u64> {
    s.iter().map(|x| x.loss.to_bits()).collect()
}

fn determinism() -> Verdict {
    let world = WorldConfig::default();
    let a = generate_dataset(&world, 9).unwrap().to_jsonl().unwrap();
    let b = generate_dataset(&world, 9).unwrap().to_jsonl().unwrap();
    let data_ok = a == b;

    let small = WorldConfig {
        train_scenes: 150,
        val_scenes: 20,
        test_a_scenes: 5,
        test_b_scenes: 5,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&small, 4).unwrap();
    let vocab = Vocabulary::standard();
    let cfg = TrainConfig::default()
        .with_overrides(&[
            "seed=6",
            "embed=24",
            "hidden=24",
            "joint=24",
            "reward_epochs=1",
            "max_steps=400",
        ])
        .unwrap();
    let mut straight = Trainer::new(ds.clone(), &vocab, cfg.clone()).unwrap();
    let full = straight.run_steps(150).unwrap();
    let mut first = Trainer::new(ds.clone(), &vocab, cfg).unwrap();
    let head = first.run_steps(50).unwrap();
    let saved = first.into_checkpoint().to_json().unwrap();
    let mut resumed = Trainer::resume(ds.clone(), Checkpoint::from_json(&saved).unwrap()).unwrap();
    let tail = resumed.run_steps(100).unwrap();
    let joined: Vec<StepStats> = head.into_iter().chain(tail.iter().cloned()).collect();
    let traj_ok = stats_bits(&full) == stats_bits(&joined)
        && full == joined
        && fingerprint(&straight.state.params) == fingerprint(&resumed.state.params)
        && straight.state.optimizer_state == resumed.state.optimizer_state
        && straight.state.rng == resumed.state.rng;

    let ck = resumed.into_checkpoint();
    let model = ck.model().unwrap();
    let feats = refgame_core::visual::FeatureCache::build(&ds, &model.config.visual).unwrap();
    let report = |jitter| {
        let r = eval::evaluate_comprehension(
            &model,
            ck.eval_params(),
            &ds,
            &feats,
            Split::Val,
            ComprehensionMode::Ensemble,
            1.0,
            jitter,
        )
        .unwrap();
        serde_json::to_string(&r).unwrap()
    };
    let scorer = Scorer::new(&model, ck.eval_params(), &feats);
    let settings = GenerationSettings {
        beam: 3,
        max_len: 10,
        temperature: 1.0,
        weights: RerankWeights::default(),
    };
    let sampled = || {
        let r = eval::evaluate_generation(
            &scorer,
            &ds,
            &vocab,
            Split::Val,
            GenerationVariant::Sample,
            &settings,
            3,
        )
        .unwrap();
        serde_json::to_string(&r).unwrap()
    };
    let eval_ok = report(None) == report(None)
        && report(Some((0.1, 2))) == report(Some((0.1, 2)))
        && sampled() == sampled();
    Verdict::new(
        "8",
        "determinism",
        data_ok && traj_ok && eval_ok,
        format!(
            "dataset bytes identical: {data_ok} ({} bytes); 50 + {} resumed steps bit-identical to 150 straight: {traj_ok}; evaluation reports identical: {eval_ok}",
            a.len(),
            tail.len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = vec![
        gradient_suite(),
        policy_gradient_oracle(),
        loss_zero_cases(),
        beam_and_icm(),
    ];

    let started = Instant::now();
    let ds = generate_dataset(&WorldConfig::default(), WORLD_SEED).unwrap();
    let vocab = Vocabulary::standard();
    let mut runs = BTreeMap::new();
    for &seed in &SEEDS {
        for v in Variant::ALL {
            let t = Instant::now();
            let run = train_and_score(&ds, &vocab, seed, v);
            say!(
                "    seed {seed} {:<12} speaker-mode {:.4} ({:.0}s)",
                v.name(),
                run.speaker,
                t.elapsed().as_secs_f64()
            );
            runs.insert((v, seed), run);
        }
    }
    verdicts.extend(ablation(&runs, started.elapsed().as_secs_f64()));
    verdicts.push(determinism());

    let failed: Vec<&str> = verdicts
        .iter()
        .filter(|v| !v.passed)
        .map(|v| v.id)
        .collect();
    say!(
        "acceptance: {}/{} criteria passed",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    if !failed.is_empty() {
        say!("acceptance: failed criteria {failed:?}");
    }
    if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        assert!(failed.is_empty(), "failed criteria: {failed:?}");
    }
}
