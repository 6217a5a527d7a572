//! Finite-difference checks of every graph operation, layer and training
//! loss on small random instances.

use crate::autodiff::gradcheck::{check, GradCheckReport};
use crate::autodiff::{Array, Graph, Linear, Lstm, ParamStore, Var};
use crate::error::Result;
use crate::listener::{similarity, triplet_loss};
use crate::model::Model;
use crate::reinforcer::{bce_loss, policy_gradient_loss, RewardConfig, RewardModel};
use crate::rng::{self, Rng};
use crate::speaker::{mmi_loss, sample_sequences, Margins};
use crate::trainer::{joint_loss, sample_triplets, Reward, TrainConfig, TrainData};
use crate::visual::VisualConfig;
use crate::world::{generate_dataset, Vocabulary, WorldConfig};

/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const THRESHOLD: f64 = 1e-4;
/// Coordinates probed per parameter.
pub const PER_PARAM: usize = 12;

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_err < THRESHOLD
    }
}

type Build<'a> = Box<dyn FnMut(&ParamStore) -> Result<(Graph, Var)> + 'a>;

fn store(entries: &[(&str, &[usize], f64)], rng: &mut Rng) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (name, shape, scale) in entries {
        s.insert(*name, Array::uniform(shape, *scale, rng))?;
    }
    Ok(s)
}

/// Reduces any matrix to a scalar through fixed random weights, so every
/// output coordinate carries a distinct gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(Array::uniform(&shape, 1.0, &mut rng::seeded(seed)));
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

/// A named case: parameter store plus scalar builder.
struct Case<'a> {
    name: &'static str,
    store: ParamStore,
    build: Build<'a>,
}

fn unary(
    name: &'static str,
    rng: &mut Rng,
    f: fn(&mut Graph, Var) -> Result<Var>,
) -> Result<Case<'static>> {
    Ok(Case {
        name,
        store: store(&[("x", &[3, 4], 1.5)], rng)?,
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let x = g.param(s, "x")?;
            let y = f(&mut g, x)?;
            let r = project(&mut g, y, 1)?;
            Ok((g, r))
        }),
    })
}

fn binary(
    name: &'static str,
    rng: &mut Rng,
    b_shape: &'static [usize],
    f: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Case<'static>> {
    Ok(Case {
        name,
        store: store(&[("a", &[3, 4], 1.0), ("b", b_shape, 1.0)], rng)?,
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let y = f(&mut g, a, b)?;
            let r = project(&mut g, y, 2)?;
            Ok((g, r))
        }),
    })
}

fn op_cases(rng: &mut Rng) -> Result<Vec<Case<'static>>> {
    let mut v = vec![
        binary("add", rng, &[3, 4], |g, a, b| g.add(a, b))?,
        binary("add_row_broadcast", rng, &[1, 4], |g, a, b| g.add(a, b))?,
        binary("add_col_broadcast", rng, &[3, 1], |g, a, b| g.add(a, b))?,
        binary("sub", rng, &[3, 4], |g, a, b| g.sub(a, b))?,
        binary("mul", rng, &[3, 4], |g, a, b| g.mul(a, b))?,
        binary("mul_broadcast", rng, &[3, 1], |g, a, b| g.mul(a, b))?,
        binary("matmul", rng, &[4, 5], |g, a, b| g.matmul(a, b))?,
        binary("concat", rng, &[3, 2], |g, a, b| g.concat(&[a, b]))?,
        binary("inner_product", rng, &[3, 4], |g, a, b| {
            g.inner_product(a, b)
        })?,
        unary("add_scalar", rng, |g, x| g.add_scalar(x, 0.7))?,
        unary("scale", rng, |g, x| Ok(g.scale(x, -1.3)))?,
        unary("slice", rng, |g, x| g.slice(x, 1, 3))?,
        unary("tanh", rng, |g, x| Ok(g.tanh(x)))?,
        unary("sigmoid", rng, |g, x| Ok(g.sigmoid(x)))?,
        unary("relu", rng, |g, x| Ok(g.relu(x)))?,
        unary("hinge", rng, |g, x| Ok(g.hinge(x)))?,
        unary("softmax", rng, |g, x| g.softmax(x))?,
        unary("log_softmax", rng, |g, x| g.log_softmax(x))?,
        unary("l2_normalize", rng, |g, x| g.l2_normalize(x))?,
        unary("sum", rng, |g, x| Ok(g.sum(x)))?,
        unary("mean", rng, |g, x| g.mean(x))?,
        unary("pick", rng, |g, x| g.pick(x, &[3, 0, 2]))?,
        unary("embedding", rng, |g, x| g.embedding(x, &[2, 0, 2, 1]))?,
        unary("dropout", rng, |g, x| {
            g.dropout(x, 0.4, &mut rng::seeded(9))
        })?,
    ];
    let lin = Linear::new("lin", 4, 3);
    let mut s = store(&[("x", &[5, 4], 1.0)], rng)?;
    lin.init(&mut s, rng)?;
    v.push(Case {
        name: "linear",
        store: s,
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let x = g.param(s, "x")?;
            let y = lin.forward(&mut g, s, x)?;
            let r = project(&mut g, y, 3)?;
            Ok((g, r))
        }),
    });
    let lstm = Lstm::new("lstm", 3, 4);
    let mut s = store(&[("x", &[2, 3], 1.0)], rng)?;
    lstm.init(&mut s, rng)?;
    v.push(Case {
        name: "lstm_unrolled",
        store: s,
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let x = g.param(s, "x")?;
            let (mut h, mut c) = lstm.zero_state(&mut g, 2);
            for _ in 0..3 {
                (h, c) = lstm.step(&mut g, s, x, h, c)?;
            }
            let hc = g.concat(&[h, c])?;
            let r = project(&mut g, hc, 4)?;
            Ok((g, r))
        }),
    });
    Ok(v)
}

fn tiny_setup() -> Result<(TrainData, Vocabulary, TrainConfig)> {
    let world = WorldConfig {
        train_scenes: 6,
        val_scenes: 1,
        test_a_scenes: 1,
        test_b_scenes: 1,
        ..WorldConfig::default()
    };
    let data = TrainData::new(generate_dataset(&world, 3)?, &VisualConfig::default())?;
    let cfg = TrainConfig {
        embed: 5,
        hidden: 4,
        joint: 3,
        reward_embed: 4,
        reward_hidden: 3,
        max_len: 4,
        ..TrainConfig::default()
    };
    Ok((data, Vocabulary::standard(), cfg))
}

fn loss_cases<'a>(
    data: &'a TrainData,
    vocab: &Vocabulary,
    cfg: &'a TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<Case<'a>>> {
    let model = Model::new(cfg.model_config(vocab.len()))?;
    let params = model.init(rng)?;
    let batch: Vec<usize> = (0..4).collect();
    let triplets = sample_triplets(data, &batch, &mut rng::seeded(4));
    let margins = Margins {
        margin: 0.1,
        object_weight: 1.0,
        expression_weight: 0.1,
    };
    let mut v: Vec<Case<'a>> = Vec::new();

    let s = store(
        &[
            ("pos", &[6, 1], 1.0),
            ("obj", &[6, 1], 1.0),
            ("expr", &[6, 1], 1.0),
        ],
        rng,
    )?;
    v.push(Case {
        name: "mmi_margin_loss",
        store: s,
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let (p, o, e) = (g.param(s, "pos")?, g.param(s, "obj")?, g.param(s, "expr")?);
            let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
            let r = mmi_loss(&mut g, p, o, e, &mask, &[1.0; 6], margins)?;
            Ok((g, r))
        }),
    });
    let s = store(
        &[
            ("ev", &[6, 3], 1.0),
            ("ov", &[6, 3], 1.0),
            ("ov2", &[6, 3], 1.0),
            ("ev2", &[6, 3], 1.0),
        ],
        rng,
    )?;
    v.push(Case {
        name: "listener_triplet_loss",
        store: s,
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let mut unit = |n: &str| -> Result<Var> {
                let x = g.param(s, n)?;
                g.l2_normalize(x)
            };
            let (e, o, o2, e2) = (unit("ev")?, unit("ov")?, unit("ov2")?, unit("ev2")?);
            let sp = similarity(&mut g, e, o)?;
            let so = similarity(&mut g, e, o2)?;
            let se = similarity(&mut g, e2, o)?;
            let m = Margins {
                margin: 0.5,
                object_weight: 1.0,
                expression_weight: 1.0,
            };
            let r = triplet_loss(&mut g, sp, so, se, &[1.0; 6], &[1.0; 6], m)?;
            Ok((g, r))
        }),
    });

    let m2 = model.clone();
    let ex: Vec<(usize, usize, Vec<usize>)> = batch
        .iter()
        .map(|&i| {
            let e = &data.examples[i];
            (e.scene, e.object, e.tokens.clone())
        })
        .collect();
    v.push(Case {
        name: "speaker_likelihood",
        store: params.clone(),
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let rows: Vec<&[f64]> = ex.iter().map(|e| data.features.get(e.0, e.1)).collect();
            let toks: Vec<&[usize]> = ex.iter().map(|e| &e.2[..]).collect();
            let r = m2.fuse_rows(&mut g, s, &rows)?;
            let ov = m2.listener.object_view(&mut g, s, r, &mut rng::seeded(1))?;
            let cond = m2.speaker_input(&mut g, r, Some(ov))?;
            let lp = m2
                .speaker
                .log_likelihood(&mut g, s, cond, &toks, &mut rng::seeded(2))?;
            let m = g.mean(lp)?;
            let r = g.scale(m, -1.0);
            Ok((g, r))
        }),
    });

    let rm = RewardModel::new(
        data.features.scenes[0][0].len(),
        vocab.len(),
        &RewardConfig {
            embed: cfg.reward_embed,
            hidden: cfg.reward_hidden,
            ..RewardConfig::default()
        },
    );
    let reward_params = rm.init(rng)?;
    let rm2 = rm.clone();
    let ex: Vec<(usize, usize, Vec<usize>, bool)> = (0..6)
        .map(|i| {
            let e = &data.examples[i];
            (e.scene, e.object, e.tokens.clone(), i % 2 == 0)
        })
        .collect();
    v.push(Case {
        name: "reward_cross_entropy",
        store: reward_params.clone(),
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let rows: Vec<&[f64]> = ex.iter().map(|e| data.features.get(e.0, e.1)).collect();
            let toks: Vec<&[usize]> = ex.iter().map(|e| &e.2[..]).collect();
            let labels: Vec<bool> = ex.iter().map(|e| e.3).collect();
            let z = rm2.logits(&mut g, s, &rows, &toks)?;
            let r = bce_loss(&mut g, z, &labels)?;
            Ok((g, r))
        }),
    });

    let m3 = model.clone();
    let ex: Vec<(usize, usize)> = batch
        .iter()
        .map(|&i| (data.examples[i].scene, data.examples[i].object))
        .collect();
    let max_len = cfg.max_len;
    v.push(Case {
        name: "policy_gradient_surrogate",
        store: params.clone(),
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let rows: Vec<&[f64]> = ex.iter().map(|e| data.features.get(e.0, e.1)).collect();
            let r = m3.fuse_rows(&mut g, s, &rows)?;
            let ov = m3.listener.object_view(&mut g, s, r, &mut rng::seeded(1))?;
            let cond = m3.speaker_input(&mut g, r, Some(ov))?;
            let mut drop = rng::seeded(3);
            let mut pol = m3.speaker.policy(&mut g, s, cond, &mut drop)?;
            let smp = sample_sequences(&mut g, &mut pol, 1.0, max_len, &mut rng::seeded(5))?;
            let rewards: Vec<f64> = (0..ex.len()).map(|i| 0.2 + 0.15 * i as f64).collect();
            let l = policy_gradient_loss(&mut g, smp.log_prob, &rewards, 0.3, 1.0)?;
            Ok((g, l))
        }),
    });

    let m4 = model;
    let mut frozen = reward_params;
    frozen.freeze();
    v.push(Case {
        name: "joint_objective",
        store: params,
        build: Box::new(move |s| {
            let mut g = Graph::train();
            let reward = Reward {
                model: &rm,
                store: &frozen,
            };
            let parts = joint_loss(
                &mut g,
                &m4,
                s,
                data,
                &triplets,
                cfg,
                cfg.terms(),
                Some(reward),
                0.2,
                11,
            )?;
            Ok((g, parts.total))
        }),
    });
    Ok(v)
}

/// Runs every case and returns one report per case.
pub fn run(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = rng::stream(seed, "gradcheck");
    let mut out = Vec::new();
    for mut c in op_cases(&mut rng)? {
        let report = check(&c.store, &mut c.build, PER_PARAM, EPS, THRESHOLD, &mut rng)?;
        out.push(CaseReport {
            name: c.name,
            report,
        });
    }
    let (data, vocab, cfg) = tiny_setup()?;
    for mut c in loss_cases(&data, &vocab, &cfg, &mut rng)? {
        let report = check(&c.store, &mut c.build, PER_PARAM, EPS, THRESHOLD, &mut rng)?;
        out.push(CaseReport {
            name: c.name,
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let reports = run(1).unwrap();
        assert!(reports.len() >= 30);
        for r in &reports {
            assert!(r.passed(), "{}: {:?}", r.name, r.report);
        }
    }
}
