//! Sizes, parameter layout and helpers shared by the speaker, listener and
//! reward model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Linear, Lstm, ParamStore, Var};
use crate::error::{Error, Result};
use crate::listener::Listener;
use crate::rng::Rng;
use crate::speaker::Speaker;
use crate::visual::{self, VisualConfig};
use crate::world::END;

/// Word embedding table shared by speaker and listener.
pub const EMBED: &str = "embed.word";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Word embedding and fused visual width.
    pub embed: usize,
    pub hidden: usize,
    /// Width of the joint embedding space of the listener.
    pub joint: usize,
    pub visual: VisualConfig,
    /// Feeds the listener's object embedding to the speaker.
    pub listener_input: bool,
    pub word_dropout: f64,
    pub lstm_dropout: f64,
    pub mlp_dropout: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed: 64,
            hidden: 64,
            joint: 64,
            visual: VisualConfig::default(),
            listener_input: true,
            word_dropout: 0.5,
            lstm_dropout: 0.5,
            mlp_dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed == 0 || self.hidden == 0 || self.joint == 0 {
            return Err(Error::Config(
                "vocabulary needs two tokens and every width must be positive".into(),
            ));
        }
        for p in [self.word_dropout, self.lstm_dropout, self.mlp_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout ratio {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Visual fusion, speaker and listener with their parameter names.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub fuse: Linear,
    pub speaker: Speaker,
    pub listener: Listener,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            fuse: visual::fuser(&config.visual, config.embed),
            speaker: Speaker::new(&config),
            listener: Listener::new(&config),
            config,
        })
    }

    pub fn init(&self, rng: &mut Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let c = &self.config;
        store.insert(EMBED, Array::uniform(&[c.vocab_size, c.embed], 0.1, rng))?;
        self.fuse.init(&mut store, rng)?;
        self.speaker.init(&mut store, rng)?;
        self.listener.init(&mut store, rng)?;
        Ok(store)
    }

    /// Fused representations `r` of pre-fusion feature rows.
    pub fn fuse_rows<R: AsRef<[f64]>>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: &[R],
    ) -> Result<Var> {
        let x = g.constant(Array::from_rows(rows)?);
        self.fuse.forward(g, store, x)
    }

    /// Speaker conditioning: `r`, joined with the listener's object embedding
    /// when the model is configured for it.
    pub fn speaker_input(&self, g: &mut Graph, r: Var, object_view: Option<Var>) -> Result<Var> {
        match (self.config.listener_input, object_view) {
            (true, Some(v)) => g.concat(&[r, v]),
            (true, None) => Err(Error::Config(
                "speaker expects the listener object embedding".into(),
            )),
            (false, _) => Ok(r),
        }
    }
}

/// Token sequences padded with END into per-step columns, with a mask marking
/// real positions.
pub(crate) struct Padded {
    pub steps: Vec<Vec<usize>>,
    pub masks: Vec<Array>,
    pub last: Vec<usize>,
}

pub(crate) fn pad<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Padded> {
    let n = seqs.len();
    if n == 0 {
        return Err(Error::Empty("sequence batch"));
    }
    let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
    if seqs.iter().any(|s| s.as_ref().is_empty()) {
        return Err(Error::Empty("token sequence"));
    }
    let mut steps = Vec::with_capacity(len);
    let mut masks = Vec::with_capacity(len);
    for t in 0..len {
        steps.push(
            seqs.iter()
                .map(|s| s.as_ref().get(t).copied().unwrap_or(END))
                .collect(),
        );
        let m: Vec<f64> = seqs
            .iter()
            .map(|s| if t < s.as_ref().len() { 1.0 } else { 0.0 })
            .collect();
        masks.push(Array::new(vec![n, 1], m)?);
    }
    let last = seqs.iter().map(|s| s.as_ref().len() - 1).collect();
    Ok(Padded { steps, masks, last })
}

/// Runs `lstm` over embedded token sequences and returns each row's hidden
/// state after its own final token.
pub(crate) fn encode_final(
    g: &mut Graph,
    store: &ParamStore,
    lstm: &Lstm,
    table: Var,
    seqs: &[&[usize]],
) -> Result<Var> {
    let p = pad(seqs)?;
    let n = seqs.len();
    let (mut h, mut c) = lstm.zero_state(g, n);
    let mut out: Option<Var> = None;
    for (t, tokens) in p.steps.iter().enumerate() {
        let x = g.embedding(table, tokens)?;
        (h, c) = lstm.step(g, store, x, h, c)?;
        let sel: Vec<f64> = p
            .last
            .iter()
            .map(|&l| if l == t { 1.0 } else { 0.0 })
            .collect();
        if sel.iter().all(|&s| s == 0.0) {
            continue;
        }
        let sel = g.constant(Array::new(vec![n, 1], sel)?);
        let picked = g.mul(h, sel)?;
        out = Some(match out {
            Some(o) => g.add(o, picked)?,
            None => picked,
        });
    }
    out.ok_or(Error::Empty("token sequence"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn final_state_ignores_padding() {
        let mut rng = seeded(2);
        let lstm = Lstm::new("enc", 3, 4);
        let mut store = ParamStore::new();
        lstm.init(&mut store, &mut rng).unwrap();
        store
            .insert("tab", Array::uniform(&[5, 3], 1.0, &mut rng))
            .unwrap();
        let run = |seqs: &[&[usize]]| {
            let mut g = Graph::eval();
            let t = g.param(&store, "tab").unwrap();
            let v = encode_final(&mut g, &store, &lstm, t, seqs).unwrap();
            g.value(v).clone()
        };
        let alone = run(&[&[3, 4, 1]]);
        let batched = run(&[&[2, 2, 2, 2, 1], &[3, 4, 1]]);
        assert_eq!(alone.row(0), batched.row(1));
    }

    #[test]
    fn model_initialises_every_layer_once() {
        let m = Model::new(ModelConfig::new(27)).unwrap();
        let store = m.init(&mut seeded(0)).unwrap();
        assert!(store.contains(EMBED));
        assert!(store.contains("visual.fuse.w"));
        assert!(store.names().any(|n| n.starts_with("speaker.")));
        assert!(store.names().any(|n| n.starts_with("listener.")));
        let bad = ModelConfig {
            word_dropout: 1.0,
            ..ModelConfig::new(27)
        };
        assert!(Model::new(bad).is_err());
    }
}
