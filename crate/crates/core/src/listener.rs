//! Joint embedding of expressions and objects; similarity is the inner
//! product of the two L2-normalised views.

use crate::autodiff::{Graph, Linear, Lstm, ParamStore, Var};
use crate::error::Result;
use crate::model::{encode_final, ModelConfig, EMBED};
use crate::rng::Rng;
use crate::speaker::{ranking_loss, Margins};

#[derive(Clone, Debug)]
pub struct Listener {
    pub lstm: Lstm,
    pub obj1: Linear,
    pub obj2: Linear,
    pub expr1: Linear,
    pub expr2: Linear,
    pub dropout: f64,
}

impl Listener {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            lstm: Lstm::new("listener.lstm", cfg.embed, cfg.hidden),
            obj1: Linear::new("listener.obj1", cfg.embed, cfg.joint),
            obj2: Linear::new("listener.obj2", cfg.joint, cfg.joint),
            expr1: Linear::new("listener.expr1", cfg.hidden, cfg.joint),
            expr2: Linear::new("listener.expr2", cfg.joint, cfg.joint),
            dropout: cfg.mlp_dropout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.lstm.init(store, rng)?;
        for l in [&self.obj1, &self.obj2, &self.expr1, &self.expr2] {
            l.init(store, rng)?;
        }
        Ok(())
    }

    fn mlp(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layers: (&Linear, &Linear),
        x: Var,
        rng: &mut Rng,
    ) -> Result<Var> {
        let h = layers.0.forward(g, store, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout, rng)?;
        let y = layers.1.forward(g, store, h)?;
        let y = g.dropout(y, self.dropout, rng)?;
        g.l2_normalize(y)
    }

    /// Unit-norm object embeddings of fused visual rows. This is also the
    /// listener-aware input of the speaker.
    pub fn object_view(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        r: Var,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.mlp(g, store, (&self.obj1, &self.obj2), r, rng)
    }

    /// Unit-norm expression embeddings from the final LSTM state.
    pub fn expression_view<S: AsRef<[usize]>>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        exprs: &[S],
        rng: &mut Rng,
    ) -> Result<Var> {
        let table = g.param(store, EMBED)?;
        let seqs: Vec<&[usize]> = exprs.iter().map(|e| e.as_ref()).collect();
        let enc = encode_final(g, store, &self.lstm, table, &seqs)?;
        self.mlp(g, store, (&self.expr1, &self.expr2), enc, rng)
    }
}

/// `S(r, o)` per row of two equally shaped embedding batches, `n x 1`.
pub fn similarity(g: &mut Graph, expr_view: Var, obj_view: Var) -> Result<Var> {
    g.inner_product(expr_view, obj_view)
}

/// Triplet hinge over similarities of the positive pair, the object negative
/// and the expression negative.
pub fn triplet_loss(
    g: &mut Graph,
    s_pos: Var,
    s_neg_obj: Var,
    s_neg_expr: Var,
    obj_mask: &[f64],
    expr_mask: &[f64],
    m: Margins,
) -> Result<Var> {
    ranking_loss(g, s_pos, s_neg_obj, s_neg_expr, obj_mask, expr_mask, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Array;
    use crate::rng::seeded;

    fn setup() -> (Listener, ParamStore) {
        let cfg = ModelConfig {
            embed: 6,
            hidden: 5,
            joint: 4,
            ..ModelConfig::new(9)
        };
        let l = Listener::new(&cfg);
        let mut store = ParamStore::new();
        let mut rng = seeded(4);
        store
            .insert(EMBED, Array::uniform(&[9, 6], 0.5, &mut rng))
            .unwrap();
        l.init(&mut store, &mut rng).unwrap();
        (l, store)
    }

    #[test]
    fn similarity_is_bounded_on_random_pairs() {
        let (l, store) = setup();
        let mut rng = seeded(9);
        let mut g = Graph::eval();
        let r = g.constant(Array::uniform(&[1000, 6], 3.0, &mut rng));
        let exprs: Vec<Vec<usize>> = (0..1000)
            .map(|i| vec![3 + i % 6, 3 + (i / 6) % 6, 1])
            .collect();
        let o = l.object_view(&mut g, &store, r, &mut rng).unwrap();
        let e = l.expression_view(&mut g, &store, &exprs, &mut rng).unwrap();
        let s = similarity(&mut g, e, o).unwrap();
        assert!(g.value(s).data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let on = g.value(o).row(17).iter().map(|v| v * v).sum::<f64>();
        assert!((on - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_and_antipodal_views() {
        let mut g = Graph::eval();
        let v = g.constant(Array::from_rows(&[[0.6, 0.8]]).unwrap());
        let w = g.constant(Array::from_rows(&[[-0.6, -0.8]]).unwrap());
        let s = similarity(&mut g, v, v).unwrap();
        assert!((g.value(s).item() - 1.0).abs() < 1e-15);
        let s = similarity(&mut g, v, w).unwrap();
        assert!((g.value(s).item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn triplet_cases() {
        let m = Margins {
            margin: 0.1,
            object_weight: 1.0,
            expression_weight: 0.0,
        };
        let mut g = Graph::eval();
        let p = g.constant(Array::from_rows(&[[0.8]]).unwrap());
        let n = g.constant(Array::from_rows(&[[0.75]]).unwrap());
        let l = triplet_loss(&mut g, p, n, n, &[1.0], &[1.0], m).unwrap();
        assert!((g.value(l).item() - 0.05).abs() < 1e-12);
        let one = g.constant(Array::from_rows(&[[1.0]]).unwrap());
        let low = g.constant(Array::from_rows(&[[0.85]]).unwrap());
        let both = Margins {
            expression_weight: 1.0,
            ..m
        };
        let l = triplet_loss(&mut g, one, low, low, &[1.0], &[1.0], both).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn shared_rotation_preserves_similarity() {
        let mut rng = seeded(3);
        let mut g = Graph::eval();
        let a = g.constant(Array::uniform(&[5, 3], 1.0, &mut rng));
        let b = g.constant(Array::uniform(&[5, 3], 1.0, &mut rng));
        let a = g.l2_normalize(a).unwrap();
        let b = g.l2_normalize(b).unwrap();
        let s = similarity(&mut g, a, b).unwrap();
        // rotation by Gram-Schmidt on a random matrix
        let m = Array::uniform(&[3, 3], 1.0, &mut rng);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..3 {
            let mut v: Vec<f64> = (0..3).map(|j| m.data()[j * 3 + i]).collect();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.push(v.into_iter().map(|x| x / n).collect());
        }
        let flat: Vec<f64> = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| q[c][r])
            .collect();
        let rot = g.constant(Array::matrix(3, 3, flat).unwrap());
        let ra = g.matmul(a, rot).unwrap();
        let rb = g.matmul(b, rot).unwrap();
        let s2 = similarity(&mut g, ra, rb).unwrap();
        for (x, y) in g.value(s).data().iter().zip(g.value(s2).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
