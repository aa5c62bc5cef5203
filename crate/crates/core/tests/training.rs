//! Training-level behavior: the mean-pool TransE baseline against a
//! directly coded one, and early stopping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hyperenz::diffmath::Graph;
use hyperenz::hypergraph::SampleLimits;
use hyperenz::kg::{ingest_str, split, CompoundId, EquationFormat, EquationKG, Part, SplitSpec};
use hyperenz::kge::{self_adversarial_loss, LossConfig};
use hyperenz::model::{Decoder, DecoderKind, EncoderKind, Model, ModelConfig, Prepared};
use hyperenz::synth::{generate, SyntheticSpec};
use hyperenz::trainer::{TrainConfig, Trainer};

fn toy() -> EquationKG {
    let mut kg = EquationKG::new();
    ingest_str(&mut kg, "a;b\te1\tc\nb;c\te2\td;e\nd\te3\ta;e\ne;a\te1\tb;d\n", EquationFormat::Tsv).unwrap();
    kg
}

fn baseline_model(kg: &EquationKG) -> Model {
    let config = ModelConfig {
        dim: 6,
        hidden: 12,
        layers: 1,
        encoder: EncoderKind::MeanPool,
        decoder: DecoderKind::TransE,
        limits: SampleLimits { eta1: 5, eta2: 3 },
    };
    Model::new(config, kg.num_compounds(), kg.num_enzymes(), &mut ChaCha8Rng::seed_from_u64(11))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Plain<'a> {
    table: &'a [f64],
    rel: &'a [f64],
    n: usize,
}

impl Plain<'_> {
    fn mean(&self, cs: &[CompoundId]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for c in cs {
            for (o, x) in out.iter_mut().zip(&self.table[c.index() * self.n..][..self.n]) {
                *o += x / cs.len() as f64;
            }
        }
        out
    }

    fn diff(&self, s: &[f64], p: &[f64], m: usize) -> Vec<f64> {
        (0..self.n).map(|k| s[k] + self.rel[m * self.n + k] - p[k]).collect()
    }

    fn distance(&self, s: &[f64], p: &[f64], m: usize) -> f64 {
        self.diff(s, p, m).iter().map(|x| x.abs()).sum()
    }
}

#[test]
fn mean_pool_transe_matches_a_plain_baseline() {
    let kg = toy();
    let model = baseline_model(&kg);
    let Decoder::TransE(rel) = &model.decoder else {
        panic!("expected a TransE decoder");
    };
    let n = model.config.dim;
    let plain = Plain {
        table: model.store.get(model.encoder.compounds).data(),
        rel: model.store.get(rel.head).data(),
        n,
    };
    let cfg = LossConfig::default();

    for t in &kg.complete {
        let (s, p) = (plain.mean(&t.educts), plain.mean(&t.products));
        let s_in = Prepared::Members(t.educts.clone());
        let p_in = Prepared::Members(t.products.clone());
        let scores = model.score_all(&model.embed(&s_in).unwrap(), &model.embed(&p_in).unwrap()).unwrap();
        for (m, got) in scores.iter().enumerate() {
            assert!((got - plain.distance(&s, &p, m)).abs() < 1e-12);
        }

        // loss gradient on the compound table with every other enzyme as a
        // negative, written out by hand
        let target = t.enzyme.unwrap().index();
        let negs: Vec<usize> = (0..kg.num_enzymes()).filter(|m| *m != target).collect();
        let d_pos = plain.distance(&s, &p, target);
        let d_neg: Vec<f64> = negs.iter().map(|&m| plain.distance(&s, &p, m)).collect();
        let z: f64 = d_neg.iter().map(|d| (-cfg.adv_temperature * d).exp()).sum();
        let w: Vec<f64> = d_neg.iter().map(|d| (-cfg.adv_temperature * d).exp() / z).collect();
        let sign = |v: Vec<f64>| v.into_iter().map(f64::signum).collect::<Vec<_>>();
        // dL/d(s - p) as a function of the L1 subgradients
        let mut d_diff: Vec<f64> = sign(plain.diff(&s, &p, target)).iter().map(|g| sigmoid(d_pos - cfg.margin) * g).collect();
        for ((m, d), wi) in negs.iter().zip(&d_neg).zip(&w) {
            for (acc, g) in d_diff.iter_mut().zip(sign(plain.diff(&s, &p, *m))) {
                *acc -= wi * sigmoid(cfg.margin - d) * g;
            }
        }
        let mut want = vec![0.0; kg.num_compounds() * n];
        for (set, dir) in [(&t.educts, 1.0), (&t.products, -1.0)] {
            for c in set.iter() {
                for k in 0..n {
                    want[c.index() * n + k] += dir * d_diff[k] / set.len() as f64;
                }
            }
        }

        let mut g = Graph::with_params(&model.store);
        let sv = model.encode(&mut g, &s_in, None).unwrap();
        let pv = model.encode(&mut g, &p_in, None).unwrap();
        let pos = model.score_nodes(&mut g, sv, pv, &[target]).unwrap();
        let neg = model.score_nodes(&mut g, sv, pv, &negs).unwrap();
        let loss = self_adversarial_loss(&mut g, pos, neg, &cfg).unwrap();
        let grads = g.backward(loss).unwrap().into_params();
        let got = grads.get(model.encoder.compounds).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn early_stopping_returns_the_best_round() {
    let spec = SyntheticSpec {
        complete: 120,
        incomplete: 20,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let kg = generate(&spec).unwrap().to_kg().unwrap();
    let parts = split(&kg, &SplitSpec { ratios: [8, 1, 1], seed: 4 }).unwrap();
    let config = TrainConfig {
        epochs: 40,
        patience: 3,
        dim: 16,
        lr: 0.01,
        seed: 4,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(config, &kg).unwrap();
    let out = trainer.fit(&parts).unwrap();
    let seen: Vec<f64> = out.history.iter().filter_map(|h| h.valid_mrr).collect();
    let best = seen.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.best_valid_mrr, Some(best));
    let again = trainer.evaluate(&out.best.model, &parts, Part::Valid).unwrap().mrr;
    assert_eq!(again, best);
    if out.stopped_early {
        assert!(out.history.len() < 40);
    }
}
