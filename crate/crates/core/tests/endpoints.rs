mod common;

use relprox_core::synth::{generate_corpus, SyntheticCorpusSpec};
use relprox_core::train::{EvalConfig, TrainConfig};

#[test]
fn oracle_embeddings_are_perfect() {
    let corpus = generate_corpus(&SyntheticCorpusSpec::default()).unwrap();
    let r = common::oracle_endpoint(&corpus, &TrainConfig::default(), &EvalConfig::default());
    assert_eq!((r.eer, r.ap), (0.0, 1.0));
}

#[test]
fn untrained_encoders_score_at_chance() {
    let corpus = generate_corpus(&SyntheticCorpusSpec::default()).unwrap();
    let eval = EvalConfig::default();
    let prior = eval.n_pos as f64 / (eval.n_pos + eval.n_neg) as f64;
    for seed in 1..=3 {
        let cfg = TrainConfig { seed, ..Default::default() };
        let r = common::untrained_endpoint(&corpus, &cfg, &eval);
        println!("seed {seed}: EER {:.4} AP {:.4} (prior {prior:.4})", r.eer, r.ap);
        assert!((r.eer - 0.5).abs() <= 0.1, "EER {}", r.eer);
        assert!((r.ap - prior).abs() <= 0.1, "AP {}", r.ap);
    }
}
