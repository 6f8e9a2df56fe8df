use ewclab::datagen::{gen_arith_dataset, gen_text_corpus, CorpusSpec, ExponentDist, Grammar};
use ewclab::evalanalysis::heldout_mlm_loss;
use ewclab::fisher::FisherVector;
use ewclab::model::{build_model, ModelConfig, TokenSeq};
use ewclab::training::{lambda_sweep, weighted_displacement, OptConfig};

#[test]
fn fresh_model_is_near_uniform() {
    let params = build_model(&ModelConfig::default()).unwrap();
    let data: Vec<TokenSeq> = gen_arith_dataset(100, &ExponentDist::default(), 8)
        .unwrap()
        .into_iter()
        .map(|x| x.seq)
        .collect();
    let loss = heldout_mlm_loss(&params, &data).unwrap();
    assert!((loss - 48f64.ln()).abs() <= 0.3, "{loss}");
}

#[test]
fn corpus_mask_rate_is_on_target() {
    for grammar in [Grammar::A, Grammar::B] {
        let corpus = gen_text_corpus(&CorpusSpec {
            grammar,
            n_sentences: 10_000,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let words: usize = corpus
            .iter()
            .map(|s| s.ids.len() - 1 - s.ids.iter().filter(|&&t| t == ewclab::model::vocab::SEP).count())
            .sum();
        let masks: usize = corpus.iter().map(|s| s.mask_positions.len()).sum();
        let expected = 0.15 * words as f64;
        assert!(
            (masks as f64 - expected).abs() <= 0.01 * expected,
            "{masks} masks for {words} words"
        );
    }
}

#[test]
fn pinning_grows_with_lambda() {
    let params = build_model(&ModelConfig {
        n_layers: 1,
        d_model: 16,
        d_ffn: 32,
        ..Default::default()
    })
    .unwrap();
    let data: Vec<TokenSeq> = gen_arith_dataset(64, &ExponentDist::default(), 9)
        .unwrap()
        .into_iter()
        .map(|x| x.seq)
        .collect();
    let fisher = FisherVector {
        values: ewclab::Tensor::randn(&[params.flat_len()], 2, 1.0)
            .unwrap()
            .data()
            .iter()
            .map(|v| v * v)
            .collect(),
        n_samples: 1,
        task_label: "synthetic".into(),
    };
    let opt = OptConfig {
        epochs: 3,
        batch_size: 16,
        ..Default::default()
    };
    let grid = [1e6, 1e4, 1e2, 1.0, 0.0];
    let runs = lambda_sweep(&params, &data, &opt, &params, &fisher, &grid).unwrap();
    let anchor = params.flatten();
    let disp: Vec<f64> = runs
        .iter()
        .map(|r| weighted_displacement(&r.params.flatten(), &anchor, &fisher.values))
        .collect();
    assert!(disp.windows(2).all(|w| w[0] <= w[1]), "{disp:?}");
}
