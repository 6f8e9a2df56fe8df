use ewclab::checkpoint::Container;
use ewclab::config::RunConfig;
use ewclab::datagen::{render_instance, ArithOp};
use ewclab::evalanalysis::{decode_numeral, ln_rmse, ln_rmse_with, LnRmseMode};
use ewclab::fisher::{estimate_diag_fisher_with, MlmLikelihood, ScoreModel};
use ewclab::model::vocab::tokenize;
use ewclab::model::{build_model, ModelConfig, ModelParams, TokenSeq};
use ewclab::Result;
use proptest::prelude::*;

fn small() -> ModelParams {
    build_model(&ModelConfig {
        n_layers: 1,
        d_model: 8,
        d_ffn: 16,
        max_seq: 24,
        ..Default::default()
    })
    .unwrap()
}

fn op() -> impl Strategy<Value = ArithOp> {
    prop_oneof![Just(ArithOp::Add), Just(ArithOp::Sub)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_inverts_unflatten(seed in any::<u64>()) {
        let p = small();
        let v = ewclab::Tensor::randn(&[p.flat_len()], seed, 1.0).unwrap().into_data();
        let q = p.unflatten(&v).unwrap();
        prop_assert_eq!(q.flatten(), v);
    }

    #[test]
    fn ln_rmse_ignores_order_and_shift(
        pairs in prop::collection::vec((-100_000i64..100_000, -100_000i64..100_000), 1..40),
        shift in -1_000_000i64..1_000_000,
        rot in 0usize..40,
    ) {
        let (preds, truths): (Vec<i64>, Vec<i64>) = pairs.iter().copied().unzip();
        let base = ln_rmse(&preds, &truths).unwrap();
        let mut rotated = pairs.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        rotated.reverse();
        let (rp, rt): (Vec<i64>, Vec<i64>) = rotated.into_iter().unzip();
        prop_assert!((ln_rmse(&rp, &rt).unwrap() - base).abs() < 1e-12);
        let sp: Vec<i64> = preds.iter().map(|p| p + shift).collect();
        let st: Vec<i64> = truths.iter().map(|t| t + shift).collect();
        prop_assert!((ln_rmse(&sp, &st).unwrap() - base).abs() < 1e-12);
        prop_assert!(ln_rmse_with(&preds, &truths, LnRmseMode::RmseOfLogs).unwrap().is_finite());
    }

    #[test]
    fn rendering_is_injective(a in 0i64..100_000, b in 0i64..100_000, o1 in op(),
                              c in 0i64..100_000, d in 0i64..100_000, o2 in op()) {
        let x = tokenize(&format!("{a}{}{b}=", o1.symbol())).unwrap();
        let y = tokenize(&format!("{c}{}{d}=", o2.symbol())).unwrap();
        prop_assert_eq!(x == y, (a, o1, b) == (c, o2, d));
    }

    #[test]
    fn decode_inverts_render(a in 0i64..100_000, b in 0i64..100_000, o in op()) {
        let x = render_instance(a, o, b, 4).unwrap();
        prop_assert_eq!(decode_numeral(&x.seq.target_ids).unwrap(), o.apply(a, b));
    }

    #[test]
    fn container_round_trips_any_values(bits in prop::collection::vec(any::<u64>(), 1..64)) {
        let p = small();
        let mut flat = p.flatten();
        let n = flat.len();
        for (i, b) in bits.iter().enumerate() {
            flat[i * 7 % n] = f64::from_bits(*b);
        }
        let q = p.unflatten(&flat).unwrap();
        let bytes = Container::from_params(&q).encode().unwrap();
        let back = Container::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        let got: Vec<u64> = back.into_params().unwrap().flatten().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = flat.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn config_round_trips_any_floats(lr in 0.0f64..10.0, lambda in 0.0f64..1e12, seeds in prop::collection::vec(any::<u64>(), 1..4)) {
        let mut cfg = RunConfig::default();
        cfg.opt.lr = lr;
        cfg.ewc.lambda = Some(lambda);
        cfg.seeds = seeds;
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

struct Scaled<'a> {
    inner: MlmLikelihood<'a>,
    c: f64,
}

impl ScoreModel for Scaled<'_> {
    type Sample = TokenSeq;

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn score(&self, s: &TokenSeq) -> Result<Vec<f64>> {
        Ok(self.inner.score(s)?.into_iter().map(|g| self.c * g).collect())
    }
}

#[test]
fn fisher_scales_with_squared_likelihood_factor() {
    let p = small();
    let data: Vec<TokenSeq> = ewclab::datagen::gen_arith_dataset(20, &Default::default(), 3)
        .unwrap()
        .into_iter()
        .map(|x| x.seq)
        .collect();
    let base = estimate_diag_fisher_with(&MlmLikelihood { params: &p }, &data, 30, 1, "x").unwrap();
    let c = 3.0;
    let scaled = estimate_diag_fisher_with(
        &Scaled {
            inner: MlmLikelihood { params: &p },
            c,
        },
        &data,
        30,
        1,
        "x",
    )
    .unwrap();
    assert!(base.values.iter().all(|v| *v >= 0.0));
    for (a, b) in base.values.iter().zip(&scaled.values) {
        assert!((b - c * c * a).abs() <= 1e-12 * (1.0 + b.abs()), "{a} {b}");
    }
}

#[test]
fn fisher_estimate_settles_with_more_samples() {
    struct Bernoulli;
    impl ScoreModel for Bernoulli {
        type Sample = f64;
        fn num_params(&self) -> usize {
            1
        }
        fn score(&self, y: &f64) -> Result<Vec<f64>> {
            Ok(vec![y / 0.3 - (1.0 - y) / 0.7])
        }
    }
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let flips: Vec<f64> = (0..100_000).map(|_| f64::from(u8::from(rng.gen::<f64>() < 0.3))).collect();
    let n = 50_000;
    let f1 = estimate_diag_fisher_with(&Bernoulli, &flips, n, 1, "b").unwrap().values[0];
    let f2 = estimate_diag_fisher_with(&Bernoulli, &flips, 2 * n, 2, "b").unwrap().values[0];
    assert!((f1 - f2).abs() / f2 <= 0.05, "{f1} vs {f2}");
}
