use adaptgpt::checkpoint::Checkpoint;
use adaptgpt::config::RunConfig;
use adaptgpt::lora::{LoraConfig, LoraLinear};
use adaptgpt::model::{FfnKind, GptModel, ModelConfig, TokenBatch};
use adaptgpt::nn::{normal_tensor, Linear, Mode, Module, Rng};
use adaptgpt::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;

fn kind() -> impl Strategy<Value = FfnKind> {
    proptest::sample::select(FfnKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fresh_lora_is_the_base_layer(d in 2usize..24, k in 2usize..24, r in 1usize..8, seed in any::<u64>()) {
        prop_assume!(r < d.min(k));
        let mut rng = Rng::seed_from_u64(seed);
        let base = Linear::<f32>::new("w", k, d, true, &mut rng);
        let lora = LoraLinear::wrap(base.clone(), &LoraConfig { r, alpha: 2.0 * r as f64, dropout: 0.0 }, &mut rng).unwrap();
        let x: Tensor<f32> = normal_tensor(&mut rng, &[3, k], 1.0);
        prop_assert_eq!(lora.forward(&x, &mut Mode::Eval).unwrap().to_vec(), base.forward(&x).unwrap().to_vec());
        prop_assert_eq!(lora.trainable_param_count(), r * (d + k));
    }

    #[test]
    fn checkpoints_round_trip_any_values(kind in kind(), seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = Rng::seed_from_u64(seed);
        let model = GptModel::<f32>::new(ModelConfig::tiny(40, kind), &mut rng).unwrap();
        for p in model.parameters() {
            *p.tensor().data_mut() = normal_tensor::<f32>(&mut rng, p.shape(), scale).to_vec();
        }
        let ckpt = Checkpoint::capture(&model, vec![("seed".into(), seed.to_string())], seed);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.header.seed, seed);
    }

    #[test]
    fn config_text_round_trips(
        kind in kind(),
        lr in 1e-6f64..1.0,
        seed in any::<u64>(),
        d_model in proptest::sample::select(vec![16usize, 32, 64]),
        dropout in 0.0f64..0.9,
    ) {
        let pairs: Vec<(String, String)> = vec![
            ("ffn_kind".into(), kind.as_str().into()),
            ("learning_rate".into(), lr.to_string()),
            ("seed".into(), seed.to_string()),
            ("d_model".into(), d_model.to_string()),
            ("n_heads".into(), "4".into()),
            ("gat_heads".into(), "4".into()),
            ("lora_r".into(), "2".into()),
            ("dropout_p".into(), dropout.to_string()),
        ];
        let cfg = RunConfig::load(None, &pairs).unwrap();
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(again.to_pairs(), cfg.to_pairs());
    }

    #[test]
    fn future_tokens_never_reach_the_past(kind in kind(), seed in any::<u64>(), t in 0usize..12, bump in 1u32..39) {
        let mut rng = Rng::seed_from_u64(seed);
        let model = GptModel::<f32>::new(ModelConfig::tiny(40, kind), &mut rng).unwrap();
        for p in model.parameters() {
            *p.tensor().data_mut() = normal_tensor::<f32>(&mut rng, p.shape(), 0.1).to_vec();
        }
        let ids: Vec<u32> = (0..12).map(|i| (i * 7 + seed as u32 % 40) % 40).collect();
        let mut changed = ids.clone();
        changed[t] = (changed[t] + bump) % 40;
        let run = |ids: Vec<u32>| {
            model.lm_forward(&TokenBatch::from_sequences(&[ids], 0).unwrap(), &mut Mode::Eval).unwrap().to_vec()
        };
        let (a, b) = (run(ids), run(changed));
        prop_assert_eq!(&a[..t * 40], &b[..t * 40]);
    }
}
