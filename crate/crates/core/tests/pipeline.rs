use std::collections::HashSet;

use proptest::prelude::*;
use smlab_core::experiment::{
    build_questions, evaluate, run_trial, type_counts, CheckpointSchedule, ConstantResponder, NoStore, QType,
    TrainConfig,
};
use smlab_core::model::{init_model, ModelConfig};
use smlab_core::numkernel::Rng;
use smlab_core::scenario::{mask_chunk, Particle, Scenario, ScenarioConfig, SEQ_LEN};

fn scenario() -> Scenario {
    Scenario::new(ScenarioConfig::default()).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        n_layers: 1,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_are_disjoint_and_drawn_from_the_universe(seed in any::<u64>()) {
        let sc = scenario();
        let split = sc.sample_split(seed).unwrap();
        prop_assert_eq!((split.sample.len(), split.train.len(), split.test.len()), (470, 440, 30));
        let universe: HashSet<_> = sc.universe().iter().collect();
        let sample: HashSet<_> = split.sample.iter().collect();
        prop_assert_eq!(sample.len(), 470);
        prop_assert!(sample.iter().all(|c| universe.contains(c)));
        let train: HashSet<_> = split.train.iter().collect();
        prop_assert!(split.test.iter().all(|c| !train.contains(c) && c.has_two_utterances()));
    }

    #[test]
    fn masking_never_touches_padding(seed in any::<u64>(), index in 0usize..1998) {
        let sc = scenario();
        let encoded = sc.encode_chunk(&sc.universe()[index]);
        let ex = mask_chunk(&encoded, sc.vocab(), &mut Rng::new(seed));
        prop_assert!(!ex.mask_positions.is_empty());
        prop_assert!(ex.mask_positions.windows(2).all(|w| w[0] < w[1]));
        for (&p, &t) in ex.mask_positions.iter().zip(&ex.target_ids) {
            prop_assert_eq!(t, encoded.token_ids[p]);
            prop_assert_ne!(t, sc.vocab().pad_id());
            prop_assert_ne!(ex.token_ids[p], sc.vocab().pad_id());
        }
        for p in (0..SEQ_LEN).filter(|p| !ex.mask_positions.contains(p)) {
            prop_assert_eq!(ex.token_ids[p], encoded.token_ids[p]);
        }
    }

    #[test]
    fn questions_are_well_formed(seed in any::<u64>()) {
        let sc = scenario();
        let split = sc.sample_split(seed).unwrap();
        let questions = build_questions(&sc, &split.test).unwrap();
        prop_assert_eq!(questions.len(), 60);
        for q in &questions {
            prop_assert!(!q.correct.is_empty());
            prop_assert_eq!(q.correct.qtype(), Some(q.qtype));
            prop_assert_eq!(q.input.mask_positions.clone(), vec![q.position]);
            prop_assert_eq!(q.input.token_ids[q.position], sc.vocab().mask_id());
            let particle = q.chunk.utterance(q.slot).particle().unwrap();
            prop_assert_eq!(q.input.target_ids[0], sc.vocab().id(particle.token()).unwrap());
            // The particle in the data is always acceptable.
            let accepted = match particle {
                Particle::Yo => q.correct.yo,
                Particle::Ne => q.correct.ne,
            };
            prop_assert!(accepted);
        }
    }

    #[test]
    fn predictions_rank_the_whole_vocabulary(seed in any::<u64>(), index in 0usize..1998) {
        let sc = scenario();
        let model = init_model(&ModelConfig { seed, ..tiny_model() }).unwrap();
        let ex = mask_chunk(&sc.encode_chunk(&sc.universe()[index]), sc.vocab(), &mut Rng::new(seed));
        for pred in model.predict_masked(&ex).unwrap() {
            prop_assert_eq!(pred.ranked.len(), sc.vocab().len());
            prop_assert!(pred.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
            let ids: HashSet<_> = pred.ranked.iter().map(|r| r.0).collect();
            prop_assert_eq!(ids.len(), sc.vocab().len());
        }
        let (_, maps) = model.encode(&ex.token_ids, &ex.slot_ids).unwrap();
        for q in 0..SEQ_LEN {
            let sum: f64 = maps.row(0, 1, q).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn constant_ne_answers_every_type_two_and_three_question() {
    let sc = scenario();
    let ne = sc.vocab().id("ne").unwrap();
    for seed in 0..3 {
        let questions = build_questions(&sc, &sc.sample_split(seed).unwrap().test).unwrap();
        let acc = evaluate(&ConstantResponder(ne), &sc, &questions).unwrap().accuracy();
        let counts = type_counts(&questions);
        assert_eq!(acc[QType::I.index()], (counts[0] > 0).then_some(0.0));
        assert_eq!(acc[QType::II.index()], Some(1.0));
        assert_eq!(acc[QType::III.index()], Some(1.0));
    }
}

#[test]
fn short_trial_reports_every_scheduled_epoch() {
    let sc = scenario();
    let train = TrainConfig {
        schedule: CheckpointSchedule::new(vec![1, 2]).unwrap(),
        early_exit: false,
        ..TrainConfig::default()
    };
    let result = run_trial(&sc, &tiny_model(), &train, 5, &NoStore).unwrap();
    let questions = build_questions(&sc, &sc.sample_split(5).unwrap().test).unwrap();
    assert_eq!(result.question_counts, type_counts(&questions));
    assert_eq!(result.trained_epochs, 2);
    let epochs: Vec<_> = result.checkpoints.iter().map(|c| c.epoch).collect();
    assert_eq!(epochs, [1, 2]);
    for c in &result.checkpoints {
        assert!(!c.carried);
        assert_eq!(c.total, result.question_counts);
        assert!(c.train_loss.is_finite());
    }
    assert!(result.checkpoints[1].train_loss < result.checkpoints[0].train_loss);
}
