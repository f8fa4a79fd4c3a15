use voxelbridge::bridge::conversation::ConversationRecord;
use voxelbridge::bridge::{
    train_bridge, BridgeConfig, BridgeSample, BridgeSchedule, BridgeState, LanguageModelHandle, LmConfig,
    TaskKind, TinyLm, Tokenizer,
};
use voxelbridge::tensor::Tensor;

fn config() -> BridgeConfig {
    let tokenizer = Tokenizer::Bytes;
    BridgeConfig {
        encoder_hidden: 8,
        lm: LmConfig {
            vocab_size: tokenizer.vocab_size(),
            width: 16,
            layers: 1,
            heads: 2,
            mlp_ratio: 2.0,
            context: 128,
            positional: true,
        },
        tokenizer,
        class_only: false,
    }
}

fn states(seed: f64) -> Tensor {
    Tensor::from_vec(4, 8, (0..32).map(|i| (i as f64 * 0.31 + seed).sin()).collect())
}

fn record() -> ConversationRecord {
    ConversationRecord::single("s0", TaskKind::Brief, "What is shown?", "a zebra")
}

#[test]
fn uniform_lm_loss_is_log_vocab() {
    let c = config();
    let lm = TinyLm::uniform(c.lm.clone()).unwrap();
    let b = BridgeState::init(c.clone(), LanguageModelHandle::TinyStandin(lm), 1).unwrap();
    let loss = b.bridge_loss(&record(), &states(0.0)).unwrap();
    assert!((loss - (c.lm.vocab_size as f64).ln()).abs() < 1e-3, "{loss}");
}

#[test]
fn only_answer_positions_carry_gradient() {
    let b = BridgeState::standin(config(), 2).unwrap();
    let (grad, targets) = b.logit_gradient(&record(), &states(0.5)).unwrap();
    let answer_len = "a zebra".len() + 1; // answer bytes and end of turn
    assert_eq!(targets.iter().filter(|t| t.is_some()).count(), answer_len);
    for (row, t) in targets.iter().enumerate() {
        let norm: f64 = grad.row(row).iter().map(|v| v.abs()).sum();
        if t.is_some() {
            assert!(norm > 0.0);
        } else {
            assert_eq!(norm, 0.0, "row {row}");
        }
    }
}

#[test]
fn stage_one_leaves_the_language_model_untouched() {
    let mut b = BridgeState::standin(config(), 3).unwrap();
    let before = b.lm_params().unwrap().bits();
    let ft_before = b.f_t().bits();
    let samples: Vec<BridgeSample> = (0..4)
        .map(|i| BridgeSample {
            penultimate: states(i as f64),
            record: record(),
        })
        .collect();
    let sched = BridgeSchedule {
        stage: 1,
        lr: 1e-3,
        epochs: 2,
        batch: 2,
        seed: 0,
    };
    train_bridge(&mut b, &samples, &sched).unwrap();
    assert_eq!(b.lm_params().unwrap().bits(), before);
    assert_ne!(b.f_t().bits(), ft_before);
}

#[test]
fn external_language_model_is_a_capability_error() {
    let mut b = BridgeState::init(
        config(),
        LanguageModelHandle::External {
            adapter_id: "llama".into(),
        },
        0,
    )
    .unwrap();
    let s = BridgeSample {
        penultimate: states(0.0),
        record: record(),
    };
    let e = train_bridge(&mut b, &[s], &BridgeSchedule::full(1, 0)).unwrap_err();
    assert_eq!(e.category(), "capability");
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let b = BridgeState::standin(config(), 4).unwrap();
    b.save(dir.path().join("b"), serde_json::json!({})).unwrap();
    let back = BridgeState::load(dir.path().join("b")).unwrap();
    assert_eq!(back.f_t().bits(), b.f_t().bits());
    assert_eq!(back.lm_params().unwrap().bits(), b.lm_params().unwrap().bits());
}
