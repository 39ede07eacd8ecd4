use dfr_core::encoder::{load_checkpoint_expecting, EncoderConfig, EncoderParams, TokenizerConfig};
use dfr_core::generator::{OracleGenConfig, OracleGenerator};
use dfr_core::pretrain::{pretrain_loop, InfoNceConfig};
use dfr_core::runtime::{evaluate, load_best, save_checkpoint_with_meta, train, EvalConfig, TrainConfig};
use dfr_core::synthetic::{generate, template_vocabulary, SyntheticConfig};

fn encoder() -> EncoderConfig {
    EncoderConfig {
        tokenizer: TokenizerConfig {
            hash_vocab_size: 2048,
            max_length: 64,
        },
        embed_dim: 16,
        hidden_dim: 32,
        output_dim: 16,
    }
}

fn oracle() -> OracleGenerator {
    let mut base_vocab = template_vocabulary();
    base_vocab.push("<eos>".into());
    OracleGenerator::new(OracleGenConfig {
        base_vocab,
        max_len: 8,
        ..OracleGenConfig::default()
    })
    .unwrap()
}

#[test]
fn pretrain_train_evaluate_round_trip() {
    let corpus = generate(&SyntheticConfig {
        entities: 30,
        dialogues: 90,
        ..SyntheticConfig::default()
    });
    let oracle = oracle();
    let init = EncoderParams::init(3, encoder()).unwrap();
    let cfg = InfoNceConfig {
        batch_size: 16,
        epochs: 5,
        lr: 1e-2,
        ..InfoNceConfig::default()
    };
    let (pre, report) = pretrain_loop(&corpus.train, &corpus.kb, &init, &cfg).unwrap();
    assert!(report.epoch_losses.last() < report.epoch_losses.first());

    let eval_cfg = EvalConfig {
        ks: vec![1, 3],
        retrieval_only: true,
        ..EvalConfig::default()
    };
    let recall = |p: &EncoderParams| {
        evaluate(&corpus.validation, &corpus.kb, p, &oracle, &eval_cfg)
            .unwrap()
            .report
            .recall(3)
            .unwrap()
    };
    assert!(recall(&pre) > recall(&init));

    let train_cfg = TrainConfig {
        k: 5,
        beam: 3,
        lr: 1e-3,
        start_step: 2,
        steps: 8,
        accumulation: 2,
        refresh_every: 4,
        validate_every: 4,
        ..TrainConfig::default()
    };
    let out = train(&corpus.train, &corpus.validation, &corpus.kb, &oracle, &pre, &train_cfg).unwrap();
    assert_eq!(out.history.iter().map(|h| h.step).collect::<Vec<_>>(), [2, 6, 8]);
    assert_eq!(out.stats.updates, 6);

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint_with_meta(&out.best, dir.path()).unwrap();
    let loaded = load_best(dir.path()).unwrap();
    assert_eq!(loaded.meta, out.best.meta);
    assert_eq!(loaded.params.tensors(), out.best.params.tensors());
    assert_eq!(recall(&loaded.params), recall(&out.best.params));
    assert!(load_checkpoint_expecting(dir.path().join("encoder.ckpt"), &EncoderConfig::default()).is_err());
}
