use vulnforge_core::augment::GatePolicy;
use vulnforge_core::{AugmentedInstance, DatasetManifest, Stage};
use vulnforge_seq2seq::train::pairs_from_manifest;
use vulnforge_seq2seq::{generate, train, DecodeConfig, ModelConfig, TargetField, TrainConfig, TrainError};
use vulnforge_tokenize::bpe::train_bpe;

fn instance(i: usize, label: Option<&str>) -> AugmentedInstance {
    AugmentedInstance {
        cve_id: format!("CVE-2020-{:04}", 1000 + i),
        description: format!("buffer overflow in parser {i} allows remote code execution."),
        augmented_text: format!(
            "the parser {i} copies input into a fixed buffer. a crafted file overflows it and runs code."
        ),
        sources: Vec::new(),
        label: label.map(str::to_string),
        grades: Vec::new(),
        generated: None,
    }
}

fn manifest(instances: Vec<AugmentedInstance>) -> DatasetManifest {
    DatasetManifest::new(
        "toy",
        GatePolicy::single_use(),
        Stage::Refined,
        "2024-01-01T00:00:00Z".parse().unwrap(),
        instances,
    )
    .unwrap()
}

fn setup() -> (DatasetManifest, vulnforge_tokenize::SubwordVocab, ModelConfig) {
    let m = manifest(
        (0..12)
            .map(|i| instance(i, (i % 4 == 0).then_some("parser overflow.")))
            .collect(),
    );
    let corpus: Vec<String> = m
        .instances
        .iter()
        .flat_map(|i| [i.description.clone(), i.augmented_text.clone()])
        .collect();
    let vocab = train_bpe(&corpus, 80).unwrap();
    let mut cfg = ModelConfig::new(vocab.id_count());
    cfg.d_model = 16;
    cfg.heads = 2;
    cfg.ffn_dim = 32;
    cfg.max_src_len = 24;
    cfg.max_tgt_len = 12;
    (m, vocab, cfg)
}

#[test]
fn pairs_follow_the_target_field_and_length_limits() {
    let (m, vocab, cfg) = setup();
    let desc = pairs_from_manifest(&m, TargetField::Description, &vocab, &cfg).unwrap();
    assert_eq!(desc.len(), 12);
    assert!(desc.iter().all(|p| p.src.len() <= 24 && p.tgt.len() <= 11));
    let labels = pairs_from_manifest(&m, TargetField::Label, &vocab, &cfg).unwrap();
    assert_eq!(labels.len(), 3);
    assert_eq!(labels[0].tgt, vocab.encode_ids("parser overflow."));
}

#[test]
fn training_from_a_manifest_and_generating() {
    let (m, vocab, cfg) = setup();
    let tcfg = TrainConfig {
        lr: 1e-3,
        epochs: 2,
        ..TrainConfig::default()
    };
    let (params, report) = train(&m, TargetField::Description, &vocab, &tcfg, &cfg).unwrap();
    assert_eq!(report.curves.len(), 2);
    let mut all: Vec<&String> = report
        .train_ids
        .iter()
        .chain(&report.val_ids)
        .chain(&report.test_ids)
        .collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 12);
    let dcfg = DecodeConfig {
        max_len: Some(6),
        ..DecodeConfig::default()
    };
    let text = generate(&m.instances[0].augmented_text, &params, &vocab, &dcfg).unwrap();
    assert!(!text.contains('\u{fffd}'));
}

#[test]
fn missing_targets_are_errors() {
    let (_, vocab, cfg) = setup();
    let unlabeled = manifest(vec![instance(1, None), instance(2, None)]);
    let tcfg = TrainConfig::default();
    assert!(matches!(
        train(&unlabeled, TargetField::Label, &vocab, &tcfg, &cfg),
        Err(TrainError::NoLabels)
    ));
    assert!(matches!(
        train(&manifest(Vec::new()), TargetField::Description, &vocab, &tcfg, &cfg),
        Err(TrainError::EmptyDataset)
    ));
    let mut wrong = cfg.clone();
    wrong.vocab_size += 1;
    assert!(matches!(
        pairs_from_manifest(&unlabeled, TargetField::Description, &vocab, &wrong),
        Err(TrainError::Config(_))
    ));
}
