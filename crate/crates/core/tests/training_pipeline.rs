//! Training on a small planted corpus: determinism across execution modes,
//! loss bookkeeping and the distillation mode table.

use adrag_core::corpus::GuardCorpusConfig;
use adrag_core::experiment::{prepare_corpus, ExperimentConfig, PreparedCorpus};
use adrag_core::guard::{GuardCapacity, GuardParams};
use adrag_core::par::ExecMode;
use adrag_core::training::{
    raft_losses, raft_train, raft_train_observed, skd_train, supervised_contextual_finetune, Schedule, SkdConfig,
    TrainConfig,
};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        corpus: GuardCorpusConfig {
            families: 30,
            cue_vocab: 6,
            plants_per_query: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn corpus(mode: ExecMode) -> PreparedCorpus {
    prepare_corpus(&small(), 3, mode).unwrap()
}

fn train_cfg(lambda: f64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        lambda,
        ..Default::default()
    }
}

#[test]
fn features_and_training_are_identical_across_exec_modes() {
    let seq = corpus(ExecMode::Sequential);
    let par = corpus(ExecMode::Parallel);
    assert_eq!(seq.features, par.features);
    let init = GuardParams::init(GuardCapacity::student(), seq.layout, 1).unwrap();
    let (a, ra) = raft_train(init.clone(), &seq.features, &train_cfg(0.5), ExecMode::Sequential).unwrap();
    let (b, rb) = raft_train(init, &par.features, &train_cfg(0.5), ExecMode::Parallel).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ra.to_json(), rb.to_json());
}

#[test]
fn lambda_zero_is_supervised_finetuning() {
    let pc = corpus(ExecMode::default());
    let init = GuardParams::init(GuardCapacity::teacher(), pc.layout, 2).unwrap();
    let (sft, r1) = supervised_contextual_finetune(init.clone(), &pc.features, &train_cfg(0.0), ExecMode::default())
        .unwrap();
    let (raft, r2) = raft_train(init, &pc.features, &train_cfg(0.0), ExecMode::default()).unwrap();
    assert_eq!(sft.to_bytes(), raft.to_bytes());
    let hashes = |r: &adrag_core::training::TrainReport| r.epochs.iter().map(|e| e.teacher_hash.clone()).collect::<Vec<_>>();
    assert_eq!(hashes(&r1), hashes(&r2));
}

#[test]
fn reported_losses_recompute_from_epoch_params() {
    let pc = corpus(ExecMode::default());
    let init = GuardParams::init(GuardCapacity::student(), pc.layout, 5).unwrap();
    let lambda = 0.7;
    let mut seen = Vec::new();
    let mut obs = |row: &adrag_core::training::EpochRow, p: &GuardParams| {
        let l = raft_losses(p, &pc.features, lambda, ExecMode::Sequential).unwrap();
        seen.push((row.clone(), l));
    };
    raft_train_observed(init, &pc.features, &train_cfg(lambda), ExecMode::default(), Some(&mut obs)).unwrap();
    assert_eq!(seen.len(), 3);
    for (row, l) in seen {
        assert!((row.l_train - l.l_train).abs() <= 1e-9);
        assert!((row.l_adv - l.l_adv).abs() <= 1e-9);
        assert!((row.l_total - (row.l_train + lambda * row.l_adv)).abs() <= 1e-9);
    }
}

#[test]
fn distillation_mode_table() {
    let pc = corpus(ExecMode::default());
    let teacher = GuardParams::init(GuardCapacity::teacher(), pc.layout, 1).unwrap();
    let student = GuardParams::init(GuardCapacity::student(), pc.layout, 2).unwrap();
    let cfg = SkdConfig {
        train: train_cfg(0.5),
        ..Default::default()
    };
    let run = |modes: Vec<u8>| {
        skd_train(
            teacher.clone(),
            student.clone(),
            &pc.features,
            &Schedule::new(modes).unwrap(),
            &cfg,
            ExecMode::default(),
        )
        .unwrap()
    };
    let only_teacher = run(vec![0, 0]);
    assert_eq!(only_teacher.student.fingerprint(), student.fingerprint());
    assert_ne!(only_teacher.teacher.fingerprint(), teacher.fingerprint());

    let only_student = run(vec![1, 1]);
    assert_eq!(only_student.teacher.fingerprint(), teacher.fingerprint());
    assert_ne!(only_student.student.fingerprint(), student.fingerprint());

    let canonical = skd_train(
        teacher.clone(),
        student.clone(),
        &pc.features,
        &Schedule::canonical(6).unwrap(),
        &cfg,
        ExecMode::default(),
    )
    .unwrap();
    canonical.report.audit_modes().unwrap();
    let modes: Vec<u8> = canonical.report.epochs.iter().map(|e| e.mode.unwrap()).collect();
    assert_eq!(modes, vec![0, 0, 2, 2, 1, 1]);
    for w in canonical.report.epochs.windows(2) {
        match w[1].mode {
            Some(0) => assert_eq!(w[0].student_hash, w[1].student_hash),
            Some(1) => assert_eq!(w[0].teacher_hash, w[1].teacher_hash),
            _ => {
                assert_ne!(w[0].student_hash, w[1].student_hash);
                assert_ne!(w[0].teacher_hash, w[1].teacher_hash);
            }
        }
    }
}
