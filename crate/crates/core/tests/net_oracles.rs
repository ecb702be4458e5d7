use cpca_core::data::ToyDgParams;
use cpca_core::net::*;

fn small_split(seed: u64) -> ToySplit {
    let params = ToyDgParams {
        n_per_domain: 200,
        ..Default::default()
    };
    toy_split(&params, seed, 50).unwrap()
}

fn short_config(seed: u64, steps: usize) -> TrainerConfig {
    TrainerConfig {
        seed,
        steps,
        eval_interval: 50,
        ..TrainerConfig::toy_benchmark()
    }
}

#[test]
fn erm_trajectory_is_reproduced_bitwise_without_regularizer_and_modulation() {
    let split = small_split(3);
    let config = TrainerConfig {
        lambda_cpca: 0.0,
        freeze_modulation: true,
        ..short_config(3, 150)
    };
    let erm = train(Pipeline::Erm, &split.train, Some(&split.heldout), &config).unwrap();
    let cpca = train(Pipeline::CpcaNet, &split.train, Some(&split.heldout), &config).unwrap();

    let bits = |log: &MetricsLog| -> Vec<u64> { log.rows.iter().map(|r| r.task_loss.to_bits()).collect() };
    assert_eq!(bits(&erm.log), bits(&cpca.log));
    let acc = |log: &MetricsLog| -> Vec<Option<u64>> {
        log.rows.iter().map(|r| r.heldout_acc.map(f64::to_bits)).collect()
    };
    assert_eq!(acc(&erm.log), acc(&cpca.log));
    assert_eq!(erm.model.backbone(), cpca.model.backbone());
    match &cpca.model {
        TrainedModel::CpcaNet { params, .. } => assert!(params.modulation_is_zero()),
        TrainedModel::Erm(_) => unreachable!(),
    }
    assert_eq!(
        erm.model.logits(&split.heldout.x).unwrap(),
        cpca.model.logits(&split.heldout.x).unwrap()
    );
}

#[test]
fn regularizer_changes_the_trajectory() {
    // control for the test above: the reduction is not vacuous
    let split = small_split(3);
    let config = TrainerConfig {
        lambda_cpca: 1.0,
        freeze_modulation: true,
        ..short_config(3, 20)
    };
    let erm = train(Pipeline::Erm, &split.train, None, &config).unwrap();
    let cpca = train(Pipeline::CpcaNet, &split.train, None, &config).unwrap();
    assert_ne!(erm.model.backbone(), cpca.model.backbone());
}

#[test]
fn training_is_deterministic_per_seed() {
    let split = small_split(4);
    let a = train(Pipeline::CpcaNet, &split.train, Some(&split.heldout), &short_config(9, 60)).unwrap();
    let b = train(Pipeline::CpcaNet, &split.train, Some(&split.heldout), &short_config(9, 60)).unwrap();
    let c = train(Pipeline::CpcaNet, &split.train, Some(&split.heldout), &short_config(10, 60)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    assert_ne!(a.log, c.log);
}

#[test]
fn per_step_invariants_hold_along_a_run() {
    let split = small_split(5);
    let config = short_config(5, 300);
    let out = train(Pipeline::CpcaNet, &split.train, Some(&split.heldout), &config).unwrap();
    assert_eq!(out.log.rows.len(), 300);
    for r in &out.log.rows {
        assert_eq!(r.etas.len(), config.stages);
        assert!(r.etas.iter().all(|&e| e > 0.0 && e < 0.5), "step {}: {:?}", r.step, r.etas);
        let cpca = r.cpca_loss.unwrap();
        assert!(cpca >= 0.0);
        let residual = r.total_loss - r.task_loss - config.lambda_cpca * cpca;
        assert!(residual.abs() <= 1e-12, "step {}: residual {residual:e}", r.step);
        assert!(r.basis_orthogonality.unwrap() < 1e-10, "step {}", r.step);
    }
    let evals: Vec<usize> = out.log.rows.iter().filter(|r| r.heldout_acc.is_some()).map(|r| r.step).collect();
    assert_eq!(evals, vec![49, 99, 149, 199, 249, 299]);
}

#[test]
fn metrics_csv_layout() {
    let split = small_split(6);
    let config = short_config(6, 5);
    for pipeline in [Pipeline::CpcaNet, Pipeline::Erm] {
        let out = train(pipeline, &split.train, Some(&split.heldout), &config).unwrap();
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,L_task,L_CPCA,eta_mean,heldout_acc");
        assert_eq!(lines.len(), 6);
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[1].parse::<f64>().unwrap(), out.log.rows[0].task_loss);
        assert!(first[4].is_empty());
        let last: Vec<&str> = lines[5].split(',').collect();
        assert!(!last[4].is_empty());
        match pipeline {
            Pipeline::CpcaNet => assert!(!first[2].is_empty() && !first[3].is_empty()),
            Pipeline::Erm => assert!(first[2].is_empty() && first[3].is_empty()),
        }
    }
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let split = small_split(7);
    let config = short_config(7, 30);
    let dir = tempfile::tempdir().unwrap();
    for (pipeline, stem) in [(Pipeline::CpcaNet, "cpca"), (Pipeline::Erm, "erm")] {
        let out = train(pipeline, &split.train, None, &config).unwrap();
        let manifest = save_checkpoint(&out.model, &config.architecture(), dir.path(), stem).unwrap();
        assert!(dir.path().join(format!("{stem}.bin")).exists());
        let (model, arch) = load_checkpoint(&manifest).unwrap();
        assert_eq!(arch, config.architecture());
        assert_eq!(model, out.model);
        assert_eq!(model.logits(&split.heldout.x).unwrap(), out.model.logits(&split.heldout.x).unwrap());
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let split = small_split(8);
    let config = short_config(8, 2);
    let out = train(Pipeline::CpcaNet, &split.train, None, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_checkpoint(&out.model, &config.architecture(), dir.path(), "m").unwrap();
    let bin = dir.path().join("m.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(&manifest).is_err());
}

#[test]
fn trainer_config_reads_kebab_case_json() {
    let json = r#"{"p": 12, "D": 16, "d": 4, "T": 2, "K": 2, "C": 3,
        "batch-per-domain": 8, "steps": 10, "lr-backbone": 0.001, "lr-cpcanet": 0.01,
        "lambda-cpca": 0.5, "smoothing": 0.0, "dropout": 0.25, "seed": 42, "eval-interval": 5}"#;
    let cfg: TrainerConfig = serde_json::from_str(json).unwrap();
    assert_eq!((cfg.p, cfg.feature_dim, cfg.proj_dim, cfg.stages, cfg.domains, cfg.classes), (12, 16, 4, 2, 2, 3));
    assert_eq!(cfg.batch_per_domain, 8);
    assert_eq!(cfg.lambda_cpca, 0.5);
    assert_eq!(cfg.seed, 42);
    assert!(!cfg.freeze_modulation);
    cfg.validate().unwrap();

    let partial: TrainerConfig = serde_json::from_str(r#"{"steps": 7}"#).unwrap();
    assert_eq!(partial, TrainerConfig { steps: 7, ..TrainerConfig::default() });
    assert!(serde_json::from_str::<TrainerConfig>(r#"{"lr": 0.1}"#).is_err());
}

#[test]
fn defaults_follow_the_reference_hyperparameters() {
    let cfg = TrainerConfig::default();
    assert_eq!(cfg.stages, 3);
    assert_eq!(cfg.lambda_cpca, 5e-3);
    assert_eq!(cfg.dropout, 0.5);
    assert_eq!(cfg.smoothing, 0.1);
    assert_eq!(cfg.batch_per_domain, 32);
    assert_eq!(cfg.lr_cpcanet / cfg.lr_backbone, 10.0);
    let toy = TrainerConfig::toy_benchmark();
    assert_eq!(toy.lr_cpcanet / toy.lr_backbone, 10.0);
}

#[test]
fn naive_subspace_classifier_learns_on_invariant_coordinates() {
    let split = small_split(9);
    let out = train(Pipeline::CpcaNet, &split.train, None, &short_config(9, 200)).unwrap();
    let TrainedModel::CpcaNet { params, basis } = &out.model else {
        unreachable!()
    };
    let report = naive_subspace_classifier(params, basis, &split.train, &split.heldout, 300, 0.05).unwrap();
    assert!((0.0..=1.0).contains(&report.heldout_acc));
    assert!(report.train_acc > 0.5, "train accuracy {}", report.train_acc);
}
