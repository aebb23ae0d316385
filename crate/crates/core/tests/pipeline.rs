use std::fs;
use std::path::Path;

use mjkd_da::pipeline::{
    files, load_split, run_all, run_seed, stage_adapt, stage_evaluate, stage_generate, stage_pretrain, stage_select,
    stage_theory_check, sweep_proportion, ExitStatus, PipelineConfig, PipelineError, SeedResult,
};
use mjkd_da::{AdaptationModel, SelectionReport};

fn small_config(out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig { output: out.to_path_buf(), seeds: vec![1, 2, 3], ..PipelineConfig::default() };
    c.shift.samples_per_class_source = 30;
    c.shift.samples_per_class_target = 30;
    c.network.hidden = vec![16, 16];
    c.network.bottleneck = 8;
    c.network.disc_hidden = 8;
    c.pretrain.iterations = 150;
    c.pretrain.log_every = 50;
    c.adapt.iterations = 150;
    c.adapt.log_every = 50;
    c
}

#[test]
fn run_all_fans_out_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(&dir.path().join("runs"));
    let summary = run_all(&config, false).unwrap();
    assert_eq!(summary.status(), ExitStatus::Success);
    assert_eq!(summary.results.len(), 3);
    let mut seed_dirs: Vec<String> = fs::read_dir(&config.output)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("seed-"))
        .collect();
    seed_dirs.sort();
    assert_eq!(seed_dirs, ["seed-1", "seed-2", "seed-3"]);

    let per_seed: Vec<f64> = config
        .seeds
        .iter()
        .map(|&s| {
            let text = fs::read_to_string(config.seed_dir(s).join(files::RESULT)).unwrap();
            SeedResult::parse(&text).unwrap().target_acc
        })
        .collect();
    let mean = per_seed.iter().sum::<f64>() / 3.0;
    let summary_text = fs::read_to_string(config.output.join("summary.txt")).unwrap();
    let reported: f64 = summary_text
        .lines()
        .find_map(|l| l.strip_prefix("mean_target_acc="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((reported - mean).abs() <= 1e-12);

    for s in &config.seeds {
        let d = config.seed_dir(*s);
        for name in [files::SOURCE, files::TARGET, files::PRETRAINED, files::ADAPTED, files::EMBEDDING, files::CONFIG] {
            assert!(d.join(name).exists(), "{name}");
        }
        let table = fs::read_to_string(d.join(files::selection(1))).unwrap();
        let report = SelectionReport::from_table(&table).unwrap();
        assert_eq!(report.k, (0.25f64 * 120.0 / 4.0).floor() as usize);
        let echoed = PipelineConfig::load(&d.join(files::CONFIG)).unwrap();
        assert_eq!(echoed, config);
    }

    match run_all(&config, false) {
        Err(e @ PipelineError::Exists(_)) => assert!(e.is_config()),
        other => panic!("expected refusal, got {other:?}"),
    }
    assert!(run_all(&config, true).is_ok());
}

#[test]
fn stages_match_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = small_config(&dir.path().join("full"));
    let staged = small_config(&dir.path().join("staged"));
    let whole = run_seed(&full, 2, &full.seed_dir(2)).unwrap();

    let d = staged.seed_dir(2);
    stage_generate(&staged, 2, &d).unwrap();
    stage_pretrain(&staged, 2, &d).unwrap();
    stage_select(&staged, &d, 1, staged.selection.proportion).unwrap();
    stage_adapt(&staged, 2, &d, 1).unwrap();
    let parts = stage_evaluate(&staged, 2, &d).unwrap();

    assert_eq!(parts.to_text(), whole.to_text());
    for name in [files::ADAPTED, files::DISCRIMINATOR, files::ADAPT_LOG, files::EMBEDDING] {
        assert_eq!(fs::read(d.join(name)).unwrap(), fs::read(full.seed_dir(2).join(name)).unwrap(), "{name}");
    }
}

#[test]
fn extra_rounds_promote_disjoint_targets() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(&dir.path().join("rounds"));
    config.selection.rounds = 2;
    let d = config.seed_dir(4);
    let result = run_seed(&config, 4, &d).unwrap();
    let data = mjkd_da::pipeline::RunData::load(&d).unwrap();
    let split = load_split(&data, &d, 2).unwrap();
    assert_eq!(split.promoted().len(), result.promoted);
    let first = SelectionReport::from_table(&fs::read_to_string(d.join(files::selection(1))).unwrap()).unwrap();
    let second = SelectionReport::from_table(&fs::read_to_string(d.join(files::selection(2))).unwrap()).unwrap();
    assert_eq!(second.target_count, 120 - first.promoted.len());
    assert!(second.promoted.iter().all(|p| first.promoted.iter().all(|q| q.index != p.index)));
    assert!(d.join(files::adapt_log(2)).exists());
}

#[test]
fn theory_check_reports_finite_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(&dir.path().join("theory"));
    config.shift.rotation_deg = 0.0;
    let d = config.seed_dir(1);
    run_seed(&config, 1, &d).unwrap();
    let report = stage_theory_check(&config, 1, &d).unwrap();
    assert!(report.is_finite());
    assert!(report.identity_residual() < 1e-12);
    assert!(report.value_gap() >= -1e-12);
    assert!(fs::read_to_string(d.join(files::THEORY)).unwrap().contains("max_deviation="));
}

#[test]
fn divergence_fails_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(&dir.path().join("diverge"));
    config.seeds = vec![1, 2];
    config.pretrain.base_lr = 1e6;
    let summary = run_all(&config, false).unwrap();
    assert_eq!(summary.failures.len(), 2);
    assert_eq!(summary.status(), ExitStatus::TrainingFailure);
    let text = fs::read_to_string(config.output.join("summary.txt")).unwrap();
    assert!(text.contains("failed_seeds=2"));
}

#[test]
fn sweep_rows_follow_the_input_list() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(&dir.path().join("sweep"));
    config.seeds = vec![1];
    let proportions = [0.5, 1.0 / 3.0, 0.05];
    let rows = sweep_proportion(&config, &proportions, false).unwrap();
    assert_eq!(rows.iter().map(|r| r.proportion).collect::<Vec<_>>(), proportions);
    let table = fs::read_to_string(config.output.join("sweep.txt")).unwrap();
    let first_col: Vec<f64> = table.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(first_col, proportions);
    let pretrained = AdaptationModel::load(&config.output.join("proportion-0/seed-1").join(files::PRETRAINED)).unwrap();
    let other = AdaptationModel::load(&config.output.join("proportion-2/seed-1").join(files::PRETRAINED)).unwrap();
    assert_eq!(pretrained.params(), other.params());
}
