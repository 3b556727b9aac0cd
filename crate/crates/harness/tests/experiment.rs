use vctree_harness::config::{ExperimentConfig, Mode, Task};
use vctree_harness::experiment::run_experiment;

fn small(task: Task, mode: Mode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json_str(
        r#"{"data": {"generator": {"train_scenes": 8, "test_scenes": 3, "min_objects": 4, "max_objects": 6}},
            "pretrain": {"epochs": 1},
            "schedule": {"rounds": 1, "sl_epochs": 1, "sl_epochs_after": 1, "rl_epochs": 1}}"#,
    )
    .unwrap();
    cfg.task = task;
    cfg.mode = mode;
    cfg
}

#[test]
fn same_seed_same_report() {
    for task in [Task::Sgg, Task::Vqa] {
        let cfg = small(task, Mode::Hl);
        let a = run_experiment(&cfg).unwrap().report.to_json().unwrap();
        let b = run_experiment(&cfg).unwrap().report.to_json().unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.reseed(1);
        assert_ne!(run_experiment(&other).unwrap().report.to_json().unwrap(), a);
    }
}

#[test]
fn modes_produce_their_phase_layout() {
    let hl = run_experiment(&small(Task::Sgg, Mode::Hl)).unwrap();
    let rewards: Vec<bool> = hl.report.phases.iter().map(|p| p.mean_reward.is_some()).collect();
    assert_eq!(rewards, [false, true, false]);
    let sl = run_experiment(&small(Task::Sgg, Mode::Sl)).unwrap();
    assert_eq!(sl.report.phases.len(), 1);
    assert_eq!(sl.report.phases[0].steps, hl.report.phases[0].steps + hl.report.phases[2].steps);
}

#[test]
fn every_protocol_and_k_is_reported() {
    let out = run_experiment(&small(Task::Sgg, Mode::Sl)).unwrap();
    let sgg = out.report.sgg.as_ref().unwrap();
    assert_eq!(sgg.len(), 3);
    for m in sgg.values() {
        for k in [20, 50, 100] {
            let r = m.recall[&format!("R@{k}")];
            assert!((0.0..=1.0).contains(&r));
            assert!(m.mean_recall.contains_key(&format!("mR@{k}")));
        }
    }
    let vqa = run_experiment(&small(Task::Vqa, Mode::Sl)).unwrap().report.vqa.unwrap();
    assert!((0.0..=1.0).contains(&vqa.accuracy));
}
