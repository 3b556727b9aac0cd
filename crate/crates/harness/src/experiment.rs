//! End-to-end experiment driver: data, pretraining, the schedule, evaluation
//! and artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use vctree::learn::{greedy_layouts, hybrid_schedule, PhaseRecord, SggTask, TrainLog};
use vctree::ndcore::{checkpoint, ParamStore, Tape};
use vctree::scoring::CorrelationSample;
use vctree::sgg::{
    corpus_recall_at_k, mean_recall_at_k, PairSampling, Protocol, SceneGraphPrediction, SggConfig, SggModel,
    SggSample,
};
use vctree::treebuild::{Layout, TreeJson};
use vctree::vqa::{answer_accuracy, VqaConfig, VqaModel, VqaSample};

use crate::config::{ExperimentConfig, Mode, Task};
use crate::dataset::Dataset;
use crate::synth::{generate_scenes, generate_vqa};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    /// `"R@K" -> value`.
    pub recall: BTreeMap<String, f64>,
    /// `"mR@K" -> value`.
    pub mean_recall: BTreeMap<String, f64>,
    /// Per-predicate recall at the largest K; `null` for absent predicates.
    pub per_predicate: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaMetrics {
    pub accuracy: f64,
    pub per_template: BTreeMap<String, f64>,
    pub balanced_pairs: usize,
    /// Fraction of balanced pairs with both questions answered correctly.
    pub balanced_pair_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: Task,
    pub structure: String,
    pub mode: Mode,
    pub seed: u64,
    pub pretrain_loss: Vec<f64>,
    pub phases: Vec<PhaseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgg: Option<BTreeMap<String, ProtocolMetrics>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vqa: Option<VqaMetrics>,
}

impl Report {
    /// Pretty JSON with sorted keys.
    pub fn to_json(&self) -> anyhow::Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn recall(&self, protocol: Protocol, k: usize) -> Option<f64> {
        self.sgg.as_ref()?.get(protocol.name())?.recall.get(&format!("R@{k}")).copied()
    }
}

pub struct Outcome {
    pub report: Report,
    pub log: TrainLog,
}

pub fn load_data(cfg: &ExperimentConfig) -> anyhow::Result<(Dataset, Dataset)> {
    match (&cfg.data.generator, &cfg.data.train, &cfg.data.test) {
        (Some(spec), _, _) => match cfg.task {
            Task::Sgg => generate_scenes(spec),
            Task::Vqa => generate_vqa(spec),
        },
        (None, Some(train), Some(test)) => Ok((Dataset::load(train)?, Dataset::load(test)?)),
        _ => anyhow::bail!("data needs either `generator` or both `train` and `test` paths"),
    }
}

pub fn sgg_task(cfg: &ExperimentConfig, data: &Dataset, store: &mut ParamStore) -> anyhow::Result<SggTask> {
    let m = &cfg.model;
    let model = SggModel::new(
        store,
        SggConfig {
            visual_dim: data.meta.visual_dim,
            num_classes: data.num_classes(),
            num_predicates: data.num_predicates(),
            class_embed_dim: m.class_embed_dim,
            hidden: m.hidden,
            pair_dim: m.pair_dim,
            box_hidden: m.box_hidden,
            scoring_hidden: m.scoring_hidden,
            structure: cfg.structure,
        },
    )?;
    Ok(SggTask {
        model,
        sampling: PairSampling::default(),
        reward_k: cfg.reward_k,
        protocol: cfg.train_protocol,
        graph_constraint: cfg.graph_constraint,
    })
}

pub fn vqa_model(cfg: &ExperimentConfig, data: &Dataset, store: &mut ParamStore) -> anyhow::Result<VqaModel> {
    let m = &cfg.model;
    anyhow::ensure!(!data.meta.answers.is_empty(), "dataset has no answer vocabulary");
    Ok(VqaModel::new(
        store,
        VqaConfig {
            visual_dim: data.meta.visual_dim,
            vocab_size: data.meta.vocab.len(),
            word_dim: m.word_dim,
            q_dim: m.q_dim,
            num_types: data.meta.num_question_types,
            type_dim: m.type_dim,
            fuse_dim: m.fuse_dim,
            att_hidden: m.att_hidden,
            joint_dim: m.joint_dim,
            gate_hidden: m.gate_hidden,
            hidden: m.hidden,
            classifier_hidden: m.classifier_hidden,
            num_answers: data.meta.answers.len(),
            scoring_hidden: m.scoring_hidden,
            structure: cfg.structure,
            use_context: cfg.use_context,
            unit_gate: cfg.unit_gate,
        },
    )?)
}

/// Class-agnostic relatedness targets: a pair is related if any relation
/// joins it in either direction.
pub fn correlation_samples(data: &Dataset, protocol: Protocol) -> Vec<CorrelationSample> {
    (0..data.scenes.len())
        .map(|i| {
            let s = &data.scenes[i];
            let n = s.objects.len();
            let mut related = vec![false; n * n];
            for r in &s.relations {
                related[r.s * n + r.o] = true;
                related[r.o * n + r.s] = true;
            }
            CorrelationSample {
                proposals: data.proposals(i, protocol),
                related,
            }
        })
        .collect()
}

fn training_rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed ^ 0x7eed_5eed)
}

/// Ranked predictions and greedy layouts for every test scene.
pub fn predict_sgg(
    task: &SggTask,
    store: &ParamStore,
    samples: &[SggSample],
    protocol: Protocol,
) -> anyhow::Result<(Vec<SceneGraphPrediction>, Vec<Layout>)> {
    let mut rng = StdRng::seed_from_u64(0);
    let layouts = greedy_layouts(task, store, samples, &mut rng)?;
    let preds = samples
        .iter()
        .zip(&layouts)
        .map(|(s, l)| task.model.predict(store, s, &l.tree, protocol, task.graph_constraint))
        .collect::<vctree::Result<Vec<_>>>()?;
    Ok((preds, layouts))
}

pub fn sgg_metrics(
    preds: &[SceneGraphPrediction],
    samples: &[SggSample],
    protocol: Protocol,
    ks: &[usize],
    num_predicates: usize,
) -> anyhow::Result<ProtocolMetrics> {
    let gts: Vec<_> = samples.iter().map(|s| s.gt.clone()).collect();
    let mut recall = BTreeMap::new();
    let mut mean_recall = BTreeMap::new();
    let mut per_predicate = Vec::new();
    for &k in ks {
        recall.insert(format!("R@{k}"), corpus_recall_at_k(preds, &gts, k, protocol)?);
        let mr = mean_recall_at_k(preds, &gts, k, protocol, num_predicates)?;
        mean_recall.insert(format!("mR@{k}"), mr.mean);
        per_predicate = mr.per_predicate;
    }
    Ok(ProtocolMetrics {
        recall,
        mean_recall,
        per_predicate,
    })
}

pub fn vqa_metrics(model: &VqaModel, store: &ParamStore, data: &Dataset) -> anyhow::Result<VqaMetrics> {
    let samples = data.vqa_samples();
    let mut rng = StdRng::seed_from_u64(0);
    let layouts = greedy_layouts(model, store, &samples, &mut rng)?;
    let scores = samples
        .iter()
        .zip(&layouts)
        .map(|(s, l)| {
            let mut tape = Tape::new();
            let f = model.forward(&mut tape, store, s, &l.tree)?;
            Ok(answer_accuracy(tape.data(f.logits), &s.question.targets))
        })
        .collect::<vctree::Result<Vec<f64>>>()?;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mut per_template = BTreeMap::new();
    for t in 0..data.meta.num_question_types {
        let v: Vec<f64> = data
            .questions
            .iter()
            .zip(&scores)
            .filter(|(q, _)| q.template == t)
            .map(|(_, &s)| s)
            .collect();
        per_template.insert(t.to_string(), mean(&v));
    }
    let pairs = data.balanced_pairs();
    let both: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| if scores[a] >= 1.0 && scores[b] >= 1.0 { 1.0 } else { 0.0 })
        .collect();
    Ok(VqaMetrics {
        accuracy: mean(&scores),
        per_template,
        balanced_pairs: pairs.len(),
        balanced_pair_accuracy: mean(&both),
    })
}

fn vqa_accuracy(model: &VqaModel, store: &ParamStore, samples: &[VqaSample]) -> vctree::Result<f64> {
    let mut rng = StdRng::seed_from_u64(0);
    let layouts = greedy_layouts(model, store, samples, &mut rng)?;
    let mut total = 0.0;
    for (s, l) in samples.iter().zip(&layouts) {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, store, s, &l.tree)?;
        total += answer_accuracy(tape.data(f.logits), &s.question.targets);
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains and evaluates one configuration, writing artifacts to
/// `cfg.output_dir` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<Outcome> {
    cfg.validate()?;
    let (train, test) = load_data(cfg).context("loading data")?;
    let schedule = cfg.effective_schedule();
    let mut store = ParamStore::new(cfg.seed);
    let mut rng = training_rng(cfg.seed);
    let out_dir = cfg.output_dir.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let (report, log) = match cfg.task {
        Task::Sgg => {
            let task = sgg_task(cfg, &train, &mut store)?;
            let pretrain_loss = vctree::scoring::pretrain_correlation(
                &task.model.scorer,
                &mut store,
                &correlation_samples(&train, cfg.train_protocol),
                &cfg.pretrain,
            )
            .context("pretraining f")?;
            let train_samples = train.sgg_samples(cfg.train_protocol)?;
            let test_samples = test.sgg_samples(cfg.train_protocol)?;
            let log = hybrid_schedule(&task, &mut store, &train_samples, &schedule, &mut rng, |t, st| {
                let (preds, _) = predict_sgg(t, st, &test_samples, cfg.train_protocol)
                    .map_err(|e| vctree::Error::Validation(e.to_string()))?;
                let gts: Vec<_> = test_samples.iter().map(|s| s.gt.clone()).collect();
                corpus_recall_at_k(&preds, &gts, cfg.reward_k, cfg.train_protocol)
            })
            .context("training")?;
            let mut metrics = BTreeMap::new();
            for &protocol in &cfg.eval_protocols {
                let samples = if protocol == cfg.train_protocol {
                    test_samples.clone()
                } else {
                    test.sgg_samples(protocol)?
                };
                let (mut preds, layouts) = predict_sgg(&task, &store, &samples, protocol)?;
                metrics.insert(
                    protocol.name().to_string(),
                    sgg_metrics(&preds, &samples, protocol, &cfg.eval_k, test.num_predicates())?,
                );
                if let Some(dir) = &out_dir {
                    for p in &mut preds {
                        p.distributions.clear();
                    }
                    write_json(&dir.join(format!("predictions_{}.json", protocol.name())), &preds)?;
                    if protocol == cfg.train_protocol {
                        write_trees(&dir.join("trees"), &layouts, &preds, &test)?;
                    }
                }
            }
            (
                Report {
                    task: cfg.task,
                    structure: cfg.structure.name().to_string(),
                    mode: cfg.mode,
                    seed: cfg.seed,
                    pretrain_loss,
                    phases: log.phases.clone(),
                    sgg: Some(metrics),
                    vqa: None,
                },
                log,
            )
        }
        Task::Vqa => {
            let model = vqa_model(cfg, &train, &mut store)?;
            let pretrain_loss = vctree::scoring::pretrain_correlation(
                &model.scorer,
                &mut store,
                &correlation_samples(&train, Protocol::SgCls),
                &cfg.pretrain,
            )
            .context("pretraining f")?;
            let train_samples = train.vqa_samples();
            let test_samples = test.vqa_samples();
            anyhow::ensure!(!train_samples.is_empty(), "training data has no questions");
            let log = hybrid_schedule(&model, &mut store, &train_samples, &schedule, &mut rng, |m, st| {
                vqa_accuracy(m, st, &test_samples)
            })
            .context("training")?;
            (
                Report {
                    task: cfg.task,
                    structure: cfg.structure.name().to_string(),
                    mode: cfg.mode,
                    seed: cfg.seed,
                    pretrain_loss,
                    phases: log.phases.clone(),
                    sgg: None,
                    vqa: Some(vqa_metrics(&model, &store, &test)?),
                },
                log,
            )
        }
    };
    if let Some(dir) = &out_dir {
        std::fs::write(dir.join("report.json"), report.to_json()?)?;
        std::fs::write(dir.join("train_log.jsonl"), log.to_json_lines()?)?;
        checkpoint::save(&store, &dir.join("checkpoint.json"), serde_json::to_value(cfg)?)?;
    }
    Ok(Outcome { report, log })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_trees(dir: &Path, layouts: &[Layout], preds: &[SceneGraphPrediction], data: &Dataset) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, (l, p)) in layouts.iter().zip(preds).enumerate() {
        let mut t = TreeJson::from_ctx(&l.tree);
        t.labels = Some(p.labels.iter().map(|&c| data.meta.class_names[c].clone()).collect());
        write_json(&dir.join(format!("scene_{i:04}.json")), &t)?;
    }
    Ok(())
}

/// Evaluation output of the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgg: Option<ProtocolMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vqa: Option<VqaMetrics>,
}

/// Re-evaluates a saved checkpoint on a dataset.
pub fn eval_checkpoint(ckpt: &Path, data_path: &Path, protocol: &str) -> anyhow::Result<EvalReport> {
    let (manifest, _) = checkpoint::load(ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    let cfg: ExperimentConfig = serde_json::from_value(manifest.meta).context("checkpoint carries no valid config")?;
    let data = Dataset::load(data_path)?;
    let mut store = ParamStore::new(cfg.seed);
    if protocol == "vqa" {
        anyhow::ensure!(cfg.task == Task::Vqa, "checkpoint holds an SGG model; protocol `vqa` needs a VQA model");
        let model = vqa_model(&cfg, &data, &mut store)?;
        checkpoint::load_into(&mut store, ckpt)?;
        return Ok(EvalReport {
            protocol: protocol.into(),
            sgg: None,
            vqa: Some(vqa_metrics(&model, &store, &data)?),
        });
    }
    let p = Protocol::parse(protocol).with_context(|| format!("unknown protocol `{protocol}`"))?;
    anyhow::ensure!(cfg.task == Task::Sgg, "checkpoint holds a VQA model; use protocol `vqa`");
    let task = sgg_task(&cfg, &data, &mut store)?;
    checkpoint::load_into(&mut store, ckpt)?;
    let samples = data.sgg_samples(p)?;
    let (preds, _) = predict_sgg(&task, &store, &samples, p)?;
    Ok(EvalReport {
        protocol: protocol.into(),
        sgg: Some(sgg_metrics(&preds, &samples, p, &cfg.eval_k, data.num_predicates())?),
        vqa: None,
    })
}

/// Recomputes metrics from a prediction dump.
pub fn eval_predictions(preds_path: &Path, data_path: &Path, protocol: &str, ks: &[usize]) -> anyhow::Result<EvalReport> {
    let p = Protocol::parse(protocol).with_context(|| format!("unknown protocol `{protocol}`"))?;
    let data = Dataset::load(data_path)?;
    let text = std::fs::read_to_string(preds_path).with_context(|| format!("reading {}", preds_path.display()))?;
    let preds: Vec<SceneGraphPrediction> = serde_json::from_str(&text).context("parsing predictions")?;
    anyhow::ensure!(preds.len() == data.scenes.len(), "{} predictions for {} scenes", preds.len(), data.scenes.len());
    for pr in &preds {
        pr.validate()?;
    }
    let samples = data.sgg_samples(p)?;
    Ok(EvalReport {
        protocol: protocol.into(),
        sgg: Some(sgg_metrics(&preds, &samples, p, ks, data.num_predicates())?),
        vqa: None,
    })
}

/// Reads every tree file in `dir`, in file-name order.
pub fn read_trees(dir: &Path) -> anyhow::Result<Vec<TreeJson>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).with_context(|| format!("parsing tree {}", p.display()))
        })
        .collect()
}
