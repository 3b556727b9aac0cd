//! Dataset files and the per-protocol views fed to the models.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vctree::scoring::{BoxCoords, ImageSize, ObjectProposal};
use vctree::sgg::{GroundTruthGraph, Protocol, Relation, SggSample, UnionFeatures};
use vctree::treebuild::TreeJson;
use vctree::vqa::{Question, VqaSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub label: usize,
    #[serde(rename = "box")]
    pub bbox: BoxCoords,
    pub visual: Vec<f64>,
    /// Detector class distribution, used when classes are not given.
    pub class_dist: Vec<f64>,
    /// Detector box, used when boxes are not given. Defaults to the true box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<BoxCoords>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub image_size: ImageSize,
    pub objects: Vec<ObjectRecord>,
    pub relations: Vec<Relation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_tree: Option<TreeJson>,
    /// Externally supplied union-region features, `n * n * visual_dim`
    /// values in row-major pair order. Derived from the objects when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub union_features: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub scene: usize,
    pub tokens: Vec<usize>,
    pub question_type: usize,
    pub targets: Vec<f64>,
    /// Template id and referenced class; used to form balanced pairs.
    pub template: usize,
    pub subject: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
    pub predicate_names: Vec<String>,
    pub visual_dim: usize,
    #[serde(default)]
    pub vocab: Vec<String>,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default)]
    pub num_question_types: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub scenes: Vec<Scene>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub questions: Vec<QuestionRecord>,
}

impl Dataset {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading dataset {}", path.display()))?;
        let d: Dataset = serde_json::from_str(&text).with_context(|| format!("parsing dataset {}", path.display()))?;
        d.validate().with_context(|| format!("validating dataset {}", path.display()))?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).with_context(|| format!("writing dataset {}", path.display()))
    }

    pub fn num_classes(&self) -> usize {
        self.meta.class_names.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.meta.predicate_names.len()
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let c = self.num_classes();
        let d = self.meta.visual_dim;
        for (i, s) in self.scenes.iter().enumerate() {
            anyhow::ensure!(!s.objects.is_empty(), "scene {i} has no objects");
            for o in &s.objects {
                anyhow::ensure!(o.visual.len() == d, "scene {i}: visual feature of width {} (expected {d})", o.visual.len());
                anyhow::ensure!(o.class_dist.len() == c, "scene {i}: class distribution over {} classes (expected {c})", o.class_dist.len());
            }
            self.ground_truth(i).validate(c, self.num_predicates())?;
            if let Some(u) = &s.union_features {
                let n = s.objects.len();
                anyhow::ensure!(u.len() == n * n * d, "scene {i}: union features hold {} values", u.len());
            }
        }
        for q in &self.questions {
            anyhow::ensure!(q.scene < self.scenes.len(), "question refers to missing scene {}", q.scene);
            anyhow::ensure!(q.targets.len() == self.meta.answers.len(), "question targets do not match the answer vocabulary");
            anyhow::ensure!(q.question_type < self.meta.num_question_types, "question type {} out of range", q.question_type);
            anyhow::ensure!(q.tokens.iter().all(|&t| t < self.meta.vocab.len()), "question token out of vocabulary");
        }
        Ok(())
    }

    pub fn ground_truth(&self, scene: usize) -> GroundTruthGraph {
        let s = &self.scenes[scene];
        GroundTruthGraph {
            boxes: s.objects.iter().map(|o| o.bbox).collect(),
            labels: s.objects.iter().map(|o| o.label).collect(),
            relations: s.relations.clone(),
        }
    }

    /// Proposals as the protocol dictates: PredCls gets true boxes and
    /// one-hot true classes, SGCls true boxes and detector classes, SGGen
    /// detector boxes and classes.
    pub fn proposals(&self, scene: usize, protocol: Protocol) -> Vec<ObjectProposal> {
        let s = &self.scenes[scene];
        let c = self.num_classes();
        s.objects
            .iter()
            .map(|o| ObjectProposal {
                visual: o.visual.clone(),
                bbox: match protocol {
                    Protocol::SgGen => o.detection.unwrap_or(o.bbox),
                    _ => o.bbox,
                },
                class_dist: match protocol {
                    Protocol::PredCls => {
                        let mut v = vec![0.0; c];
                        v[o.label] = 1.0;
                        v
                    }
                    _ => o.class_dist.clone(),
                },
                image_size: s.image_size,
            })
            .collect()
    }

    pub fn sgg_sample(&self, scene: usize, protocol: Protocol) -> anyhow::Result<SggSample> {
        let proposals = self.proposals(scene, protocol);
        let n = proposals.len();
        let union = match &self.scenes[scene].union_features {
            Some(u) => UnionFeatures::from_pairs(n, self.meta.visual_dim, u.clone())?,
            None => UnionFeatures::derive(&proposals),
        };
        Ok(SggSample {
            proposals,
            union,
            gt: self.ground_truth(scene),
        })
    }

    pub fn sgg_samples(&self, protocol: Protocol) -> anyhow::Result<Vec<SggSample>> {
        (0..self.scenes.len()).map(|i| self.sgg_sample(i, protocol)).collect()
    }

    /// Question samples; visual input uses true boxes.
    pub fn vqa_samples(&self) -> Vec<VqaSample> {
        self.questions
            .iter()
            .map(|q| VqaSample {
                proposals: self.proposals(q.scene, Protocol::SgCls),
                question: Question {
                    tokens: q.tokens.clone(),
                    question_type: q.question_type,
                    targets: q.targets.clone(),
                },
            })
            .collect()
    }

    /// Index pairs of questions with the same template and subject asked on
    /// different scenes with different answers.
    pub fn balanced_pairs(&self) -> Vec<(usize, usize)> {
        let argmax = |t: &[f64]| {
            let mut b = 0;
            for (i, &v) in t.iter().enumerate() {
                if v > t[b] {
                    b = i;
                }
            }
            b
        };
        let mut pairs = Vec::new();
        let mut used = vec![false; self.questions.len()];
        for i in 0..self.questions.len() {
            if used[i] {
                continue;
            }
            let a = &self.questions[i];
            if let Some(j) = ((i + 1)..self.questions.len()).find(|&j| {
                let b = &self.questions[j];
                !used[j]
                    && b.template == a.template
                    && b.subject == a.subject
                    && b.scene != a.scene
                    && argmax(&b.targets) != argmax(&a.targets)
            }) {
                used[i] = true;
                used[j] = true;
                pairs.push((i, j));
            }
        }
        pairs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_vqa, SynthSpec};

    #[test]
    fn save_load_round_trip() {
        let spec = SynthSpec {
            train_scenes: 6,
            test_scenes: 2,
            ..SynthSpec::default()
        };
        let (train, _) = generate_vqa(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        train.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), train);
    }

    #[test]
    fn protocol_views_keep_what_they_must() {
        let spec = SynthSpec {
            train_scenes: 3,
            test_scenes: 1,
            ..SynthSpec::default()
        };
        let (d, _) = generate_vqa(&spec).unwrap();
        for i in 0..d.scenes.len() {
            let gt = d.ground_truth(i);
            let pred = d.proposals(i, Protocol::PredCls);
            let cls = d.proposals(i, Protocol::SgCls);
            for (k, o) in d.scenes[i].objects.iter().enumerate() {
                assert_eq!(pred[k].bbox, gt.boxes[k]);
                assert_eq!(cls[k].bbox, gt.boxes[k]);
                assert_eq!(pred[k].class_dist[o.label], 1.0);
                assert_eq!(cls[k].class_dist, o.class_dist);
            }
        }
    }

    #[test]
    fn malformed_dataset_is_rejected() {
        let spec = SynthSpec {
            train_scenes: 2,
            test_scenes: 1,
            ..SynthSpec::default()
        };
        let (mut d, _) = generate_vqa(&spec).unwrap();
        d.scenes[0].objects[0].visual.pop();
        assert!(d.validate().is_err());
    }
}
