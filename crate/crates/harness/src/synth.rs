//! Synthetic scenes with planted whole/part structure.
//!
//! Each scene holds a few "wholes" laid out left to right, each containing
//! adjacent "parts" of its own group. Wholes carry a latent style that is
//! visible only in the whole's own feature; the predicate between two
//! sibling parts is decided by that style, so predicting it needs context
//! from the parent. Questions ask about the owner of a part, which is
//! ambiguous from appearance alone when the scene has two wholes of the same
//! class.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vctree::scoring::{BoxCoords, ImageSize};
use vctree::sgg::Relation;
use vctree::treebuild::{MultiBranchTree, TreeJson, CtxTree};

use crate::dataset::{Dataset, DatasetMeta, ObjectRecord, QuestionRecord, Scene};

pub const PRED_HAS: usize = 1;
/// Sibling predicates, one per style.
pub const PRED_SIBLING: [usize; 3] = [2, 3, 4];
pub const PRED_LEFT_OF: usize = 5;
pub const PRED_RIGHT_OF: usize = 6;
pub const PRED_NEAR: usize = 7;
pub const PRED_BEYOND: usize = 8;

pub const PREDICATE_NAMES: [&str; 9] = [
    "__background__",
    "has",
    "next to",
    "attached to",
    "stacked on",
    "left of",
    "right of",
    "near",
    "beyond",
];

const GROUPS: [(&str, [&str; 3]); 5] = [
    ("car", ["wheel", "door", "window"]),
    ("person", ["head", "arm", "leg"]),
    ("table", ["top", "leg", "drawer"]),
    ("tree", ["trunk", "branch", "leaf"]),
    ("house", ["roof", "door", "chimney"]),
];

pub const STYLE_NAMES: [&str; 3] = ["plain", "striped", "dotted"];

pub const TEMPLATE_OWNER_STYLE: usize = 0;
pub const TEMPLATE_OWNER_PARTS: usize = 1;
pub const TEMPLATE_WHOLE_STYLE: usize = 2;

const WORDS: [&str; 11] = ["what", "style", "is", "the", "owner", "of", "how", "many", "parts", "does", "have"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of whole/part groups (at most 5).
    pub groups: usize,
    pub visual_dim: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise: f64,
    /// Scale of the style embedding added to whole features.
    pub style_strength: f64,
    /// Probability that a scene repeats a whole class.
    pub duplicate_prob: f64,
    /// Probability mass the simulated detector puts on the true class.
    pub detector_confidence: f64,
    /// Box jitter of simulated detections, relative to box size.
    pub box_jitter: f64,
    pub questions_per_scene: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            train_scenes: 500,
            test_scenes: 100,
            min_objects: 6,
            max_objects: 12,
            groups: 5,
            visual_dim: 32,
            noise: 0.3,
            style_strength: 1.0,
            duplicate_prob: 0.6,
            detector_confidence: 0.7,
            box_jitter: 0.05,
            questions_per_scene: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(
            (1..=GROUPS.len()).contains(&self.groups),
            "taxonomy has {} whole/part groups; {} requested",
            GROUPS.len(),
            self.groups
        );
        anyhow::ensure!(self.min_objects >= 2, "scenes need at least one whole and one part");
        anyhow::ensure!(
            self.min_objects <= self.max_objects,
            "min_objects {} exceeds max_objects {}",
            self.min_objects,
            self.max_objects
        );
        // at most 4 parts per whole, one whole per 4 slots
        anyhow::ensure!(self.max_objects <= 20, "max_objects above 20 is not supported by the layout");
        anyhow::ensure!(self.visual_dim > 0, "visual_dim must be positive");
        anyhow::ensure!(self.noise >= 0.0 && self.style_strength >= 0.0, "noise scales must be nonnegative");
        anyhow::ensure!((0.0..=1.0).contains(&self.duplicate_prob), "duplicate_prob must be a probability");
        anyhow::ensure!(
            self.detector_confidence > 0.0 && self.detector_confidence <= 1.0,
            "detector_confidence must lie in (0, 1]"
        );
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        4 * self.groups
    }

    pub fn class_names(&self) -> Vec<String> {
        GROUPS[..self.groups]
            .iter()
            .flat_map(|(w, parts)| std::iter::once(w.to_string()).chain(parts.iter().map(move |p| format!("{w}_{p}"))))
            .collect()
    }

    pub fn vocab(&self) -> Vec<String> {
        WORDS.iter().map(|w| w.to_string()).chain(self.class_names()).collect()
    }

    pub fn answers() -> Vec<String> {
        STYLE_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain((1..=4).map(|c| c.to_string()))
            .collect()
    }

    fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            class_names: self.class_names(),
            predicate_names: PREDICATE_NAMES.iter().map(|s| s.to_string()).collect(),
            visual_dim: self.visual_dim,
            vocab: self.vocab(),
            answers: SynthSpec::answers(),
            num_question_types: 3,
        }
    }
}

fn whole_class(group: usize) -> usize {
    4 * group
}

fn is_whole(class: usize) -> bool {
    class.is_multiple_of(4)
}

fn group_of(class: usize) -> usize {
    class / 4
}

/// Feature prototypes shared by every scene of one seed.
struct Prototypes {
    class: Vec<Vec<f64>>,
    style: Vec<Vec<f64>>,
}

impl Prototypes {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::MAX);
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        let draw = |rng: &mut ChaCha8Rng| (0..spec.visual_dim).map(|_| normal.sample(rng)).collect::<Vec<f64>>();
        let class = (0..spec.num_classes()).map(|_| draw(&mut rng)).collect();
        let style = (0..STYLE_NAMES.len()).map(|_| draw(&mut rng)).collect();
        Prototypes { class, style }
    }
}

/// Per-scene random stream, independent of every other scene.
pub fn scene_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 32) | index as u64);
    rng
}

struct Whole {
    group: usize,
    style: usize,
    parts: Vec<usize>,
}

/// Train and test scene sets.
pub fn generate_scenes(spec: &SynthSpec) -> anyhow::Result<(Dataset, Dataset)> {
    spec.validate()?;
    let protos = Prototypes::new(spec);
    let make = |split: u64, count: usize| Dataset {
        meta: spec.meta(),
        scenes: (0..count)
            .map(|i| generate_scene(spec, &protos, i, &mut scene_rng(spec.seed, split, i)))
            .collect(),
        questions: Vec::new(),
    };
    Ok((make(0, spec.train_scenes), make(1, spec.test_scenes)))
}

/// Scenes plus templated questions.
pub fn generate_vqa(spec: &SynthSpec) -> anyhow::Result<(Dataset, Dataset)> {
    let (mut train, mut test) = generate_scenes(spec)?;
    for (split, d) in [(2u64, &mut train), (3u64, &mut test)] {
        let mut questions = Vec::new();
        for (i, scene) in d.scenes.iter().enumerate() {
            let mut rng = scene_rng(spec.seed, split, i);
            questions.extend(generate_questions(spec, scene, i, &mut rng));
        }
        d.questions = questions;
    }
    Ok((train, test))
}

fn generate_scene(spec: &SynthSpec, protos: &Prototypes, id: usize, rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let k = n.div_ceil(5).max(if n >= 4 { 2 } else { 1 });
    let mut counts = vec![1usize; k];
    for _ in k..(n - k) {
        let open: Vec<usize> = (0..k).filter(|&w| counts[w] < 4).collect();
        let w = *open.choose(rng).expect("layout has room");
        counts[w] += 1;
    }
    let mut groups: Vec<usize> = Vec::with_capacity(k);
    let duplicate = k >= 2 && rng.random_bool(spec.duplicate_prob);
    for w in 0..k {
        let g = if duplicate && w == 1 {
            groups[0]
        } else {
            rng.random_range(0..spec.groups)
        };
        groups.push(g);
    }
    groups.shuffle(rng);
    let wholes: Vec<Whole> = groups
        .iter()
        .zip(&counts)
        .map(|(&group, &m)| Whole {
            group,
            style: rng.random_range(0..STYLE_NAMES.len()),
            parts: (0..m).map(|_| whole_class(group) + rng.random_range(1..4)).collect(),
        })
        .collect();

    let image = ImageSize {
        width: 100.0 * k as f64,
        height: 100.0,
    };
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let feature = |class: usize, style: Option<usize>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..spec.visual_dim)
            .map(|d| {
                let mut v = protos.class[class][d];
                if let Some(s) = style {
                    v += spec.style_strength * protos.style[s][d];
                }
                if spec.noise > 0.0 {
                    v += noise.sample(rng);
                }
                v
            })
            .collect()
    };

    // objects in generation order: whole, then its parts, left to right
    let mut objects: Vec<ObjectRecord> = Vec::with_capacity(n);
    let mut relations = Vec::new();
    let mut whole_index = Vec::with_capacity(k);
    let mut part_indices: Vec<Vec<usize>> = Vec::with_capacity(k);
    for (w, whole) in wholes.iter().enumerate() {
        let sx = 100.0 * w as f64;
        let wb = BoxCoords::new(
            sx + rng.random_range(2.0..10.0),
            rng.random_range(5.0..25.0),
            sx + 100.0 - rng.random_range(2.0..10.0),
            100.0 - rng.random_range(2.0..15.0),
        );
        let wi = objects.len();
        whole_index.push(wi);
        objects.push(object(
            spec,
            whole_class(whole.group),
            Some(whole.style),
            wb,
            feature(whole_class(whole.group), Some(whole.style), rng),
            image,
            rng,
        ));
        let m = whole.parts.len();
        let seg = wb.width() / m as f64;
        let mut idx = Vec::with_capacity(m);
        for (p, &class) in whole.parts.iter().enumerate() {
            let x1 = wb.x1 + p as f64 * seg;
            let pb = BoxCoords::new(
                x1 + seg * rng.random_range(0.05..0.15),
                wb.y1 + wb.height() * rng.random_range(0.1..0.4),
                x1 + seg * (1.0 - rng.random_range(0.05..0.15)),
                wb.y2 - wb.height() * rng.random_range(0.05..0.3),
            );
            idx.push(objects.len());
            relations.push(Relation {
                s: wi,
                p: PRED_HAS,
                o: objects.len(),
            });
            objects.push(object(spec, class, None, pb, feature(class, None, rng), image, rng));
        }
        for pair in idx.windows(2) {
            relations.push(Relation {
                s: pair[0],
                p: PRED_SIBLING[whole.style],
                o: pair[1],
            });
        }
        part_indices.push(idx);
    }
    for w in 0..k {
        for v in (w + 1)..k {
            let (a, b) = (whole_index[w], whole_index[v]);
            if v == w + 1 {
                relations.push(Relation { s: a, p: PRED_LEFT_OF, o: b });
                relations.push(Relation { s: b, p: PRED_RIGHT_OF, o: a });
                let last = *part_indices[w].last().expect("whole has parts");
                relations.push(Relation {
                    s: last,
                    p: PRED_NEAR,
                    o: part_indices[v][0],
                });
            } else {
                relations.push(Relation { s: a, p: PRED_BEYOND, o: b });
            }
        }
    }

    // planted tree: first whole is the root, later wholes and own parts hang below
    let mut edges = Vec::new();
    for w in 0..k {
        if w > 0 {
            edges.push((whole_index[0], whole_index[w]));
        }
    }
    for w in 0..k {
        for &p in &part_indices[w] {
            edges.push((whole_index[w], p));
        }
    }
    // shuffle indices so position carries no information
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut shuffled: Vec<Option<ObjectRecord>> = vec![None; n];
    for (old, obj) in objects.into_iter().enumerate() {
        shuffled[perm[old]] = Some(obj);
    }
    let objects: Vec<ObjectRecord> = shuffled.into_iter().map(|o| o.expect("permutation")).collect();
    let mut relations: Vec<Relation> = relations
        .into_iter()
        .map(|r| Relation {
            s: perm[r.s],
            p: r.p,
            o: perm[r.o],
        })
        .collect();
    relations.sort();
    let edges: Vec<(usize, usize)> = edges.into_iter().map(|(a, b)| (perm[a], perm[b])).collect();
    let tree = MultiBranchTree::from_edges(n, perm[whole_index[0]], &edges).expect("planted tree spans the scene");
    let mut tree_json = TreeJson::from_ctx(&CtxTree::MultiBranch(tree));
    tree_json.labels = Some(objects.iter().map(|o| spec.class_names()[o.label].clone()).collect());
    Scene {
        id,
        image_size: image,
        objects,
        relations,
        planted_tree: Some(tree_json),
        union_features: None,
    }
}

fn object(
    spec: &SynthSpec,
    label: usize,
    style: Option<usize>,
    bbox: BoxCoords,
    visual: Vec<f64>,
    image: ImageSize,
    rng: &mut ChaCha8Rng,
) -> ObjectRecord {
    let c = spec.num_classes();
    // simulated detector: mostly the true class, sometimes a sibling class of the group
    let peak = if rng.random_bool(0.85) {
        label
    } else {
        let g = group_of(label);
        let mut alt = 4 * g + rng.random_range(0..4);
        if alt == label {
            alt = 4 * g + (label % 4 + 1) % 4;
        }
        alt
    };
    let rest = (1.0 - spec.detector_confidence) / (c - 1) as f64;
    let mut class_dist = vec![rest; c];
    class_dist[peak] = spec.detector_confidence;
    let (w, h) = (bbox.width(), bbox.height());
    let j = spec.box_jitter;
    let mut jitter = |s: f64| if j > 0.0 { rng.random_range(-j..j) * s } else { 0.0 };
    let mut det = BoxCoords::new(bbox.x1 + jitter(w), bbox.y1 + jitter(h), bbox.x2 + jitter(w), bbox.y2 + jitter(h));
    det.x1 = det.x1.clamp(0.0, image.width - 1.0);
    det.y1 = det.y1.clamp(0.0, image.height - 1.0);
    det.x2 = det.x2.clamp(det.x1 + 0.5, image.width);
    det.y2 = det.y2.clamp(det.y1 + 0.5, image.height);
    ObjectRecord {
        label,
        bbox,
        visual,
        class_dist,
        detection: Some(det),
        style,
    }
}

/// Owner whole of every part, read back from the `has` relations.
pub fn owners(scene: &Scene) -> Vec<Option<usize>> {
    let mut owner = vec![None; scene.objects.len()];
    for r in &scene.relations {
        if r.p == PRED_HAS {
            owner[r.o] = Some(r.s);
        }
    }
    owner
}

/// The generator's answer rule, also used to re-derive answers in tests.
pub fn answer_for(scene: &Scene, template: usize, subject: usize) -> Option<usize> {
    let owner = owners(scene);
    let unique = |class: usize| scene.objects.iter().filter(|o| o.label == class).count() == 1;
    let find = |class: usize| scene.objects.iter().position(|o| o.label == class);
    match template {
        TEMPLATE_OWNER_STYLE | TEMPLATE_OWNER_PARTS => {
            if is_whole(subject) || !unique(subject) {
                return None;
            }
            let part = find(subject)?;
            let w = owner[part]?;
            if template == TEMPLATE_OWNER_STYLE {
                scene.objects[w].style
            } else {
                let count = owner.iter().filter(|&&o| o == Some(w)).count();
                Some(STYLE_NAMES.len() + count - 1)
            }
        }
        TEMPLATE_WHOLE_STYLE => {
            if !is_whole(subject) || !unique(subject) {
                return None;
            }
            scene.objects[find(subject)?].style
        }
        _ => None,
    }
}

pub fn question_tokens(spec: &SynthSpec, template: usize, subject: usize) -> Vec<usize> {
    let word = |w: &str| WORDS.iter().position(|x| *x == w).expect("known word");
    let class_token = WORDS.len() + subject;
    let words: &[&str] = match template {
        TEMPLATE_OWNER_STYLE => &["what", "style", "is", "the", "owner", "of", "the"],
        TEMPLATE_OWNER_PARTS => &["how", "many", "parts", "does", "the", "owner", "of", "the"],
        _ => &["what", "style", "is", "the"],
    };
    let mut t: Vec<usize> = words.iter().map(|w| word(w)).collect();
    t.push(class_token);
    if template == TEMPLATE_OWNER_PARTS {
        t.push(word("have"));
    }
    debug_assert!(t.iter().all(|&x| x < spec.vocab().len()));
    t
}

fn generate_questions(spec: &SynthSpec, scene: &Scene, scene_index: usize, rng: &mut ChaCha8Rng) -> Vec<QuestionRecord> {
    let mut candidates = Vec::new();
    let mut classes: Vec<usize> = scene.objects.iter().map(|o| o.label).collect();
    classes.sort();
    classes.dedup();
    for &c in &classes {
        for t in [TEMPLATE_OWNER_STYLE, TEMPLATE_OWNER_PARTS, TEMPLATE_WHOLE_STYLE] {
            if let Some(a) = answer_for(scene, t, c) {
                candidates.push((t, c, a));
            }
        }
    }
    candidates.shuffle(rng);
    let num_answers = SynthSpec::answers().len();
    candidates
        .into_iter()
        .take(spec.questions_per_scene)
        .map(|(template, subject, answer)| {
            let mut targets = vec![0.0; num_answers];
            targets[answer] = 1.0;
            QuestionRecord {
                scene: scene_index,
                tokens: question_tokens(spec, template, subject),
                question_type: template,
                template,
                subject,
                targets,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_scenes: 20,
            test_scenes: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noiseless_parts_are_class_prototypes() {
        let spec = SynthSpec {
            noise: 0.0,
            style_strength: 0.0,
            ..small()
        };
        let (train, _) = generate_scenes(&spec).unwrap();
        let protos = Prototypes::new(&spec);
        for s in &train.scenes {
            for o in &s.objects {
                assert_eq!(o.visual, protos.class[o.label]);
            }
        }
    }

    #[test]
    fn parts_lie_inside_their_whole() {
        let (train, _) = generate_scenes(&small()).unwrap();
        for s in &train.scenes {
            let owner = owners(s);
            for (i, o) in s.objects.iter().enumerate() {
                if let Some(w) = owner[i] {
                    let inter = s.objects[w].bbox.intersection(&o.bbox).unwrap();
                    assert_eq!(o.bbox.iou(&inter), 1.0);
                    assert!(is_whole(s.objects[w].label));
                    assert_eq!(group_of(s.objects[w].label), group_of(o.label));
                } else {
                    assert!(is_whole(o.label));
                }
            }
        }
    }

    #[test]
    fn scene_sizes_and_relations_are_valid() {
        let spec = small();
        let (train, test) = generate_scenes(&spec).unwrap();
        for s in train.scenes.iter().chain(&test.scenes) {
            let n = s.objects.len();
            assert!((spec.min_objects..=spec.max_objects).contains(&n), "{n}");
            let gt = vctree::sgg::GroundTruthGraph {
                boxes: s.objects.iter().map(|o| o.bbox).collect(),
                labels: s.objects.iter().map(|o| o.label).collect(),
                relations: s.relations.clone(),
            };
            gt.validate(spec.num_classes(), PREDICATE_NAMES.len()).unwrap();
            let tree = s.planted_tree.as_ref().unwrap().to_ctx().unwrap();
            assert_eq!(tree.n(), n);
            // hierarchical relations follow planted parent-child edges
            for r in s.relations.iter().filter(|r| r.p == PRED_HAS) {
                assert_eq!(tree.parent(r.o), Some(r.s));
            }
            // sibling relations join children of one parent
            for r in s.relations.iter().filter(|r| PRED_SIBLING.contains(&r.p)) {
                assert_eq!(tree.parent(r.s), tree.parent(r.o));
            }
        }
    }

    #[test]
    fn answers_rederive_from_scenes() {
        let (train, _) = generate_vqa(&small()).unwrap();
        assert!(!train.questions.is_empty());
        for q in &train.questions {
            let a = answer_for(&train.scenes[q.scene], q.template, q.subject).unwrap();
            assert_eq!(q.targets[a], 1.0);
            assert_eq!(q.targets.iter().sum::<f64>(), 1.0);
            assert!(q.question_type < 3);
        }
    }

    #[test]
    fn inconsistent_taxonomy_is_rejected() {
        assert!(SynthSpec { groups: 6, ..small() }.validate().is_err());
        assert!(SynthSpec { min_objects: 9, max_objects: 7, ..small() }.validate().is_err());
    }
}
