//! Template question/answer generation over a scene.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ctag::{extract_tags, CTag};
use super::generator::{ObjectClass, SceneGraph};
use super::motion::{MotionText, Steer};
use super::{ego_motion, important_objects, object_motion, visible_object, visible_objects, VisibleObject};
use crate::error::Result;
use crate::taxonomy::{QType, Task};
use crate::text::canonicalize;

const QA_SEED_SALT: u64 = 0x0a_5eed_7e3a;
pub const CORRIDOR_HALF_WIDTH: f64 = 3.0;
pub const PEDESTRIAN_STOP_RANGE: f64 = 25.0;
pub const FOLLOW_RANGE: f64 = 20.0;
pub const MOVING_SPEED: f64 = 0.5;
const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

pub const CORE_PERCEPTION_Q: &str = "What are the important objects in the current scene ?";
pub const NO_IMPORTANT_A: &str = "There are no important objects .";
pub const PLANNING_Q: &str = "What actions should the ego vehicle take ?";
pub const BEHAVIOR_Q: &str = "Predict the behavior of the ego vehicle .";
const OPTIONS_LEAD: &str = "Please select the correct answer from the following options :";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub scene_seed: u64,
    pub task: Task,
    pub qtype: QType,
    pub is_core: bool,
    pub question: String,
    pub answer: String,
    pub identities: Vec<String>,
}

impl QARecord {
    fn new(scene: &SceneGraph, task: Task, qtype: QType, is_core: bool, question: &str, answer: &str) -> Self {
        let question = canonicalize(question);
        let answer = canonicalize(answer);
        let mut identities: Vec<String> = Vec::new();
        for t in extract_tags(&question).into_iter().chain(extract_tags(&answer)) {
            let s = t.to_string();
            if !identities.contains(&s) {
                identities.push(s);
            }
        }
        Self { scene_seed: scene.seed, task, qtype, is_core, question, answer, identities }
    }

    pub fn is_core_perception(&self) -> bool {
        self.is_core && self.task == Task::Perception
    }

    pub fn is_core_prediction(&self) -> bool {
        self.is_core && self.task == Task::Prediction
    }
}

/// True when `tag` names an object that is visible in the tagged camera at
/// the tagged pixel.
pub fn resolve_tag(scene: &SceneGraph, tag: &CTag) -> bool {
    let Some(obj) = tag.object_id().and_then(|id| scene.object(id)) else { return false };
    visible_object(scene, obj).is_some_and(|v| v.tag == *tag)
}

fn options(correct: &str, pool: &[String], rng: &mut ChaCha8Rng) -> (String, String) {
    let mut distractors: Vec<&String> = pool.iter().filter(|p| p.as_str() != correct).collect();
    distractors.shuffle(rng);
    let mut opts: Vec<&str> = distractors.iter().take(3).map(|s| s.as_str()).collect();
    opts.push(correct);
    opts.shuffle(rng);
    let idx = opts.iter().position(|o| *o == correct).expect("correct option present");
    let listed: Vec<String> = opts.iter().zip(LETTERS).map(|(o, l)| format!("{l} . {o}")).collect();
    (listed.join(" "), LETTERS[idx].to_string())
}

fn motion_phrase(m: &MotionText) -> String {
    m.to_string()
}

pub fn planning_answer(scene: &SceneGraph) -> Result<String> {
    let in_corridor = |range: f64, p: [f64; 2]| p[0] > 0.0 && p[0] <= range && p[1].abs() < CORRIDOR_HALF_WIDTH;
    let ego_xy = |o: &super::ObjectState| scene.to_ego([o.box3d.center[0], o.box3d.center[1]]);
    if scene
        .objects
        .iter()
        .any(|o| o.class_label == ObjectClass::Pedestrian && in_corridor(PEDESTRIAN_STOP_RANGE, ego_xy(o)))
    {
        return Ok("The ego vehicle should slow down and stop for the pedestrian .".into());
    }
    if scene
        .objects
        .iter()
        .any(|o| o.class_label != ObjectClass::Pedestrian && in_corridor(FOLLOW_RANGE, ego_xy(o)))
    {
        return Ok("The ego vehicle should slow down and keep a safe distance .".into());
    }
    let action = match ego_motion(scene)?.steer {
        Steer::Straight => "keep going straight",
        Steer::Left => "turn left",
        Steer::Right => "turn right",
    };
    Ok(format!("The ego vehicle should {action} ."))
}

fn tagged_noun(scene: &SceneGraph, v: &VisibleObject) -> String {
    let obj = scene.object(v.id).expect("visible object exists");
    format!("{} {}", obj.class_label.noun(), v.tag)
}

/// All QA records of one scene, in a fixed template order.
pub fn gen_qa(scene: &SceneGraph) -> Result<Vec<QARecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ QA_SEED_SALT);
    let important = important_objects(scene);
    let visible = visible_objects(scene);
    let mut out = Vec::new();

    let perception_answer = if important.is_empty() {
        NO_IMPORTANT_A.to_string()
    } else {
        let items: Vec<String> = important.iter().map(|v| tagged_noun(scene, v)).collect();
        format!("The important objects are {} .", items.join(" , "))
    };
    out.push(QARecord::new(scene, Task::Perception, QType::Open, true, CORE_PERCEPTION_Q, &perception_answer));

    let nouns: Vec<String> = ObjectClass::ALL.iter().map(|c| c.noun().to_string()).collect();
    if let Some(first) = important.first() {
        let obj = scene.object(first.id).expect("visible object exists");
        let (listed, letter) = options(obj.class_label.noun(), &nouns, &mut rng);
        let q = format!("What is the category of {} ? {OPTIONS_LEAD} {listed}", first.tag);
        out.push(QARecord::new(scene, Task::Perception, QType::MultipleChoice, false, &q, &letter));
    }

    let probe = ObjectClass::ALL[rng.random_range(0..ObjectClass::ALL.len())];
    let present = visible.iter().any(|v| scene.object(v.id).is_some_and(|o| o.class_label == probe));
    out.push(QARecord::new(
        scene,
        Task::Perception,
        QType::YesNo,
        false,
        &format!("Is there a {} in the scene ?", probe.noun()),
        if present { "Yes" } else { "No" },
    ));

    let (pq, pa) = if important.is_empty() {
        ("What is the future state of the important objects ?".to_string(), NO_IMPORTANT_A.to_string())
    } else {
        let tags: Vec<String> = important.iter().map(|v| v.tag.to_string()).collect();
        let mut parts = Vec::new();
        for v in &important {
            let m = object_motion(scene.object(v.id).expect("visible object exists"))?;
            parts.push(format!("{} will {} .", v.tag, motion_phrase(&m)));
        }
        (format!("What is the future state of {} ?", tags.join(" and ")), parts.join(" "))
    };
    out.push(QARecord::new(scene, Task::Prediction, QType::Open, true, &pq, &pa));

    if !visible.is_empty() {
        let v = &visible[rng.random_range(0..visible.len())];
        let obj = scene.object(v.id).expect("visible object exists");
        let moving = obj.velocity[0].hypot(obj.velocity[1]) > MOVING_SPEED;
        out.push(QARecord::new(
            scene,
            Task::Prediction,
            QType::YesNo,
            false,
            &format!("Is {} moving ?", v.tag),
            if moving { "Yes" } else { "No" },
        ));
    }

    out.push(QARecord::new(scene, Task::Planning, QType::Open, true, PLANNING_Q, &planning_answer(scene)?));

    let motions: Vec<String> = MotionText::all().iter().map(motion_phrase).collect();
    let ego = motion_phrase(&ego_motion(scene)?);
    let (listed, letter) = options(&ego, &motions, &mut rng);
    out.push(QARecord::new(
        scene,
        Task::Behavior,
        QType::MultipleChoice,
        false,
        &format!("{BEHAVIOR_Q} {OPTIONS_LEAD} {listed}"),
        &letter,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generator::{gen_scene, GenConfig, ObjectState};
    use crate::scene::geometry::Box3D;

    fn empty(seed: u64) -> SceneGraph {
        gen_scene(seed, &GenConfig { objects_min: 0, objects_max: 0, ..GenConfig::default() }).unwrap()
    }

    fn place(scene: &mut SceneGraph, class: ObjectClass, ego_xy: [f64; 2]) {
        let (s, c) = scene.ego_pose.heading.sin_cos();
        let p = scene.ego_pose.position;
        let w = [p[0] + c * ego_xy[0] - s * ego_xy[1], p[1] + s * ego_xy[0] + c * ego_xy[1]];
        let id = scene.objects.len();
        scene.objects.push(ObjectState {
            id,
            class_label: class,
            box3d: Box3D { center: [w[0], w[1], 0.9], size: [0.8, 0.8, 1.8], yaw: scene.ego_pose.heading },
            velocity: [0.0, 0.0],
            traj: vec![w; scene.horizon()],
            confidence: 0.9,
        });
    }

    #[test]
    fn empty_scene_has_no_important_objects() {
        let recs = gen_qa(&empty(0)).unwrap();
        let p = recs.iter().find(|r| r.is_core_perception()).unwrap();
        assert_eq!(p.answer, "There are no important objects .");
        assert!(recs.iter().any(|r| r.is_core_prediction()));
        assert!(recs.iter().any(|r| r.task == Task::Planning));
    }

    #[test]
    fn pedestrian_ahead_means_stop() {
        let mut s = empty(4);
        place(&mut s, ObjectClass::Pedestrian, [12.0, 0.5]);
        let a = planning_answer(&s).unwrap();
        assert!(a.contains("slow down") && a.contains("stop"), "{a}");
        let recs = gen_qa(&s).unwrap();
        let p = recs.iter().find(|r| r.is_core_perception()).unwrap();
        assert!(p.answer.starts_with("The important objects are pedestrian <c1,CAM_FRONT,"), "{}", p.answer);
    }

    #[test]
    fn obstacle_ahead_means_keep_distance() {
        let mut s = empty(5);
        place(&mut s, ObjectClass::Barrier, [10.0, -1.0]);
        assert!(planning_answer(&s).unwrap().contains("safe distance"));
    }

    #[test]
    fn every_generated_tag_resolves() {
        let cfg = GenConfig::default();
        let mut tags = 0;
        for seed in 0..200 {
            let s = gen_scene(seed, &cfg).unwrap();
            for r in gen_qa(&s).unwrap() {
                for t in extract_tags(&r.question).into_iter().chain(extract_tags(&r.answer)) {
                    assert!(resolve_tag(&s, &t), "seed {seed}: {t}");
                    tags += 1;
                }
                assert_eq!(canonicalize(&r.question), r.question);
            }
        }
        assert!(tags > 100, "corpus has too few tags: {tags}");
    }

    #[test]
    fn multiple_choice_answer_points_at_truth() {
        for seed in 0..50 {
            let s = gen_scene(seed, &GenConfig::default()).unwrap();
            for r in gen_qa(&s).unwrap().into_iter().filter(|r| r.qtype == QType::MultipleChoice) {
                let marker = format!("{} . ", r.answer);
                let at = r.question.find(&marker).expect("answer letter listed");
                let rest = &r.question[at + marker.len()..];
                let chosen = LETTERS.iter().filter_map(|l| rest.find(&format!(" {l} . "))).min().map_or(rest, |e| &rest[..e]);
                if r.task == Task::Behavior {
                    assert_eq!(canonicalize(&ego_motion(&s).unwrap().to_string()), chosen);
                } else {
                    let tag = extract_tags(&r.question)[0];
                    assert_eq!(s.object(tag.object_id().unwrap()).unwrap().class_label.noun(), chosen);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = gen_scene(7, &GenConfig::default()).unwrap();
        assert_eq!(gen_qa(&s).unwrap(), gen_qa(&s).unwrap());
    }
}
