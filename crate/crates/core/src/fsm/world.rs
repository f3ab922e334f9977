use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::kinematics::{forward_kinematics, DhChain, JointVector, KinematicsError};
use crate::nlu::PressEnd;
use crate::perception::{Scene, SceneObject};

/// A press registered when the probe entered a switch from above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressEvent {
    pub tick: u64,
    pub object_id: u32,
    pub class_label: String,
    pub end: PressEnd,
}

/// Read-only view handed to guards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub tick: u64,
    pub q_commanded: JointVector,
    pub q_actual: JointVector,
    pub ee_position: Vector3<f64>,
    /// Class of the object whose top face the probe rests on.
    pub contact: Option<String>,
    pub holding: Option<String>,
    pub divergence: f64,
    pub stuck: bool,
    pub collision: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Held {
    object_id: u32,
    /// Object center minus end-effector position at grasp time.
    offset: Vector3<f64>,
}

/// Simulated arm and desk. Actual joints follow the commanded ones exactly
/// unless a disturbance is injected.
#[derive(Debug, Clone)]
pub struct World {
    chain: DhChain,
    scene: Scene,
    q_cmd: Vec<f64>,
    offsets: Vec<f64>,
    blocked: Vec<Option<f64>>,
    collision: bool,
    over_threshold: u32,
    held: Option<Held>,
    presses: Vec<PressEvent>,
    inside: Vec<u32>,
    tick: u64,
}

/// Limits that turn joint divergence into the stuck flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StuckRule {
    pub threshold: f64,
    pub ticks: u32,
}

impl World {
    pub fn new(chain: DhChain, scene: Scene, q: &[f64]) -> Result<Self, KinematicsError> {
        forward_kinematics(&chain, q)?;
        let n = chain.dof();
        Ok(Self {
            chain,
            scene,
            q_cmd: q.to_vec(),
            offsets: vec![0.0; n],
            blocked: vec![None; n],
            collision: false,
            over_threshold: 0,
            held: None,
            presses: Vec::new(),
            inside: Vec::new(),
            tick: 0,
        })
    }

    pub fn chain(&self) -> &DhChain {
        &self.chain
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    /// The scene as the camera sees it: a held object travels in the gripper
    /// and is not rendered.
    pub fn visible_scene(&self) -> Scene {
        let mut s = self.scene.clone();
        if let Some(h) = self.held {
            s.objects.retain(|o| o.id != h.object_id);
        }
        s
    }

    pub fn q_commanded(&self) -> &[f64] {
        &self.q_cmd
    }

    pub fn q_actual(&self) -> Vec<f64> {
        self.q_cmd
            .iter()
            .zip(&self.offsets)
            .zip(&self.blocked)
            .map(|((q, o), b)| b.unwrap_or(q + o))
            .collect()
    }

    pub fn ee_position(&self) -> Vector3<f64> {
        forward_kinematics(&self.chain, &self.q_actual())
            .expect("joint vector length is fixed")
            .translation()
    }

    pub fn presses(&self) -> &[PressEvent] {
        &self.presses
    }

    pub fn holding(&self) -> Option<&SceneObject> {
        self.held
            .and_then(|h| self.scene.objects.iter().find(|o| o.id == h.object_id))
    }

    /// Adds a constant offset between commanded and actual angle.
    pub fn inject_offset(&mut self, joint: usize, radians: f64) {
        if let Some(o) = self.offsets.get_mut(joint) {
            *o = radians;
        }
    }

    /// Freezes the actual angle of `joint` where it is now.
    pub fn block_joint(&mut self, joint: usize) {
        let actual = self.q_actual();
        if let Some(b) = self.blocked.get_mut(joint) {
            *b = Some(actual[joint]);
        }
    }

    pub fn clear_disturbances(&mut self) {
        self.offsets.iter_mut().for_each(|o| *o = 0.0);
        self.blocked.iter_mut().for_each(|b| *b = None);
        self.over_threshold = 0;
    }

    pub fn set_collision(&mut self, on: bool) {
        self.collision = on;
    }

    pub fn divergence(&self) -> f64 {
        self.q_actual()
            .iter()
            .zip(&self.q_cmd)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max)
    }

    /// Moves the commanded joints toward `goal` along a straight joint-space
    /// line, at most `max_step` radians per joint. Returns true on arrival.
    pub fn drive(&mut self, goal: &[f64], max_step: f64) -> bool {
        let diff: Vec<f64> = goal.iter().zip(&self.q_cmd).map(|(g, q)| g - q).collect();
        let largest = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if largest <= max_step {
            self.q_cmd.copy_from_slice(goal);
            return true;
        }
        let k = max_step / largest;
        for (q, d) in self.q_cmd.iter_mut().zip(&diff) {
            *q += d * k;
        }
        false
    }

    /// Advances time: carries the held object, registers presses and updates
    /// the stuck counter.
    pub fn advance(&mut self, rule: StuckRule) {
        self.tick += 1;
        let ee = self.ee_position();
        if let Some(h) = self.held {
            if let Some(o) = self.scene.objects.iter_mut().find(|o| o.id == h.object_id) {
                o.center_world = ee + h.offset;
            }
        }
        self.register_presses(ee);
        if self.divergence() > rule.threshold {
            self.over_threshold += 1;
        } else {
            self.over_threshold = 0;
        }
    }

    fn register_presses(&mut self, ee: Vector3<f64>) {
        let mut now_inside = Vec::new();
        for o in &self.scene.objects {
            if !is_switch(o) || !inside(o, &ee) {
                continue;
            }
            now_inside.push(o.id);
            if self.inside.contains(&o.id) {
                continue;
            }
            let radial = Vector3::new(o.center_world.x, o.center_world.y, 0.0);
            let along = (ee - o.center_world).dot(&radial.try_normalize(1e-12).unwrap_or_else(Vector3::x));
            self.presses.push(PressEvent {
                tick: self.tick,
                object_id: o.id,
                class_label: o.class_label.clone(),
                end: if along > 0.0 { PressEnd::Far } else { PressEnd::Near },
            });
        }
        self.inside = now_inside;
    }

    /// The point that makes contact: the end effector, or the bottom of the
    /// held object.
    pub fn probe_point(&self) -> Vector3<f64> {
        match self.holding() {
            Some(o) => o.center_world - Vector3::new(0.0, 0.0, o.half_extents.z),
            None => self.ee_position(),
        }
    }

    /// Object whose top face lies within `tolerance` of the probe point and
    /// whose footprint contains it.
    pub fn contact(&self, tolerance: f64) -> Option<&SceneObject> {
        let p = self.probe_point();
        let held = self.held.map(|h| h.object_id);
        self.scene
            .objects
            .iter()
            .filter(|o| Some(o.id) != held)
            .filter(|o| {
                let top = o.center_world.z + o.half_extents.z;
                (p.x - o.center_world.x).abs() <= o.half_extents.x + tolerance
                    && (p.y - o.center_world.y).abs() <= o.half_extents.y + tolerance
                    && (p.z - top).abs() <= tolerance
            })
            .min_by_key(|o| o.id)
    }

    /// Attaches the object in contact if it has class `class_label` and is
    /// graspable.
    pub fn grasp(&mut self, class_label: &str, tolerance: f64) -> bool {
        if self.held.is_some() {
            return false;
        }
        let ee = self.ee_position();
        let Some(o) = self.contact(tolerance) else {
            return false;
        };
        if o.class_label != class_label || !o.graspable {
            return false;
        }
        self.held = Some(Held {
            object_id: o.id,
            offset: o.center_world - ee,
        });
        true
    }

    /// Releases the held object onto whatever lies under it, or leaves it
    /// where it is.
    pub fn release(&mut self, tolerance: f64) -> Option<u32> {
        let h = self.held?;
        let support = self.contact(tolerance).map(|s| s.center_world.z + s.half_extents.z);
        self.held = None;
        if let Some(o) = self.scene.objects.iter_mut().find(|o| o.id == h.object_id) {
            if let Some(top) = support {
                o.center_world.z = top + o.half_extents.z;
            }
        }
        Some(h.object_id)
    }

    pub fn snapshot(&self, rule: StuckRule, touch_tolerance: f64) -> WorldSnapshot {
        WorldSnapshot {
            tick: self.tick,
            q_commanded: JointVector::new(self.q_cmd.clone()),
            q_actual: JointVector::new(self.q_actual()),
            ee_position: self.ee_position(),
            contact: self.contact(touch_tolerance).map(|o| o.class_label.clone()),
            holding: self.holding().map(|o| o.class_label.clone()),
            divergence: self.divergence(),
            stuck: self.over_threshold >= rule.ticks,
            collision: self.collision,
        }
    }
}

fn is_switch(o: &SceneObject) -> bool {
    o.class_label.ends_with("switch")
}

fn inside(o: &SceneObject, p: &Vector3<f64>) -> bool {
    (0..3).all(|i| (p[i] - o.center_world[i]).abs() < o.half_extents[i])
}
