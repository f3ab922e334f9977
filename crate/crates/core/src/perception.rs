//! Simulated depth camera, detector, and the box → center → depth → world
//! localization pipeline.
//!
//! The camera is orthographic: a camera-frame point `(x, y, z)` lands on pixel
//! `(cx + x / scale, cy - y / scale)` with depth `z`. Image rows grow
//! downward, so image y maps to camera -y.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kinematics::{self, DhChain, KinematicsError, Transform4};
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PerceptionError {
    #[error("pixel ({x:.2}, {y:.2}) is outside the image")]
    OutOfBounds { x: f64, y: f64 },
    #[error("no depth reading at pixel ({x:.2}, {y:.2})")]
    NoDepth { x: f64, y: f64 },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

pub type Result<T> = std::result::Result<T, PerceptionError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    #[default]
    Bright,
    Dim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    #[serde(rename = "class")]
    pub class_label: String,
    #[serde(rename = "center")]
    pub center_world: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    #[serde(default)]
    pub graspable: bool,
}

impl SceneObject {
    pub fn new(
        id: u32,
        class_label: impl Into<String>,
        center_world: Vector3<f64>,
        half_extents: Vector3<f64>,
        graspable: bool,
    ) -> Self {
        Self {
            id,
            class_label: class_label.into(),
            center_world,
            half_extents,
            graspable,
        }
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let c = self.center_world;
        let h = self.half_extents;
        std::array::from_fn(|i| {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            c + Vector3::new(sx * h.x, sy * h.y, sz * h.z)
        })
    }

    /// Top face center (world +z), the contact point for pressing and grasping.
    pub fn top_center(&self) -> Vector3<f64> {
        self.center_world + Vector3::new(0.0, 0.0, self.half_extents.z)
    }
}

/// Objects, lighting and clutter level of a simulated desk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub lighting: Lighting,
    #[serde(default)]
    pub clutter_fraction: f64,
}

impl Scene {
    pub fn new(objects: Vec<SceneObject>, lighting: Lighting, clutter_fraction: f64) -> Result<Self> {
        let scene = Self {
            objects,
            lighting,
            clutter_fraction,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty() -> Self {
        Self {
            objects: Vec::new(),
            lighting: Lighting::Bright,
            clutter_fraction: 0.0,
        }
    }

    /// Two wall switches, a paper cup and the user's hand on the desk, in
    /// bright light without clutter.
    pub fn office() -> Self {
        Self::from_json(include_str!("../assets/office_scene.json")).expect("shipped scene parses")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.clutter_fraction) {
            return Err(PerceptionError::InvalidScene(format!(
                "clutter fraction {} outside [0, 1]",
                self.clutter_fraction
            )));
        }
        let mut ids = HashSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(PerceptionError::InvalidScene(format!("duplicate id {}", o.id)));
            }
            if o.class_label.trim().is_empty() {
                return Err(PerceptionError::InvalidScene(format!("object {} has no class", o.id)));
            }
            if o.half_extents.iter().any(|v| !(*v > 0.0)) {
                return Err(PerceptionError::InvalidScene(format!(
                    "object {} has non-positive extents",
                    o.id
                )));
            }
            if o.center_world.iter().any(|v| !v.is_finite()) {
                return Err(PerceptionError::InvalidScene(format!(
                    "object {} has a non-finite center",
                    o.id
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text).map_err(|e| PerceptionError::InvalidScene(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PerceptionError::InvalidScene(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn find(&self, class_label: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.class_label == class_label)
    }

    pub fn find_mut(&mut self, class_label: &str) -> Option<&mut SceneObject> {
        self.objects.iter_mut().find(|o| o.class_label == class_label)
    }

    pub fn next_id(&self) -> u32 {
        self.objects.iter().map(|o| o.id + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width_px: u32,
    pub height_px: u32,
    /// Meters per pixel.
    pub scale: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            width_px: 640,
            height_px: 480,
            scale: 0.001,
            near: 0.01,
            far: 2.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(PerceptionError::InvalidCamera("zero image size".into()));
        }
        if !(self.scale > 0.0) {
            return Err(PerceptionError::InvalidCamera("scale must be positive".into()));
        }
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(PerceptionError::InvalidCamera("need 0 <= near < far".into()));
        }
        Ok(())
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width_px as f64 / 2.0, self.height_px as f64 / 2.0)
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> (f64, f64) {
        let (cx, cy) = self.principal_point();
        (cx + p_cam.x / self.scale, cy - p_cam.y / self.scale)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width_px as f64 && y < self.height_px as f64
    }
}

/// Axis-aligned image rectangle in (real-valued) pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clips to the image and enforces a minimum 1 px size.
    fn from_corners_clipped(x0: f64, y0: f64, x1: f64, y1: f64, camera: &CameraModel) -> BBox {
        let (wmax, hmax) = (camera.width_px as f64, camera.height_px as f64);
        let clip = |lo: f64, hi: f64, max: f64| {
            let lo = lo.clamp(0.0, max - 1.0);
            let hi = hi.clamp(lo + 1.0, max);
            (lo, hi - lo)
        };
        let (x, w) = clip(x0.min(x1), x0.max(x1), wmax);
        let (y, h) = clip(y0.min(y1), y0.max(y1), hmax);
        BBox { x, y, w, h }
    }
}

/// Rendered ground truth for one visible object.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub object_id: u32,
    pub class_label: String,
    pub bbox: BBox,
    /// Camera-frame depth of the nearest point of the object.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_label: String,
    pub confidence: f64,
}

/// Row-major depth buffer in meters; empty pixels hold the far-plane value.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub far: f64,
    pub depth: Vec<f64>,
}

impl DepthImage {
    pub fn new(camera: &CameraModel) -> Self {
        Self {
            width: camera.width_px,
            height: camera.height_px,
            far: camera.far,
            depth: vec![camera.far; camera.width_px as usize * camera.height_px as usize],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.depth[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, z: f64) {
        self.depth[v as usize * self.width as usize + u as usize] = z;
    }

    fn is_empty_at(&self, u: u32, v: u32) -> bool {
        self.get(u, v) >= self.far
    }

    /// Binary 16-bit PGM with depth in millimeters.
    pub fn write_pgm(&self, mut out: impl Write) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for &z in &self.depth {
            let mm = (z * 1000.0).round().clamp(0.0, 65535.0) as u16;
            out.write_all(&mm.to_be_bytes())?;
        }
        Ok(())
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(file))
    }
}

/// Orthographic render of `scene` seen from `camera_pose_world` (camera → world).
///
/// Each object whose center projects inside the frame and lies within the
/// depth range produces a ground-truth box spanning its projected corners.
/// Its nearest depth is written over the box; nearer objects win per pixel,
/// equal depths keep the lower id.
pub fn render(
    scene: &Scene,
    camera: &CameraModel,
    camera_pose_world: &Transform4,
) -> (Vec<GroundTruthBox>, DepthImage) {
    let world_to_cam = camera_pose_world.inverse();
    let mut image = DepthImage::new(camera);
    let mut boxes = Vec::new();

    let mut objects: Vec<&SceneObject> = scene.objects.iter().collect();
    objects.sort_by_key(|o| o.id);

    for obj in objects {
        let center = world_to_cam.transform_point(&obj.center_world);
        let (cu, cv) = camera.project(&center);
        if !camera.contains(cu, cv) {
            continue;
        }
        let cam_corners = obj.corners().map(|c| world_to_cam.transform_point(&c));
        let depth = cam_corners.iter().map(|c| c.z).fold(f64::INFINITY, f64::min);
        if depth < camera.near || center.z > camera.far {
            continue;
        }
        let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in &cam_corners {
            let (u, v) = camera.project(c);
            u0 = u0.min(u);
            v0 = v0.min(v);
            u1 = u1.max(u);
            v1 = v1.max(v);
        }

        // Pixels whose centers fall inside the projected rectangle.
        let first = |lo: f64| (lo - 0.5).ceil().max(0.0) as u32;
        let last = |hi: f64, max: u32| ((hi - 0.5).floor().min(max as f64 - 1.0)).max(-1.0) as i64;
        let (pu0, pu1) = (first(u0), last(u1, camera.width_px));
        let (pv0, pv1) = (first(v0), last(v1, camera.height_px));
        for v in pv0 as i64..=pv1 {
            for u in pu0 as i64..=pu1 {
                let (u, v) = (u as u32, v as u32);
                if depth < image.get(u, v) {
                    image.set(u, v, depth);
                }
            }
        }

        boxes.push(GroundTruthBox {
            object_id: obj.id,
            class_label: obj.class_label.clone(),
            bbox: BBox::from_corners_clipped(u0, v0, u1, v1, camera),
            depth,
        });
    }
    (boxes, image)
}

/// Detector degradation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub base_confidence: f64,
    pub dim_factor: f64,
    /// Confidence is scaled by `1 - clutter_penalty * clutter_fraction`.
    pub clutter_penalty: f64,
    pub noise_sigma: f64,
    pub threshold: f64,
    /// Uniform +- jitter applied to every box corner, in pixels.
    pub jitter_px: f64,
    /// False "clutter" boxes per unit of clutter fraction.
    pub false_boxes_per_clutter: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            base_confidence: 0.95,
            dim_factor: 0.8,
            clutter_penalty: 0.5,
            noise_sigma: 0.03,
            threshold: 0.5,
            jitter_px: 2.0,
            false_boxes_per_clutter: 10.0,
        }
    }
}

impl DetectorConfig {
    /// Noise-free detector: exact boxes and the deterministic confidence term.
    pub fn noiseless() -> Self {
        Self {
            noise_sigma: 0.0,
            jitter_px: 0.0,
            ..Self::default()
        }
    }

    /// Pre-noise confidence for a scene's conditions.
    pub fn expected_confidence(&self, lighting: Lighting, clutter_fraction: f64) -> f64 {
        let light = match lighting {
            Lighting::Bright => 1.0,
            Lighting::Dim => self.dim_factor,
        };
        self.base_confidence * light * (1.0 - self.clutter_penalty * clutter_fraction)
    }

    pub fn false_box_count(&self, clutter_fraction: f64) -> usize {
        (self.false_boxes_per_clutter * clutter_fraction + 1e-9)
            .floor()
            .max(0.0) as usize
    }
}

const FALSE_BOX_STREAM: u64 = u64::MAX;

/// Degrades ground truth into detector output. Deterministic in `seed`.
pub fn detect(
    ground_truth: &[GroundTruthBox],
    scene: &Scene,
    camera: &CameraModel,
    config: &DetectorConfig,
    seed: u64,
) -> Vec<Detection> {
    detect_scaled(ground_truth, scene, camera, config, seed, |_| 1.0)
}

/// [`detect`] with an extra per-class confidence multiplier applied before
/// thresholding (used for vague referents).
///
/// Every object draws from its own stream keyed by object id, so one
/// object's noise does not depend on which other objects are visible.
pub fn detect_scaled(
    ground_truth: &[GroundTruthBox],
    scene: &Scene,
    camera: &CameraModel,
    config: &DetectorConfig,
    seed: u64,
    class_scale: impl Fn(&str) -> f64,
) -> Vec<Detection> {
    let mean = config.expected_confidence(scene.lighting, scene.clutter_fraction);
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("finite sigma");
    let mut out = Vec::with_capacity(ground_truth.len());

    for gt in ground_truth {
        let mut rng = seed::rng(seed::derive(seed, &[gt.object_id as u64]));
        let z = if config.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        let mut jitter = || {
            if config.jitter_px > 0.0 {
                rng.random_range(-config.jitter_px..=config.jitter_px)
            } else {
                0.0
            }
        };
        let (j0, j1, j2, j3) = (jitter(), jitter(), jitter(), jitter());
        let confidence = ((mean + z) * class_scale(&gt.class_label)).clamp(0.0, 1.0);
        if confidence < config.threshold {
            continue;
        }
        let b = gt.bbox;
        out.push(Detection {
            bbox: BBox::from_corners_clipped(b.x + j0, b.y + j1, b.x + b.w + j2, b.y + b.h + j3, camera),
            class_label: gt.class_label.clone(),
            confidence,
        });
    }

    let mut rng = seed::rng(seed::derive(seed, &[FALSE_BOX_STREAM]));
    let (w, h) = (camera.width_px as f64, camera.height_px as f64);
    for _ in 0..config.false_box_count(scene.clutter_fraction) {
        let bw = rng.random_range(8.0..=(w / 4.0).max(9.0));
        let bh = rng.random_range(8.0..=(h / 4.0).max(9.0));
        let x = rng.random_range(0.0..=(w - bw).max(0.0));
        let y = rng.random_range(0.0..=(h - bh).max(0.0));
        let confidence = rng.random_range(config.threshold..=1.0);
        out.push(Detection {
            bbox: BBox::from_corners_clipped(x, y, x + bw, y + bh, camera),
            class_label: "clutter".into(),
            confidence,
        });
    }
    out
}

/// `(x + w/2, y + h/2)`.
pub fn bbox_center(d: &Detection) -> (f64, f64) {
    (d.bbox.x + d.bbox.w / 2.0, d.bbox.y + d.bbox.h / 2.0)
}

/// Back-projects an image point to the camera frame using a bilinear depth
/// sample. Neighbors without a reading are left out of the interpolation;
/// the pixel under the point itself must have one.
pub fn lift_to_camera(center: (f64, f64), depth: &DepthImage, camera: &CameraModel) -> Result<Vector3<f64>> {
    let (x, y) = center;
    if !camera.contains(x, y) || depth.width != camera.width_px || depth.height != camera.height_px {
        return Err(PerceptionError::OutOfBounds { x, y });
    }
    if depth.is_empty_at(x.floor() as u32, y.floor() as u32) {
        return Err(PerceptionError::NoDepth { x, y });
    }

    let (fx, fy) = (x - 0.5, y - 0.5);
    let (wmax, hmax) = (depth.width as i64 - 1, depth.height as i64 - 1);
    let u0 = (fx.floor() as i64).clamp(0, wmax);
    let v0 = (fy.floor() as i64).clamp(0, hmax);
    let u1 = (u0 + 1).min(wmax);
    let v1 = (v0 + 1).min(hmax);
    let tx = (fx - u0 as f64).clamp(0.0, 1.0);
    let ty = (fy - v0 as f64).clamp(0.0, 1.0);

    let taps = [
        (u0, v0, (1.0 - tx) * (1.0 - ty)),
        (u1, v0, tx * (1.0 - ty)),
        (u0, v1, (1.0 - tx) * ty),
        (u1, v1, tx * ty),
    ];
    let (mut sum, mut weight) = (0.0, 0.0);
    for (u, v, w) in taps {
        let (u, v) = (u as u32, v as u32);
        if w > 0.0 && !depth.is_empty_at(u, v) {
            sum += w * depth.get(u, v);
            weight += w;
        }
    }
    let z = if weight > 0.0 {
        sum / weight
    } else {
        depth.get(x.floor() as u32, y.floor() as u32)
    };

    let (cx, cy) = camera.principal_point();
    Ok(Vector3::new((x - cx) * camera.scale, -(y - cy) * camera.scale, z))
}

/// `T2 = FK(q) * M_c * T1`, truncated to three components.
pub fn camera_to_world(t_cam: &Vector3<f64>, chain: &DhChain, q: &[f64]) -> Result<Vector3<f64>> {
    Ok(kinematics::camera_pose(chain, q)?.transform_point(t_cam))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDetection {
    pub class_label: String,
    pub position_world: Vector3<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NotFoundReason {
    NoDetection,
    NoDepth,
    OutOfBounds,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LocateError {
    #[error("{class_label} not found ({reason:?})")]
    NotFound {
        class_label: String,
        reason: NotFoundReason,
    },
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

/// Camera plus detector, the configuration of the localization pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Locator {
    pub camera: CameraModel,
    pub detector: DetectorConfig,
}

/// What to look for. `grounding` scales the target class's confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Query<'a> {
    pub class_label: &'a str,
    pub grounding: f64,
}

impl<'a> Query<'a> {
    pub fn class(class_label: &'a str) -> Self {
        Self {
            class_label,
            grounding: 1.0,
        }
    }
}

impl Locator {
    pub fn new(camera: CameraModel, detector: DetectorConfig) -> Self {
        Self { camera, detector }
    }

    /// Full pipeline from the arm's current camera pose: render, detect, pick
    /// the best box of the requested class, lift, and map into the base frame.
    ///
    /// Best = highest confidence, then smaller box, then smaller x.
    pub fn locate(
        &self,
        scene: &Scene,
        chain: &DhChain,
        q: &[f64],
        query: &Query<'_>,
        seed: u64,
    ) -> std::result::Result<WorldDetection, LocateError> {
        let pose = kinematics::camera_pose(chain, q).map_err(PerceptionError::from)?;
        let (truth, depth) = render(scene, &self.camera, &pose);
        let target = query.class_label;
        let detections = detect_scaled(&truth, scene, &self.camera, &self.detector, seed, |c| {
            if c == target {
                query.grounding
            } else {
                1.0
            }
        });

        let not_found = |reason| LocateError::NotFound {
            class_label: target.to_string(),
            reason,
        };
        let best = detections
            .iter()
            .filter(|d| d.class_label == target)
            .min_by(|a, b| {
                b.confidence
                    .total_cmp(&a.confidence)
                    .then(a.bbox.area().total_cmp(&b.bbox.area()))
                    .then(a.bbox.x.total_cmp(&b.bbox.x))
            })
            .ok_or_else(|| not_found(NotFoundReason::NoDetection))?;

        let t_cam = match lift_to_camera(bbox_center(best), &depth, &self.camera) {
            Ok(t) => t,
            Err(PerceptionError::NoDepth { .. }) => return Err(not_found(NotFoundReason::NoDepth)),
            Err(PerceptionError::OutOfBounds { .. }) => return Err(not_found(NotFoundReason::OutOfBounds)),
            Err(e) => return Err(e.into()),
        };
        Ok(WorldDetection {
            class_label: best.class_label.clone(),
            position_world: pose.transform_point(&t_cam),
            confidence: best.confidence,
        })
    }
}
