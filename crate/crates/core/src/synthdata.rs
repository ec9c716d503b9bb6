//! Procedural grasp scenes: parametric objects with named parts, prompts,
//! ground-truth rectangles, a deterministic condition vector, and JSONL
//! datasets with a compositional seen/unseen split.

use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{encode_pose, is_success, GraspPose, PoseVec};

/// Object slots in the scene descriptor.
pub const SCENE_SLOTS: usize = 4;
/// Width of one object descriptor.
pub const SLOT_DIM: usize = 16;
/// Width of the prompt embedding.
pub const PROMPT_DIM: usize = 32;
/// Total condition width.
pub const COND_DIM: usize = SCENE_SLOTS * SLOT_DIM + PROMPT_DIM;

/// Part-name share of the prompt block; the rest encodes the object index.
const PART_DIM: usize = PROMPT_DIM - SCENE_SLOTS;
const PART_WEIGHT: f64 = 0.953_939_201_416_945_6; // sqrt(0.91)
const INDEX_WEIGHT: f64 = 0.3;

/// Gain on object descriptors relative to the unit-norm prompt block.
pub const SCENE_GAIN: f64 = 0.3;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const MAX_GENERATION_RETRIES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Bar,
    Tee,
    Ell,
    Disc,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Bar, Self::Tee, Self::Ell, Self::Disc];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bar => "bar",
            Self::Tee => "tee",
            Self::Ell => "ell",
            Self::Disc => "disc",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn part_names(self) -> Vec<&'static str> {
        template(self).iter().map(|p| p.name).collect()
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape class `{s}`")))
    }
}

/// Part layout in units of object scale: sub-rectangle `(cx, cy, w, h)` and
/// grasp centers. Handles sit toward local −x, heads toward +x; every grasp
/// closes across the local x axis.
struct PartTemplate {
    name: &'static str,
    rect: [f64; 4],
    grasps: &'static [[f64; 2]],
}

const GRASP_W: f64 = 0.5;
const GRASP_H: f64 = 0.3;

fn template(shape: ShapeClass) -> &'static [PartTemplate] {
    const BAR: &[PartTemplate] = &[
        PartTemplate { name: "handle", rect: [-0.35, 0.0, 0.3, 0.25], grasps: &[[-0.35, 0.0]] },
        PartTemplate { name: "body", rect: [0.0, 0.0, 0.4, 0.25], grasps: &[[-0.1, 0.0], [0.1, 0.0]] },
        PartTemplate { name: "head", rect: [0.35, 0.0, 0.3, 0.3], grasps: &[[0.35, 0.0]] },
    ];
    const TEE: &[PartTemplate] = &[
        PartTemplate { name: "handle", rect: [-0.15, 0.0, 0.7, 0.2], grasps: &[[-0.3, 0.0]] },
        PartTemplate { name: "head", rect: [0.38, 0.0, 0.24, 0.8], grasps: &[[0.38, 0.0]] },
    ];
    const ELL: &[PartTemplate] = &[
        PartTemplate { name: "handle", rect: [-0.3, -0.1, 0.4, 0.2], grasps: &[[-0.3, -0.1]] },
        PartTemplate { name: "body", rect: [0.05, -0.1, 0.3, 0.2], grasps: &[[0.05, -0.1]] },
        PartTemplate { name: "head", rect: [0.38, 0.1, 0.24, 0.6], grasps: &[[0.38, 0.1]] },
    ];
    const DISC: &[PartTemplate] = &[
        PartTemplate { name: "body", rect: [-0.05, 0.0, 0.7, 0.7], grasps: &[[-0.05, 0.0]] },
        PartTemplate { name: "head", rect: [0.4, 0.0, 0.2, 0.2], grasps: &[[0.38, 0.0]] },
    ];
    match shape {
        ShapeClass::Bar => BAR,
        ShapeClass::Tee => TEE,
        ShapeClass::Ell => ELL,
        ShapeClass::Disc => DISC,
    }
}

/// A named sub-rectangle with its grasps, both in the object frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub name: String,
    pub rect: GraspPose,
    pub grasps: Vec<GraspPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape_class: ShapeClass,
    pub position: [f64; 2],
    pub scale: f64,
    pub rotation: f64,
    pub parts: Vec<Part>,
}

impl SceneObject {
    pub fn new(shape_class: ShapeClass, position: [f64; 2], scale: f64, rotation: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("object scale must be positive, got {scale}")));
        }
        if !position.iter().all(|v| v.is_finite()) || !rotation.is_finite() {
            return Err(Error::invalid("object pose must be finite"));
        }
        let parts = template(shape_class)
            .iter()
            .map(|p| {
                let s = scale;
                let rect = GraspPose::new(p.rect[0] * s, p.rect[1] * s, p.rect[2] * s, p.rect[3] * s, 0.0)?;
                let grasps = p
                    .grasps
                    .iter()
                    .map(|g| GraspPose::new(g[0] * s, g[1] * s, GRASP_W * s, GRASP_H * s, -FRAC_PI_2))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Part {
                    name: p.name.to_string(),
                    rect,
                    grasps,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape_class,
            position,
            scale,
            rotation,
            parts,
        })
    }

    pub fn part(&self, name: &str) -> Option<&Part> {
        self.parts.iter().find(|p| p.name == name)
    }

    /// Radius of the object's bounding disc.
    pub fn bounding_radius(&self) -> f64 {
        0.5 * std::f64::consts::SQRT_2 * self.scale
    }

    /// Object-frame pose mapped into the scene.
    pub fn to_world(&self, local: &GraspPose) -> GraspPose {
        let (s, c) = self.rotation.sin_cos();
        let x = self.position[0] + c * local.cx() - s * local.cy();
        let y = self.position[1] + s * local.cx() + c * local.cy();
        GraspPose::new(x, y, local.w(), local.h(), local.theta() + self.rotation)
            .expect("rigid motion of a valid pose is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub extent: f64,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub object_index: usize,
    pub part_name: String,
    pub text: String,
}

impl Prompt {
    pub fn new(scene: &Scene, object_index: usize, part_name: &str) -> Result<Self> {
        let obj = scene.objects.get(object_index).ok_or_else(|| {
            Error::invalid(format!(
                "object index {object_index} out of range for {} objects",
                scene.objects.len()
            ))
        })?;
        if obj.part(part_name).is_none() {
            return Err(Error::invalid(format!(
                "{} has no part `{part_name}`",
                obj.shape_class
            )));
        }
        Ok(Self {
            object_index,
            part_name: part_name.to_string(),
            text: format!("grasp the {} at its {part_name}", obj.shape_class),
        })
    }
}

/// A `(shape_class, part_name)` combination.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Combo {
    pub shape_class: ShapeClass,
    pub part_name: String,
}

impl Combo {
    pub fn new(shape_class: ShapeClass, part_name: &str) -> Self {
        Self {
            shape_class,
            part_name: part_name.to_string(),
        }
    }

    pub fn all() -> Vec<Combo> {
        ShapeClass::ALL
            .into_iter()
            .flat_map(|s| s.part_names().into_iter().map(move |p| Combo::new(s, p)))
            .collect()
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.shape_class, self.part_name)
    }
}

impl FromStr for Combo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (shape, part) = s
            .split_once('/')
            .ok_or_else(|| Error::invalid(format!("combination `{s}` is not shape/part")))?;
        let shape: ShapeClass = shape.trim().parse()?;
        let part = part.trim();
        if !shape.part_names().contains(&part) {
            return Err(Error::invalid(format!("{shape} has no part `{part}`")));
        }
        Ok(Combo::new(shape, part))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Seen,
    Unseen,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            Self::Seen => "seen",
            Self::Unseen => "unseen",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub extent: f64,
    pub k_max: usize,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 100.0,
            k_max: 3,
            scale_min: 12.0,
            scale_max: 20.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::invalid(format!("extent must be positive, got {}", self.extent)));
        }
        if !(1..=6).contains(&self.k_max) {
            return Err(Error::invalid(format!("k_max must be in 1..=6, got {}", self.k_max)));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::invalid("scale range must satisfy 0 < min ≤ max"));
        }
        Ok(())
    }

    fn min_separation(&self) -> f64 {
        0.15 * self.extent
    }

    fn random_object<R: Rng + ?Sized>(&self, shape: ShapeClass, rng: &mut R) -> Result<SceneObject> {
        let lo = 0.15 * self.extent;
        let hi = 0.85 * self.extent;
        let position = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
        let scale = rng.random_range(self.scale_min..=self.scale_max);
        let rotation = rng.random_range(0.0..TAU);
        SceneObject::new(shape, position, scale, rotation)
    }
}

/// Places `shapes.len()` objects by rejection sampling.
fn place_objects<R: Rng + ?Sized>(
    config: &SceneConfig,
    shapes: &[ShapeClass],
    rng: &mut R,
) -> Result<Scene> {
    let min_d = config.min_separation();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(shapes.len());
    let mut attempts = 0;
    for &shape in shapes {
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Generation(format!(
                    "could not place {} objects in {MAX_PLACEMENT_ATTEMPTS} attempts",
                    shapes.len()
                )));
            }
            let candidate = config.random_object(shape, rng)?;
            let clear = objects.iter().all(|o| {
                let dx = o.position[0] - candidate.position[0];
                let dy = o.position[1] - candidate.position[1];
                (dx * dx + dy * dy).sqrt() >= min_d
            });
            if clear {
                objects.push(candidate);
                break;
            }
        }
    }
    Ok(Scene {
        extent: config.extent,
        objects,
    })
}

/// Random scene with `1..=k_max` objects of uniformly drawn shapes.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let k = rng.random_range(1..=config.k_max);
    let shapes: Vec<ShapeClass> = (0..k)
        .map(|_| ShapeClass::ALL[rng.random_range(0..ShapeClass::ALL.len())])
        .collect();
    place_objects(config, &shapes, rng)
}

/// Ground-truth grasps for the prompted part, in scene coordinates.
pub fn ground_truth_grasp(scene: &Scene, prompt: &Prompt) -> Result<Vec<GraspPose>> {
    let obj = scene.objects.get(prompt.object_index).ok_or_else(|| {
        Error::invalid(format!("object index {} out of range", prompt.object_index))
    })?;
    let part = obj.part(&prompt.part_name).ok_or_else(|| {
        Error::invalid(format!(
            "{} has no part `{}`",
            obj.shape_class, prompt.part_name
        ))
    })?;
    Ok(part.grasps.iter().map(|g| obj.to_world(g)).collect())
}

/// Stable 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit-norm pseudo-random direction for a part name.
pub fn part_embedding(part_name: &str) -> [f64; PART_DIM] {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(part_name.as_bytes()));
    let mut v = [0.0; PART_DIM];
    for x in v.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Prompt block: weighted part direction plus an object-index one-hot.
pub fn prompt_embedding(prompt: &Prompt) -> Result<[f64; PROMPT_DIM]> {
    if prompt.object_index >= SCENE_SLOTS {
        return Err(Error::invalid(format!(
            "object index {} exceeds the {SCENE_SLOTS} descriptor slots",
            prompt.object_index
        )));
    }
    let mut out = [0.0; PROMPT_DIM];
    for (o, p) in out.iter_mut().zip(part_embedding(&prompt.part_name)) {
        *o = PART_WEIGHT * p;
    }
    out[PART_DIM + prompt.object_index] = INDEX_WEIGHT;
    Ok(out)
}

fn object_descriptor(obj: &SceneObject, extent: f64) -> [f64; SLOT_DIM] {
    let mut d = [0.0; SLOT_DIM];
    let r = obj.rotation;
    d[0] = 2.0 * obj.position[0] / extent - 1.0;
    d[1] = 2.0 * obj.position[1] / extent - 1.0;
    d[2] = 10.0 * obj.scale / extent - 1.5;
    d[3] = r.sin();
    d[4] = r.cos();
    d[5] = (2.0 * r).sin();
    d[6] = (2.0 * r).cos();
    d[7 + obj.shape_class.index()] = 1.0;
    d[11] = 1.0;
    d.iter_mut().for_each(|v| *v *= SCENE_GAIN);
    d
}

/// Condition vector: four object descriptors, zero-padded, then the prompt
/// block.
pub fn encode_condition(scene: &Scene, prompt: &Prompt) -> Result<Vec<f64>> {
    if scene.objects.len() > SCENE_SLOTS {
        return Err(Error::invalid(format!(
            "scene has {} objects; the descriptor holds {SCENE_SLOTS}",
            scene.objects.len()
        )));
    }
    Prompt::new(scene, prompt.object_index, &prompt.part_name)?;
    let mut y = vec![0.0; COND_DIM];
    for (k, obj) in scene.objects.iter().enumerate() {
        y[k * SLOT_DIM..(k + 1) * SLOT_DIM].copy_from_slice(&object_descriptor(obj, scene.extent));
    }
    y[SCENE_SLOTS * SLOT_DIM..].copy_from_slice(&prompt_embedding(prompt)?);
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scene: Scene,
    pub prompt: Prompt,
    pub condition: Vec<f64>,
    pub gt_grasps: Vec<GraspPose>,
    pub split_tag: SplitTag,
}

impl Sample {
    pub fn combo(&self) -> Combo {
        Combo::new(
            self.scene.objects[self.prompt.object_index].shape_class,
            &self.prompt.part_name,
        )
    }

    /// Ground-truth grasps in normalized pose coordinates.
    pub fn encoded_targets(&self) -> Result<Vec<PoseVec>> {
        self.gt_grasps
            .iter()
            .map(|g| encode_pose(g, self.scene.extent))
            .collect()
    }

    /// Checks the stored condition and ground truth against the generator.
    pub fn validate(&self) -> Result<()> {
        let y = encode_condition(&self.scene, &self.prompt)?;
        if y != self.condition {
            return Err(Error::invalid("stored condition does not match the scene and prompt"));
        }
        if self.gt_grasps.is_empty() {
            return Err(Error::invalid("sample has no ground-truth grasps"));
        }
        if ground_truth_grasp(&self.scene, &self.prompt)? != self.gt_grasps {
            return Err(Error::invalid("stored grasps do not match the prompted part"));
        }
        Ok(())
    }
}

/// Held-out combinations and the share of samples drawn from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub held_out: Vec<Combo>,
    pub unseen_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            held_out: vec![Combo::new(ShapeClass::Tee, "head"), Combo::new(ShapeClass::Ell, "handle")],
            unseen_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.unseen_fraction) {
            return Err(Error::invalid(format!(
                "unseen fraction must be in [0, 1], got {}",
                self.unseen_fraction
            )));
        }
        let all = Combo::all();
        for c in &self.held_out {
            if !all.contains(c) {
                return Err(Error::invalid(format!("unknown combination {c}")));
            }
        }
        if self.seen_combos().is_empty() {
            return Err(Error::invalid("every combination is held out"));
        }
        if self.unseen_fraction > 0.0 && self.held_out.is_empty() {
            return Err(Error::invalid("unseen samples requested but nothing is held out"));
        }
        Ok(())
    }

    pub fn seen_combos(&self) -> Vec<Combo> {
        Combo::all()
            .into_iter()
            .filter(|c| !self.held_out.contains(c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub split: SplitSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.scene.k_max > SCENE_SLOTS {
            return Err(Error::invalid(format!(
                "k_max {} exceeds the {SCENE_SLOTS} condition slots",
                self.scene.k_max
            )));
        }
        self.split.validate()
    }
}

/// Per-sample stream: any sharding of indices reproduces the same samples.
pub fn sample_rng(seed: u64, index: u64, retry: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ retry.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

fn generate_sample_once<R: Rng + ?Sized>(config: &DatasetConfig, rng: &mut R) -> Result<Sample> {
    let split = &config.split;
    let unseen = split.unseen_fraction > 0.0 && rng.random::<f64>() < split.unseen_fraction;
    let pool = if unseen {
        split.held_out.clone()
    } else {
        split.seen_combos()
    };
    let target = pool[rng.random_range(0..pool.len())].clone();
    let k = rng.random_range(1..=config.scene.k_max);
    let target_index = rng.random_range(0..k);
    let shapes: Vec<ShapeClass> = (0..k)
        .map(|i| {
            if i == target_index {
                target.shape_class
            } else {
                ShapeClass::ALL[rng.random_range(0..ShapeClass::ALL.len())]
            }
        })
        .collect();
    let scene = place_objects(&config.scene, &shapes, rng)?;
    let prompt = Prompt::new(&scene, target_index, &target.part_name)?;
    let condition = encode_condition(&scene, &prompt)?;
    let gt_grasps = ground_truth_grasp(&scene, &prompt)?;
    Ok(Sample {
        scene,
        prompt,
        condition,
        gt_grasps,
        split_tag: if unseen { SplitTag::Unseen } else { SplitTag::Seen },
    })
}

/// Sample `index` of the dataset with master seed `seed`.
pub fn generate_sample(config: &DatasetConfig, seed: u64, index: u64) -> Result<Sample> {
    config.validate()?;
    let mut last = None;
    for retry in 0..MAX_GENERATION_RETRIES {
        let mut rng = sample_rng(seed, index, retry);
        match generate_sample_once(config, &mut rng) {
            Ok(s) => return Ok(s),
            Err(Error::Generation(msg)) => last = Some(msg),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(last.unwrap_or_default()))
}

pub fn generate_samples(config: &DatasetConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n as u64).map(|i| generate_sample(config, seed, i)).collect()
}

/// [`generate_samples`] split over up to `threads` workers; output is
/// identical for any thread count.
pub fn generate_samples_threaded(config: &DatasetConfig, n: usize, seed: u64, threads: usize) -> Result<Vec<Sample>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return generate_samples(config, n, seed);
    }
    let chunk = n.div_ceil(threads) as u64;
    let parts: Vec<Result<Vec<Sample>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads as u64)
            .map(|k| {
                let lo = (k * chunk).min(n as u64);
                let hi = ((k + 1) * chunk).min(n as u64);
                scope.spawn(move || (lo..hi).map(|i| generate_sample(config, seed, i)).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("generation worker panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub total: usize,
    pub seen: usize,
    pub unseen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: DatasetConfig,
    pub counts: SplitCounts,
    pub held_out: Vec<String>,
    pub dataset_file: String,
    pub sha256: String,
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One JSON object per line, newline-terminated.
pub fn to_jsonl(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let line = serde_json::to_string(s).map_err(|source| Error::Json {
            context: "serializing sample".into(),
            source,
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Generates `n` samples and writes the dataset and its manifest into `dir`.
pub fn build_dataset(n: usize, config: &DatasetConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    build_dataset_threaded(n, config, seed, dir, 1)
}

pub fn build_dataset_threaded(n: usize, config: &DatasetConfig, seed: u64, dir: &Path, threads: usize) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    config.validate()?;
    let samples = generate_samples_threaded(config, n, seed, threads)?;
    let unseen = samples.iter().filter(|s| s.split_tag == SplitTag::Unseen).count();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let body = to_jsonl(&samples)?;
    let data_path = dir.join(DATASET_FILE);
    write_atomic(&data_path, body.as_bytes())?;
    let manifest = Manifest {
        seed,
        config: config.clone(),
        counts: SplitCounts {
            total: n,
            seen: n - unseen,
            unseen,
        },
        held_out: config.split.held_out.iter().map(Combo::to_string).collect(),
        dataset_file: DATASET_FILE.to_string(),
        sha256: sha256_hex(body.as_bytes()),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        context: "serializing manifest".into(),
        source,
    })?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// A loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub path: PathBuf,
}

impl Dataset {
    /// Loads `dataset.jsonl` from a directory, or a JSONL file directly.
    pub fn load(path: &Path) -> Result<Self> {
        let file_path = if path.is_dir() {
            path.join(DATASET_FILE)
        } else {
            path.to_path_buf()
        };
        let f = fs::File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line).map_err(|source| Error::Json {
                context: format!("{} line {}", file_path.display(), i + 1),
                source,
            })?;
            samples.push(s);
        }
        if samples.is_empty() {
            return Err(Error::invalid(format!("{} holds no samples", file_path.display())));
        }
        Ok(Self {
            samples,
            path: file_path,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, tag: SplitTag) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split_tag == tag).collect()
    }

    pub fn cond_dim(&self) -> usize {
        self.samples[0].condition.len()
    }

    /// Combinations present in the given split.
    pub fn combos(&self, tag: SplitTag) -> BTreeSet<Combo> {
        self.split(tag).into_iter().map(Sample::combo).collect()
    }
}

/// Ground truth always clears the success predicate against itself.
pub fn self_consistent(sample: &Sample) -> bool {
    sample
        .gt_grasps
        .iter()
        .all(|g| is_success(g, &sample.gt_grasps).unwrap_or(false))
}
