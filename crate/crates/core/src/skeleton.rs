//! Skeleton sequences, bone topology, the NTU RGB+D text format, and a seeded
//! generator of synthetic actions.

use crate::rng;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("a sequence needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("a sequence needs at least 2 joints, got {0}")]
    TooFewJoints(usize),
    #[error("coordinate buffer holds {got} points, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("non-finite coordinate at frame {frame}, joint {joint}")]
    NonFinite { frame: usize, joint: usize },
    #[error("class label must be >= 1")]
    InvalidLabel,
    #[error("invalid bone topology: {0}")]
    InvalidTopology(String),
    #[error("speed must be positive, got {0}")]
    InvalidSpeed(f64),
    #[error("invalid class spec: {0}")]
    InvalidClassSpec(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("line {line}: malformed header: {detail}")]
    MalformedHeader { line: usize, detail: String },
    #[error("line {line}: declared {expected} joints but found {found}")]
    JointCountMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: file ends early ({detail})")]
    TruncatedFile { line: usize, detail: String },
    #[error("line {line}: non-finite or unreadable coordinate")]
    NonFiniteCoordinate { line: usize },
    #[error("no usable body: {0}")]
    Sequence(#[from] SkeletonError),
}

/// `T` frames of `X` joints in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSequence {
    frames: usize,
    joints: usize,
    coords: Vec<[f64; 3]>,
    pub label: Option<u32>,
    pub subject_id: Option<u32>,
}

impl SkeletonSequence {
    /// `coords` is frame-major: entry `t * joints + j` is joint `j` at frame `t`.
    pub fn new(joints: usize, coords: Vec<[f64; 3]>) -> Result<Self, SkeletonError> {
        if joints < 2 {
            return Err(SkeletonError::TooFewJoints(joints));
        }
        if !coords.len().is_multiple_of(joints) {
            return Err(SkeletonError::BufferSize {
                expected: (coords.len() / joints + 1) * joints,
                got: coords.len(),
            });
        }
        let frames = coords.len() / joints;
        if frames < 2 {
            return Err(SkeletonError::TooFewFrames(frames));
        }
        if let Some(k) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(SkeletonError::NonFinite {
                frame: k / joints,
                joint: k % joints,
            });
        }
        Ok(Self {
            frames,
            joints,
            coords,
            label: None,
            subject_id: None,
        })
    }

    pub fn with_label(mut self, label: u32) -> Result<Self, SkeletonError> {
        if label == 0 {
            return Err(SkeletonError::InvalidLabel);
        }
        self.label = Some(label);
        Ok(self)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Joint `joint` (0-based) at frame `frame`.
    #[inline]
    pub fn at(&self, frame: usize, joint: usize) -> [f64; 3] {
        self.coords[frame * self.joints + joint]
    }

    pub fn frame(&self, frame: usize) -> &[[f64; 3]] {
        &self.coords[frame * self.joints..(frame + 1) * self.joints]
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    /// Applies `f` to every point; used for translation/scale experiments.
    pub fn map_points(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self, SkeletonError> {
        let mut out = Self::new(self.joints, self.coords.iter().map(|&p| f(p)).collect())?;
        out.label = self.label;
        out.subject_id = self.subject_id;
        Ok(out)
    }

    /// Sum over frames and joints of the frame-to-frame displacement.
    pub fn total_displacement(&self) -> f64 {
        total_displacement(&self.coords, self.joints)
    }
}

fn total_displacement(coords: &[[f64; 3]], joints: usize) -> f64 {
    let frames = coords.len() / joints;
    let mut total = 0.0;
    for t in 1..frames {
        for j in 0..joints {
            let a = coords[(t - 1) * joints + j];
            let b = coords[t * joints + j];
            total += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        }
    }
    total
}

/// Bones as `(child, parent)` pairs of 1-based joint indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoneTopology {
    bones: Vec<(usize, usize)>,
}

impl BoneTopology {
    /// Validates that the bones form a tree over joints `1..=joints` in which
    /// every joint but one root appears exactly once as a child.
    pub fn new(bones: Vec<(usize, usize)>, joints: usize) -> Result<Self, SkeletonError> {
        let bad = |m: String| Err(SkeletonError::InvalidTopology(m));
        if bones.len() + 1 != joints {
            return bad(format!("{} bones for {joints} joints", bones.len()));
        }
        let mut seen_child = vec![false; joints + 1];
        for &(c, p) in &bones {
            if c == 0 || p == 0 || c > joints || p > joints {
                return bad(format!("bone ({c},{p}) outside 1..={joints}"));
            }
            if c == p {
                return bad(format!("self loop at joint {c}"));
            }
            if std::mem::replace(&mut seen_child[c], true) {
                return bad(format!("joint {c} is a child twice"));
            }
        }
        // union-find connectivity
        let mut parent: Vec<usize> = (0..=joints).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(c, p) in &bones {
            let (a, b) = (find(&mut parent, c), find(&mut parent, p));
            if a == b {
                return bad(format!("cycle through bone ({c},{p})"));
            }
            parent[a] = b;
        }
        let root = find(&mut parent, 1);
        if (2..=joints).any(|j| find(&mut parent, j) != root) {
            return bad("graph is not connected".into());
        }
        Ok(Self { bones })
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.bones.len() + 1
    }

    /// The joint that is never a child.
    pub fn root(&self) -> usize {
        let children: BTreeSet<usize> = self.bones.iter().map(|b| b.0).collect();
        (1..=self.joints()).find(|j| !children.contains(j)).unwrap_or(1)
    }
}

/// The 24-bone NTU RGB+D convention over 25 joints, rooted at the spine shoulder (21).
pub fn default_ntu_topology() -> BoneTopology {
    const BONES: [(usize, usize); 24] = [
        (1, 2),
        (2, 21),
        (3, 21),
        (4, 3),
        (5, 21),
        (6, 5),
        (7, 6),
        (8, 7),
        (9, 21),
        (10, 9),
        (11, 10),
        (12, 11),
        (13, 1),
        (14, 13),
        (15, 14),
        (16, 15),
        (17, 1),
        (18, 17),
        (19, 18),
        (20, 19),
        (22, 8),
        (23, 8),
        (24, 12),
        (25, 12),
    ];
    BoneTopology::new(BONES.to_vec(), 25).expect("NTU topology is a tree")
}

/// A chain topology `(2,1), (3,2), ...` for skeletons without a known layout.
pub fn chain_topology(joints: usize) -> Result<BoneTopology, SkeletonError> {
    BoneTopology::new((2..=joints).map(|j| (j, j - 1)).collect(), joints)
}

// ---------------------------------------------------------------------------
// NTU text format

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    /// Next non-blank line with its 1-based number.
    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            if !l.trim().is_empty() {
                self.last = i + 1;
                return Some((i + 1, l));
            }
        }
        None
    }

    fn count(&mut self, what: &str) -> Result<(usize, usize), ParseError> {
        let (line, text) = self.next().ok_or_else(|| ParseError::TruncatedFile {
            line: self.last + 1,
            detail: format!("expected {what}"),
        })?;
        let tok = text.split_whitespace().next().unwrap_or("");
        let n = tok.parse::<usize>().map_err(|_| ParseError::MalformedHeader {
            line,
            detail: format!("{what} {tok:?} is not a non-negative integer"),
        })?;
        Ok((line, n))
    }
}

/// Parses an NTU RGB+D `.skeleton` file.
///
/// With several bodies the one with the largest total frame-to-frame joint
/// displacement is kept (bodies are tracked by the first field of their info
/// line). Frames where that body is absent are dropped.
pub fn parse_ntu_skeleton(text: &str) -> Result<SkeletonSequence, ParseError> {
    let mut lines = Lines::new(text);
    let (_, frame_count) = lines.count("frame count")?;
    // body id -> (frame-major coords, joint count)
    let mut bodies: BTreeMap<String, (Vec<[f64; 3]>, usize)> = BTreeMap::new();
    let mut first_seen: Vec<String> = Vec::new();

    for _ in 0..frame_count {
        let (_, body_count) = lines.count("body count")?;
        for _ in 0..body_count {
            let (_, info) = lines.next().ok_or_else(|| ParseError::TruncatedFile {
                line: lines.last + 1,
                detail: "expected body info line".into(),
            })?;
            let body_id = info.split_whitespace().next().unwrap_or("").to_string();
            let (count_line, joints) = lines.count("joint count")?;
            let mut points = Vec::with_capacity(joints);
            for k in 0..joints {
                let Some((line, text)) = lines.next() else {
                    return Err(ParseError::JointCountMismatch {
                        line: lines.last + 1,
                        expected: joints,
                        found: k,
                    });
                };
                let fields: Vec<&str> = text.split_whitespace().take(3).collect();
                if fields.len() < 3 {
                    return Err(ParseError::JointCountMismatch {
                        line,
                        expected: joints,
                        found: k,
                    });
                }
                let mut p = [0.0; 3];
                for (dst, f) in p.iter_mut().zip(&fields) {
                    *dst = f
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or(ParseError::NonFiniteCoordinate { line })?;
                }
                points.push(p);
            }
            let entry = bodies.entry(body_id.clone()).or_insert_with(|| {
                first_seen.push(body_id.clone());
                (Vec::new(), joints)
            });
            if entry.1 != joints {
                return Err(ParseError::JointCountMismatch {
                    line: count_line,
                    expected: entry.1,
                    found: joints,
                });
            }
            entry.0.extend(points);
        }
    }

    let mut best: Option<(f64, &String)> = None;
    for id in &first_seen {
        let (coords, joints) = &bodies[id];
        let motion = total_displacement(coords, *joints);
        if best.is_none_or(|(m, _)| motion > m) {
            best = Some((motion, id));
        }
    }
    let Some((_, id)) = best else {
        return Err(SkeletonError::TooFewFrames(0).into());
    };
    let (coords, joints) = bodies.remove(&id.clone()).expect("body present");
    let kept = coords.len() / joints.max(1);
    if kept < frame_count {
        log::warn!("dropped {} frames without the tracked body", frame_count - kept);
    }
    Ok(SkeletonSequence::new(joints, coords)?)
}

/// Writes a single-body NTU `.skeleton` file. Coordinates use the shortest
/// representation that parses back to the identical `f64`.
pub fn write_ntu_skeleton(seq: &SkeletonSequence) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", seq.frames());
    for t in 0..seq.frames() {
        s.push_str("1\n");
        s.push_str("1 0 1 1 1 1 0 0.0 0.0 2\n");
        let _ = writeln!(s, "{}", seq.joints());
        for p in seq.frame(t) {
            let _ = writeln!(s, "{:?} {:?} {:?} 0 0 0 0 0 0 0 0 2", p[0], p[1], p[2]);
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Synthetic actions

/// Sinusoidal motion of one joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointMotion {
    /// 1-based joint index.
    pub joint: usize,
    /// Metres.
    pub amplitude: f64,
    /// Cycles per second at speed 1.
    pub frequency: f64,
    /// Radians.
    pub phase: f64,
    pub axis: [f64; 3],
}

/// Parameters of one synthetic action class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub class_id: u32,
    pub base_pose: Vec<[f64; 3]>,
    /// Active joints and their trajectories.
    pub motions: Vec<JointMotion>,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
}

fn default_frame_rate() -> f64 {
    30.0
}

impl ClassSpec {
    pub fn validate(&self) -> Result<(), SkeletonError> {
        let bad = |m: String| Err(SkeletonError::InvalidClassSpec(m));
        if self.class_id == 0 {
            return bad("class_id must be >= 1".into());
        }
        if self.base_pose.len() < 2 {
            return bad("base pose needs at least 2 joints".into());
        }
        if self.motions.is_empty() {
            return bad("active-joint subset is empty".into());
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame rate must be positive".into());
        }
        for m in &self.motions {
            if m.joint == 0 || m.joint > self.base_pose.len() {
                return bad(format!("joint {} outside 1..={}", m.joint, self.base_pose.len()));
            }
            if !(m.amplitude >= 0.0) {
                return bad(format!("negative amplitude on joint {}", m.joint));
            }
        }
        Ok(())
    }
}

/// Evaluates a class trajectory over `frames` frames.
///
/// Joint `j` at frame `t` is
/// `base[j] + Σ amplitude·sin(2π·frequency·speed·t/frame_rate + phase)·axis`
/// over the motions on `j`, plus i.i.d. `N(0, noise_sigma²)` noise drawn from
/// the generator seeded with `seed`.
pub fn synth_action(
    spec: &ClassSpec,
    frames: usize,
    speed: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<SkeletonSequence, SkeletonError> {
    if !(speed > 0.0) {
        return Err(SkeletonError::InvalidSpeed(speed));
    }
    if frames < 2 {
        return Err(SkeletonError::TooFewFrames(frames));
    }
    spec.validate()?;
    let joints = spec.base_pose.len();
    let mut coords = Vec::with_capacity(frames * joints);
    for t in 0..frames {
        coords.extend_from_slice(&spec.base_pose);
        let row = &mut coords[t * joints..];
        let time = t as f64 / spec.frame_rate;
        for m in &spec.motions {
            let s = m.amplitude
                * (2.0 * std::f64::consts::PI * m.frequency * speed * time + m.phase).sin();
            for (c, w) in row[m.joint - 1].iter_mut().zip(m.axis) {
                *c += s * w;
            }
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| SkeletonError::InvalidClassSpec(e.to_string()))?;
        let mut r = rng::rng_from_seed(seed);
        for p in &mut coords {
            for c in p.iter_mut() {
                *c += normal.sample(&mut r);
            }
        }
    }
    let seq = SkeletonSequence::new(joints, coords)?;
    seq.with_label(spec.class_id)
}

/// A neutral standing pose in NTU joint order (metres, camera space).
pub fn ntu_rest_pose() -> Vec<[f64; 3]> {
    vec![
        [0.0, 0.0, 3.0],       // 1 spine base
        [0.0, 0.3, 3.0],       // 2 spine mid
        [0.0, 0.65, 3.0],      // 3 neck
        [0.0, 0.8, 2.98],      // 4 head
        [-0.2, 0.5, 3.0],      // 5 left shoulder
        [-0.25, 0.25, 3.0],    // 6 left elbow
        [-0.28, 0.02, 3.0],    // 7 left wrist
        [-0.29, -0.05, 3.0],   // 8 left hand
        [0.2, 0.5, 3.0],       // 9 right shoulder
        [0.25, 0.25, 3.0],     // 10 right elbow
        [0.28, 0.02, 3.0],     // 11 right wrist
        [0.29, -0.05, 3.0],    // 12 right hand
        [-0.1, -0.05, 3.0],    // 13 left hip
        [-0.11, -0.45, 3.0],   // 14 left knee
        [-0.12, -0.85, 3.0],   // 15 left ankle
        [-0.12, -0.9, 2.9],    // 16 left foot
        [0.1, -0.05, 3.0],     // 17 right hip
        [0.11, -0.45, 3.0],    // 18 right knee
        [0.12, -0.85, 3.0],    // 19 right ankle
        [0.12, -0.9, 2.9],     // 20 right foot
        [0.0, 0.55, 3.0],      // 21 spine shoulder
        [-0.3, -0.12, 3.0],    // 22 left hand tip
        [-0.25, -0.05, 2.97],  // 23 left thumb
        [0.3, -0.12, 3.0],     // 24 right hand tip
        [0.25, -0.05, 2.97],   // 25 right thumb
    ]
}

/// Joint groups that move together in generated classes (1-based, proximal first).
const LIMB_GROUPS: [&[usize]; 6] = [
    &[6, 7, 8, 22, 23],
    &[10, 11, 12, 24, 25],
    &[3, 4],
    &[14, 15, 16],
    &[18, 19, 20],
    &[2, 21, 3, 4, 5, 9],
];

/// Draws a random but well-separated class: one to three limb groups, each
/// with its own axis, amplitude, frequency and phase.
pub fn random_class_spec(class_id: u32, seed: u64) -> ClassSpec {
    let mut r = rng::rng_from_seed(seed);
    let groups = r.random_range(1..=3usize);
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < groups {
        let g = r.random_range(0..LIMB_GROUPS.len());
        if !chosen.contains(&g) {
            chosen.push(g);
        }
    }
    let mut motions = Vec::new();
    for g in chosen {
        let mut axis = [
            r.random_range(-1.0..1.0f64),
            r.random_range(-1.0..1.0f64),
            r.random_range(-1.0..1.0f64),
        ];
        let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        axis.iter_mut().for_each(|v| *v /= norm);
        let amplitude = r.random_range(0.08..0.3);
        let frequency = r.random_range(0.4..1.6);
        let phase = r.random_range(0.0..std::f64::consts::TAU);
        let members = LIMB_GROUPS[g];
        for (k, &joint) in members.iter().enumerate() {
            // distal joints swing further
            let reach = (k + 1) as f64 / members.len() as f64;
            motions.push(JointMotion {
                joint,
                amplitude: amplitude * reach,
                frequency,
                phase,
                axis,
            });
        }
    }
    ClassSpec {
        class_id,
        base_pose: ntu_rest_pose(),
        motions,
        frame_rate: default_frame_rate(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub seed: u64,
    #[serde(default = "one")]
    pub speed: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClass {
    pub class_id: u32,
    pub spec: ClassSpec,
    pub instances: Vec<InstanceSpec>,
}

/// A synthetic dataset description: every class spec plus instance seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    pub frames: usize,
    pub noise_sigma: f64,
    pub classes: Vec<ManifestClass>,
}

impl SynthManifest {
    /// `classes` random classes with `instances` instances each; instance
    /// speeds are drawn uniformly from `[1 − jitter, 1 + jitter]`.
    pub fn random(
        classes: usize,
        instances: usize,
        frames: usize,
        noise_sigma: f64,
        speed_jitter: f64,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, "manifest");
        let classes = (1..=classes as u32)
            .map(|class_id| {
                let spec = random_class_spec(class_id, r.random());
                let instances = (0..instances)
                    .map(|_| InstanceSpec {
                        seed: r.random(),
                        speed: if speed_jitter > 0.0 {
                            r.random_range(1.0 - speed_jitter..=1.0 + speed_jitter)
                        } else {
                            1.0
                        },
                    })
                    .collect();
                ManifestClass {
                    class_id,
                    spec,
                    instances,
                }
            })
            .collect();
        Self {
            frames,
            noise_sigma,
            classes,
        }
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if !ids.insert(c.class_id) {
                return Err(SkeletonError::InvalidManifest(format!(
                    "duplicate class_id {}",
                    c.class_id
                )));
            }
            if c.spec.class_id != c.class_id {
                return Err(SkeletonError::InvalidManifest(format!(
                    "class {} carries a spec for class {}",
                    c.class_id, c.spec.class_id
                )));
            }
            c.spec.validate()?;
            if let Some(i) = c.instances.iter().find(|i| !(i.speed > 0.0)) {
                return Err(SkeletonError::InvalidSpeed(i.speed));
            }
        }
        if self.frames < 2 {
            return Err(SkeletonError::TooFewFrames(self.frames));
        }
        Ok(())
    }

    /// Generates every instance, in manifest order.
    pub fn generate(&self) -> Result<Vec<SkeletonSequence>, SkeletonError> {
        self.validate()?;
        let mut out = Vec::new();
        for c in &self.classes {
            for (k, inst) in c.instances.iter().enumerate() {
                let mut seq =
                    synth_action(&c.spec, self.frames, inst.speed, self.noise_sigma, inst.seed)?;
                seq.subject_id = Some(k as u32 + 1);
                out.push(seq);
            }
        }
        Ok(out)
    }
}
