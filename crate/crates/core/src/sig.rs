//! Signal-level images.
//!
//! A skeleton sequence becomes an `H×W×3` byte image with landmarks on the
//! height axis and time on the width axis. The position image stores the
//! min-max normalised joint coordinates; the orientation image stores the
//! angles between each bone and the three coordinate axes.

use crate::skeleton::{BoneTopology, SkeletonSequence};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SigError {
    #[error("bone ({child},{parent}) references a joint outside 1..={joints}")]
    IndexOutOfRange {
        child: usize,
        parent: usize,
        joints: usize,
    },
    #[error("zero-length bone vector")]
    ZeroBone,
    #[error("image widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("image size must be at least 1x1, got {0}x{1}")]
    InvalidSize(usize, usize),
    #[error("pixel buffer holds {got} bytes, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("malformed PPM: {0}")]
    MalformedPpm(String),
}

pub type Result<T> = std::result::Result<T, SigError>;

/// Bone vectors shorter than this (metres) have no direction.
pub const ZERO_BONE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    Position,
    Orientation,
    Fused,
}

impl ImageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageKind::Position => "position",
            ImageKind::Orientation => "orientation",
            ImageKind::Fused => "fused",
        }
    }
}

impl std::str::FromStr for ImageKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "position" => Ok(ImageKind::Position),
            "orientation" => Ok(ImageKind::Orientation),
            "fused" => Ok(ImageKind::Fused),
            other => Err(format!("unknown image kind {other:?}")),
        }
    }
}

/// An `H×W×3` byte image stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalImage {
    height: usize,
    width: usize,
    kind: ImageKind,
    pixels: Vec<u8>,
}

impl SignalImage {
    pub fn new(height: usize, width: usize, kind: ImageKind, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SigError::InvalidSize(height, width));
        }
        if pixels.len() != height * width * 3 {
            return Err(SigError::BufferSize {
                expected: height * width * 3,
                got: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            kind,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, kind: ImageKind, value: u8) -> Result<Self> {
        Self::new(height, width, kind, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 3)
    }

    pub fn kind(&self) -> ImageKind {
        self.kind
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.pixels[(row * self.width + col) * 3 + channel]
    }

    #[inline]
    fn set(&mut self, row: usize, col: usize, channel: usize, v: u8) {
        self.pixels[(row * self.width + col) * 3 + channel] = v;
    }

    /// RGBA bytes for canvas rendering.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.pixels
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect()
    }
}

#[inline]
fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// `coords[t][child] − coords[t][parent]` for every bone (outer) and frame (inner).
pub fn bone_vectors(seq: &SkeletonSequence, topo: &BoneTopology) -> Result<Vec<Vec<[f64; 3]>>> {
    let joints = seq.joints();
    topo.bones()
        .iter()
        .map(|&(child, parent)| {
            if child == 0 || parent == 0 || child > joints || parent > joints {
                return Err(SigError::IndexOutOfRange {
                    child,
                    parent,
                    joints,
                });
            }
            Ok((0..seq.frames())
                .map(|t| {
                    let (c, p) = (seq.at(t, child - 1), seq.at(t, parent - 1));
                    [c[0] - p[0], c[1] - p[1], c[2] - p[2]]
                })
                .collect())
        })
        .collect()
}

/// Angles `(θx, θy, θz)` between a bone and the coordinate axes, each in `[0, π/2]`.
pub fn bone_angles(v: [f64; 3]) -> Result<[f64; 3]> {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(norm >= ZERO_BONE_EPS) {
        return Err(SigError::ZeroBone);
    }
    Ok(v.map(|c| (c.abs() / norm).clamp(0.0, 1.0).acos()))
}

/// Per-bone, per-frame orientation angles.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleField {
    bones: usize,
    frames: usize,
    angles: Vec<[f64; 3]>,
}

impl AngleField {
    pub fn bones(&self) -> usize {
        self.bones
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    #[inline]
    pub fn at(&self, bone: usize, frame: usize) -> [f64; 3] {
        self.angles[bone * self.frames + frame]
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.angles
    }

    /// `bone,frame,theta_x,theta_y,theta_z` rows with 1-based bone and frame.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bone,frame,theta_x,theta_y,theta_z\n");
        for b in 0..self.bones {
            for t in 0..self.frames {
                let a = self.at(b, t);
                let _ = writeln!(s, "{},{},{},{},{}", b + 1, t + 1, a[0], a[1], a[2]);
            }
        }
        s
    }
}

/// Orientation angles of every bone. A zero-length bone repeats its previous
/// frame's angles, or `(π/2, π/2, π/2)` at the first frame.
pub fn angle_field(seq: &SkeletonSequence, topo: &BoneTopology) -> Result<AngleField> {
    let vectors = bone_vectors(seq, topo)?;
    let frames = seq.frames();
    let mut angles = Vec::with_capacity(vectors.len() * frames);
    for bone in &vectors {
        let mut prev = [FRAC_PI_2; 3];
        for &v in bone {
            let a = match bone_angles(v) {
                Ok(a) => a,
                Err(SigError::ZeroBone) => prev,
                Err(e) => return Err(e),
            };
            angles.push(a);
            prev = a;
        }
    }
    Ok(AngleField {
        bones: vectors.len(),
        frames,
        angles,
    })
}

/// Position image: `H = X` joints, `W = T` frames, channel `c` holds
/// `round(255·(v − min_c)/(max_c − min_c))` with the range taken over the
/// whole sequence. A constant channel is all zeros.
pub fn position_image(seq: &SkeletonSequence) -> SignalImage {
    let (frames, joints) = (seq.frames(), seq.joints());
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in seq.coords() {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let mut img = SignalImage::filled(joints, frames, ImageKind::Position, 0).expect("non-empty");
    for t in 0..frames {
        for j in 0..joints {
            let p = seq.at(t, j);
            for c in 0..3 {
                let range = hi[c] - lo[c];
                if range > 0.0 {
                    img.set(j, t, c, round_half_up(255.0 * (p[c] - lo[c]) / range));
                }
            }
        }
    }
    img
}

/// Orientation image: `H = X − 1` bones, `W = T` frames, `round(255·θ/(π/2))`.
pub fn orientation_image(seq: &SkeletonSequence, topo: &BoneTopology) -> Result<SignalImage> {
    let field = angle_field(seq, topo)?;
    Ok(orientation_image_from_angles(&field))
}

pub fn orientation_image_from_angles(field: &AngleField) -> SignalImage {
    let mut img = SignalImage::filled(field.bones(), field.frames(), ImageKind::Orientation, 0)
        .expect("non-empty");
    for b in 0..field.bones() {
        for t in 0..field.frames() {
            let a = field.at(b, t);
            for c in 0..3 {
                img.set(b, t, c, round_half_up(255.0 * a[c] / FRAC_PI_2));
            }
        }
    }
    img
}

/// Source coordinate sampled by destination index `dst` under corner alignment.
#[inline]
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    if dst_len == 1 {
        (src_len - 1) as f64 / 2.0
    } else {
        (dst * (src_len - 1)) as f64 / (dst_len - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling; channels are independent and
/// results are rounded half up.
pub fn resize_bilinear(img: &SignalImage, height: usize, width: usize) -> Result<SignalImage> {
    if height == 0 || width == 0 {
        return Err(SigError::InvalidSize(height, width));
    }
    let (sh, sw) = (img.height, img.width);
    let cols: Vec<(usize, usize, f64)> = (0..width)
        .map(|x| {
            let sx = source_coord(x, sw, width);
            let x0 = sx.floor() as usize;
            (x0, (x0 + 1).min(sw - 1), sx - x0 as f64)
        })
        .collect();
    let mut out = SignalImage::filled(height, width, img.kind, 0)?;
    for y in 0..height {
        let sy = source_coord(y, sh, height);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f64;
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let p = |r: usize, q: usize| f64::from(img.get(r, q, c));
                let top = (1.0 - fx) * p(y0, x0) + fx * p(y0, x1);
                let bottom = (1.0 - fx) * p(y1, x0) + fx * p(y1, x1);
                out.set(y, x, c, round_half_up((1.0 - fy) * top + fy * bottom));
            }
        }
    }
    Ok(out)
}

/// Stacks `pos` above `ori` (heights add) and resizes the result.
pub fn early_fuse(
    pos: &SignalImage,
    ori: &SignalImage,
    height: usize,
    width: usize,
) -> Result<SignalImage> {
    if pos.width != ori.width {
        return Err(SigError::WidthMismatch(pos.width, ori.width));
    }
    let mut pixels = pos.pixels.clone();
    pixels.extend_from_slice(&ori.pixels);
    let stacked = SignalImage::new(pos.height + ori.height, pos.width, ImageKind::Fused, pixels)?;
    resize_bilinear(&stacked, height, width)
}

/// Binary PPM (P6) with a comment line recording kind and source.
pub fn write_ppm(img: &SignalImage, source: &str) -> Vec<u8> {
    let source = source.replace(['\n', '\r'], " ");
    let mut out = format!(
        "P6\n# sigshot kind={} source={}\n{} {}\n255\n",
        img.kind.as_str(),
        source,
        img.width,
        img.height
    )
    .into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Reads a P6 image. The kind comes from a `kind=` comment; images without
/// one load as [`ImageKind::Position`]. Returns the recorded source, if any.
pub fn read_ppm(bytes: &[u8]) -> Result<(SignalImage, Option<String>)> {
    let bad = |m: &str| SigError::MalformedPpm(m.to_string());
    let mut pos = 0;
    let mut tokens = Vec::new();
    let mut kind = ImageKind::Position;
    let mut source = None;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map_or(bytes.len(), |e| pos + e);
            let comment = String::from_utf8_lossy(&bytes[pos + 1..end]).to_string();
            for field in comment.split_whitespace() {
                if let Some(k) = field.strip_prefix("kind=") {
                    kind = k.parse().map_err(|e: String| SigError::MalformedPpm(e))?;
                }
            }
            if let Some(idx) = comment.find("source=") {
                source = Some(comment[idx + 7..].trim().to_string());
            }
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if tokens[0] != "P6" {
        return Err(bad("magic is not P6"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let body = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if body.len() != width * height * 3 {
        return Err(SigError::BufferSize {
            expected: width * height * 3,
            got: body.len(),
        });
    }
    Ok((SignalImage::new(height, width, kind, body.to_vec())?, source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{chain_topology, default_ntu_topology};

    const EPS: f64 = 1e-12;

    #[test]
    fn bone_vectors_subtract_parent() {
        let seq = SkeletonSequence::new(2, vec![[1.0, 2.0, 3.0], [0.0, 2.0, 3.0]].repeat(3)).unwrap();
        let topo = BoneTopology::new(vec![(1, 2)], 2).unwrap();
        let v = bone_vectors(&seq, &topo).unwrap();
        assert_eq!(v, vec![vec![[1.0, 0.0, 0.0]; 3]]);
        let bad = BoneTopology::new(vec![(2, 1), (3, 2)], 3).unwrap();
        assert!(matches!(
            bone_vectors(&seq, &bad),
            Err(SigError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn axis_and_diagonal_angles() {
        let a = bone_angles([1.0, 0.0, 0.0]).unwrap();
        assert!(a[0].abs() < EPS && (a[1] - FRAC_PI_2).abs() < EPS && (a[2] - FRAC_PI_2).abs() < EPS);
        let a = bone_angles([1.0, 1.0, 0.0]).unwrap();
        let q = std::f64::consts::FRAC_PI_4;
        assert!((a[0] - q).abs() < EPS && (a[1] - q).abs() < EPS && (a[2] - FRAC_PI_2).abs() < EPS);
        assert_eq!(bone_angles([0.0, 1e-12, 0.0]), Err(SigError::ZeroBone));
    }

    #[test]
    fn position_image_linear_map() {
        // x spans [-1, 1] across joints; y and z constant
        let frame = vec![[-1.0, 0.5, 2.0], [0.0, 0.5, 2.0], [1.0, 0.5, 2.0]];
        let seq = SkeletonSequence::new(3, frame.repeat(2)).unwrap();
        let img = position_image(&seq);
        assert_eq!(img.shape(), (3, 2, 3));
        assert_eq!([img.get(0, 0, 0), img.get(1, 0, 0), img.get(2, 1, 0)], [0, 128, 255]);
        assert!((0..3).all(|j| img.get(j, 0, 1) == 0 && img.get(j, 1, 2) == 0));
    }

    #[test]
    fn constant_sequence_is_black() {
        let seq = SkeletonSequence::new(4, vec![[0.3, -0.2, 2.0]; 12]).unwrap();
        assert!(position_image(&seq).pixels().iter().all(|&p| p == 0));
    }

    #[test]
    fn orientation_pixels() {
        let seq = SkeletonSequence::new(2, vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]].repeat(4)).unwrap();
        let topo = BoneTopology::new(vec![(1, 2)], 2).unwrap();
        let img = orientation_image(&seq, &topo).unwrap();
        assert_eq!(img.shape(), (1, 4, 3));
        for t in 0..4 {
            assert_eq!([img.get(0, t, 0), img.get(0, t, 1), img.get(0, t, 2)], [0, 255, 255]);
        }
        let s = 1.0 / 3f64.sqrt();
        let seq = SkeletonSequence::new(2, vec![[s, s, s], [0.0; 3]].repeat(2)).unwrap();
        let img = orientation_image(&seq, &topo).unwrap();
        assert_eq!(&img.pixels()[..3], &[155, 155, 155]);
    }

    #[test]
    fn zero_bone_carries_previous_angles() {
        let coords = vec![
            [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], // frame 0: zero bone
            [0.0, 1.0, 0.0], [0.0, 0.0, 0.0], // frame 1: along y
            [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], // frame 2: zero bone again
        ];
        let seq = SkeletonSequence::new(2, coords).unwrap();
        let field = angle_field(&seq, &chain_topology(2).unwrap()).unwrap();
        assert_eq!(field.at(0, 0), [FRAC_PI_2; 3]);
        assert_eq!(field.at(0, 2), field.at(0, 1));
        assert!(field.values().iter().flatten().all(|a| (0.0..=FRAC_PI_2).contains(a)));
    }

    #[test]
    fn resize_examples() {
        let img = SignalImage::new(2, 2, ImageKind::Position, vec![0, 0, 0, 255, 255, 255].repeat(2)).unwrap();
        let r = resize_bilinear(&img, 2, 3).unwrap();
        assert_eq!((r.get(0, 1, 0), r.get(1, 1, 2)), (128, 128));
        assert_eq!((r.get(0, 0, 0), r.get(0, 2, 0)), (0, 255));
        assert_eq!(resize_bilinear(&img, 2, 2).unwrap(), img);
        let flat = SignalImage::filled(5, 7, ImageKind::Orientation, 77).unwrap();
        for (h, w) in [(1, 1), (3, 11), (32, 32), (192, 192)] {
            assert!(resize_bilinear(&flat, h, w).unwrap().pixels().iter().all(|&p| p == 77));
        }
        assert_eq!(resize_bilinear(&img, 0, 3), Err(SigError::InvalidSize(0, 3)));
    }

    #[test]
    fn early_fusion_shapes() {
        let seq = crate::skeleton::synth_action(&crate::skeleton::random_class_spec(1, 3), 30, 1.0, 0.01, 1).unwrap();
        let pos = position_image(&seq);
        let ori = orientation_image(&seq, &default_ntu_topology()).unwrap();
        assert_eq!((pos.height(), ori.height()), (25, 24));
        let fused = early_fuse(&pos, &ori, 49, 30).unwrap();
        assert_eq!(fused.kind(), ImageKind::Fused);
        assert_eq!(&fused.pixels()[..pos.pixels().len()], pos.pixels());
        assert_eq!(early_fuse(&pos, &ori, 192, 192).unwrap().shape(), (192, 192, 3));
        let narrow = resize_bilinear(&ori, 24, 12).unwrap();
        let pos10 = resize_bilinear(&pos, 25, 10).unwrap();
        assert_eq!(early_fuse(&pos10, &narrow, 8, 8), Err(SigError::WidthMismatch(10, 12)));
    }

    #[test]
    fn ppm_round_trip() {
        let img = SignalImage::new(2, 3, ImageKind::Orientation, (0..18).collect()).unwrap();
        let bytes = write_ppm(&img, "S001C001P001R001A041");
        let (back, src) = read_ppm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(src.as_deref(), Some("S001C001P001R001A041"));
        assert!(read_ppm(b"P5\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn angle_csv_layout() {
        let seq = SkeletonSequence::new(2, vec![[1.0, 0.0, 0.0], [0.0; 3]].repeat(2)).unwrap();
        let f = angle_field(&seq, &chain_topology(2).unwrap()).unwrap();
        let csv = f.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,1,0,"));
    }
}
