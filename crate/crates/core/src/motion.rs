//! Pose feature layout, motion containers and temporal segmentation.
//!
//! Each frame of a person's motion is a flat feature row laid out as
//!
//! ```text
//! [ positions 3·J | velocities 3·J | 6D rotations 6·J | foot contacts 4 ]
//! ```
//!
//! with `J` the joint count. Positions are world-frame meters (y up), and
//! velocities are first differences of positions with frame 0 set to zero.

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Number of binary foot-contact channels per frame.
pub const CONTACT_CHANNELS: usize = 4;

/// Width of a pose feature row for `joint_count` joints (`12·J + 4`).
pub fn feature_dim(joint_count: usize) -> Result<usize> {
    if joint_count == 0 {
        return Err(Error::invalid("joint_count must be positive"));
    }
    Ok(12 * joint_count + CONTACT_CHANNELS)
}

/// Channel offsets of one feature row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub joint_count: usize,
}

impl FeatureLayout {
    pub fn new(joint_count: usize) -> Result<Self> {
        feature_dim(joint_count)?;
        Ok(Self { joint_count })
    }

    pub fn dim(&self) -> usize {
        12 * self.joint_count + CONTACT_CHANNELS
    }

    pub fn position(&self, joint: usize) -> usize {
        3 * joint
    }

    pub fn velocity(&self, joint: usize) -> usize {
        3 * self.joint_count + 3 * joint
    }

    pub fn rotation(&self, joint: usize) -> usize {
        6 * self.joint_count + 6 * joint
    }

    pub fn contacts(&self) -> usize {
        12 * self.joint_count
    }
}

/// One person's motion: `S` frames of `12·J + 4` features.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    joint_count: usize,
    fps: f32,
    frames: Vec<f32>,
}

impl MotionSequence {
    pub fn new(joint_count: usize, fps: f32, frames: Vec<f32>) -> Result<Self> {
        let dim = feature_dim(joint_count)?;
        if frames.is_empty() || frames.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "frame buffer of {} values is not a positive multiple of feature width {dim}",
                frames.len()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(Self { joint_count, fps, frames })
    }

    /// Converts a `S × D` matrix; values are rounded to `f32`.
    pub fn from_mat(joint_count: usize, fps: f32, m: &Mat) -> Result<Self> {
        let dim = feature_dim(joint_count)?;
        if m.cols() != dim {
            return Err(Error::invalid(format!("matrix width {} != feature width {dim}", m.cols())));
        }
        Self::new(joint_count, fps, m.data().iter().map(|&v| v as f32).collect())
    }

    /// Projects raw (e.g. generated) features onto the valid representation:
    /// positions kept, velocities recomputed as first differences, rotation
    /// blocks re-orthonormalized (identity when degenerate) and contacts
    /// thresholded at 0.5.
    pub fn canonicalize(joint_count: usize, fps: f32, m: &Mat) -> Result<Self> {
        let lay = FeatureLayout::new(joint_count)?;
        if m.cols() != lay.dim() {
            return Err(Error::invalid(format!("matrix width {} != feature width {}", m.cols(), lay.dim())));
        }
        if !m.is_finite() {
            return Err(Error::numeric("cannot canonicalize non-finite features"));
        }
        let mut frames: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
        let d = lay.dim();
        for f in 0..m.rows() {
            for j in 0..joint_count {
                for axis in 0..3 {
                    let p = lay.position(j) + axis;
                    let v = if f == 0 {
                        0.0
                    } else {
                        frames[f * d + p] as f64 - frames[(f - 1) * d + p] as f64
                    };
                    frames[f * d + lay.velocity(j) + axis] = v as f32;
                }
                let o = f * d + lay.rotation(j);
                let mut six = [0.0f64; 6];
                for (dst, src) in six.iter_mut().zip(&frames[o..o + 6]) {
                    *dst = *src as f64;
                }
                let rot = rotation_from_6d(&six).unwrap_or([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
                for (dst, v) in frames[o..o + 6].iter_mut().zip(rotation_to_6d(&rot)) {
                    *dst = v as f32;
                }
            }
            for c in &mut frames[f * d + lay.contacts()..(f + 1) * d] {
                *c = if *c >= 0.5 { 1.0 } else { 0.0 };
            }
        }
        Self::new(joint_count, fps, frames)
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(
            self.frame_count(),
            self.feature_dim(),
            self.frames.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout { joint_count: self.joint_count }
    }

    pub fn feature_dim(&self) -> usize {
        12 * self.joint_count + CONTACT_CHANNELS
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len() / self.feature_dim()
    }

    pub fn raw(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let d = self.feature_dim();
        &self.frames[f * d..(f + 1) * d]
    }

    pub fn position(&self, frame: usize, joint: usize) -> [f64; 3] {
        let o = self.layout().position(joint);
        let row = self.frame(frame);
        [row[o] as f64, row[o + 1] as f64, row[o + 2] as f64]
    }

    /// Global joint positions as `[frame][joint]`.
    pub fn joint_positions(&self) -> JointPositions {
        let s = self.frame_count();
        let j = self.joint_count;
        let mut data = Vec::with_capacity(s * j);
        for f in 0..s {
            for k in 0..j {
                data.push(self.position(f, k));
            }
        }
        JointPositions { frames: s, joints: j, data }
    }

    /// Checks the per-frame feature invariants: binary contacts, valid 6D
    /// rotation blocks and velocities equal to first differences.
    pub fn check_invariants(&self, velocity_tol: f64) -> Result<()> {
        let lay = self.layout();
        for f in 0..self.frame_count() {
            let row = self.frame(f);
            for (c, &v) in row[lay.contacts()..].iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::contract(format!("frame {f}: contact {c} = {v} is not binary")));
                }
            }
            for j in 0..self.joint_count {
                let o = lay.rotation(j);
                let mut six = [0.0f64; 6];
                for (d, s) in six.iter_mut().zip(&row[o..o + 6]) {
                    *d = *s as f64;
                }
                let det = rotation_from_6d(&six).map(|m| det3(&m)).unwrap_or(0.0);
                if (det - 1.0).abs() > 1e-5 {
                    return Err(Error::contract(format!(
                        "frame {f}: joint {j} rotation determinant {det}"
                    )));
                }
                for axis in 0..3 {
                    let expected = if f == 0 {
                        0.0
                    } else {
                        self.position(f, j)[axis] - self.position(f - 1, j)[axis]
                    };
                    let got = row[lay.velocity(j) + axis] as f64;
                    if (got - expected).abs() > velocity_tol {
                        return Err(Error::contract(format!(
                            "frame {f}: joint {j} velocity axis {axis} = {got}, expected {expected}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Joint coordinates of one person, `frames × joints` points.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPositions {
    pub frames: usize,
    pub joints: usize,
    pub data: Vec<[f64; 3]>,
}

impl JointPositions {
    pub fn new(frames: usize, joints: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != frames * joints {
            return Err(Error::invalid("joint position buffer does not match frames × joints"));
        }
        Ok(Self { frames, joints, data })
    }

    #[inline]
    pub fn at(&self, frame: usize, joint: usize) -> [f64; 3] {
        self.data[frame * self.joints + joint]
    }

    pub fn translated(&self, v: [f64; 3]) -> Self {
        let data = self.data.iter().map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]]).collect();
        Self { frames: self.frames, joints: self.joints, data }
    }
}

/// A two-person motion sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DualMotion {
    pub id: String,
    pub person1: MotionSequence,
    pub person2: MotionSequence,
}

impl DualMotion {
    pub fn new(id: impl Into<String>, person1: MotionSequence, person2: MotionSequence) -> Result<Self> {
        if person1.joint_count != person2.joint_count
            || person1.frame_count() != person2.frame_count()
            || person1.fps != person2.fps
        {
            return Err(Error::invalid("persons must share frame count, joint count and fps"));
        }
        Ok(Self { id: id.into(), person1, person2 })
    }

    pub fn frame_count(&self) -> usize {
        self.person1.frame_count()
    }

    pub fn joint_count(&self) -> usize {
        self.person1.joint_count
    }

    pub fn fps(&self) -> f32 {
        self.person1.fps
    }

    pub fn feature_dim(&self) -> usize {
        self.person1.feature_dim()
    }

    pub fn persons(&self) -> [&MotionSequence; 2] {
        [&self.person1, &self.person2]
    }

    /// Euclidean distance between the two root joints at `frame`.
    pub fn root_distance(&self, frame: usize) -> f64 {
        let a = self.person1.position(frame, 0);
        let b = self.person2.position(frame, 0);
        dist3(a, b)
    }
}

/// `K` contiguous half-open frame intervals covering `[0, S)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    frame_count: usize,
    bounds: Vec<(usize, usize)>,
}

/// Splits `frame_count` frames into `k` segments with floor boundaries;
/// segment `i` covers `[⌊i·S/K⌋, ⌊(i+1)·S/K⌋)`.
pub fn segment_bounds(frame_count: usize, k: usize) -> Result<SegmentLayout> {
    if k < 1 {
        return Err(Error::invalid("segment count must be at least 1"));
    }
    if k > frame_count {
        return Err(Error::invalid(format!("segment count {k} exceeds frame count {frame_count}")));
    }
    let bounds = (0..k).map(|i| (i * frame_count / k, (i + 1) * frame_count / k)).collect();
    Ok(SegmentLayout { frame_count, bounds })
}

impl SegmentLayout {
    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    /// Index of the segment containing `frame`.
    pub fn segment_of(&self, frame: usize) -> usize {
        self.bounds
            .iter()
            .position(|&(lo, hi)| frame >= lo && frame < hi)
            .unwrap_or_else(|| panic!("frame {frame} outside layout of {} frames", self.frame_count))
    }
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Gram-Schmidt reconstruction of a rotation matrix (columns) from its
/// first two columns. `None` for degenerate input.
pub fn rotation_from_6d(six: &[f64; 6]) -> Option<[[f64; 3]; 3]> {
    let a1 = [six[0], six[1], six[2]];
    let a2 = [six[3], six[4], six[5]];
    let n1 = norm(a1);
    if n1 < 1e-9 {
        return None;
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = dot(b1, a2);
    let u2 = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm(u2);
    if n2 < 1e-9 {
        return None;
    }
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = cross(b1, b2);
    Some([b1, b2, b3])
}

/// The 6D encoding (first two columns) of a rotation given by its columns.
pub fn rotation_to_6d(cols: &[[f64; 3]; 3]) -> [f64; 6] {
    [cols[0][0], cols[0][1], cols[0][2], cols[1][0], cols[1][1], cols[1][2]]
}

fn det3(cols: &[[f64; 3]; 3]) -> f64 {
    dot(cols[0], cross(cols[1], cols[2]))
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}
