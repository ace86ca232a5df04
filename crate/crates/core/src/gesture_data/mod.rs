//! Motion representation: skeleton layouts, rotation-matrix gesture
//! sequences, their flat per-frame form, resampling, BVH ingestion, the
//! native text format, and a synthetic dataset generator.

mod bvh;
mod io;
mod rotation;
mod synth;

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

pub use bvh::{parse_bvh, parse_bvh_document, BvhDocument, BvhJoint};
pub use io::{read_gesture, read_matrix, write_gesture, write_matrix, GESTURE_MAGIC};
pub use rotation::{
    axis_rotation, det, euler_to_rotmat, exp_map, geodesic_distance, matmul, rotation_error,
    rotmat_to_euler, transpose, EulerOrder, Mat3, IDENTITY,
};
pub use synth::{
    angular_speed, pearson, synth_dataset, synth_dataset_with, SynthConfig, SynthSample,
};

use crate::error::{Error, Result};

/// Tolerance used for the rotation-matrix invariants.
pub const ROTATION_TOL: f64 = 1e-4;

const BODY_JOINTS: [&str; 27] = [
    "Hips", "Spine", "Spine1", "Spine2", "Spine3", "Neck", "Neck1", "Head", "HeadEnd",
    "RightShoulder", "RightArm", "RightForeArm", "RightHand", "LeftShoulder", "LeftArm",
    "LeftForeArm", "LeftHand", "RightUpLeg", "RightLeg", "RightFoot", "RightForeFoot",
    "RightToeBase", "LeftUpLeg", "LeftLeg", "LeftFoot", "LeftForeFoot", "LeftToeBase",
];

const UPPER_BODY_JOINTS: [&str; 14] = [
    "Spine", "Spine1", "Spine2", "Spine3", "Neck", "Head", "RightShoulder", "RightArm",
    "RightForeArm", "RightHand", "LeftShoulder", "LeftArm", "LeftForeArm", "LeftHand",
];

fn hand_joints() -> Vec<String> {
    let mut out = Vec::with_capacity(48);
    for side in ["Right", "Left"] {
        for finger in ["Thumb", "Index", "Middle", "Ring", "Pinky"] {
            for k in 1..=4 {
                out.push(format!("{side}Hand{finger}{k}"));
            }
        }
        for finger in ["Index", "Middle", "Ring", "Pinky"] {
            out.push(format!("{side}InHand{finger}"));
        }
    }
    out
}

/// Joint naming and the body (non-hand) subset of a skeleton.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonLayout {
    joint_names: Vec<String>,
    body_subset: Vec<usize>,
}

impl SkeletonLayout {
    pub fn new(joint_names: Vec<String>, body_subset: Vec<usize>) -> Result<Self> {
        if joint_names.is_empty() {
            return Err(Error::config("skeleton layout needs at least one joint"));
        }
        let mut seen = vec![false; joint_names.len()];
        for &i in &body_subset {
            if i >= joint_names.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::config(format!("body_subset index {i} is out of range or repeated")));
            }
        }
        Ok(Self { joint_names, body_subset })
    }

    /// 27 body joints followed by 48 hand joints.
    pub fn whole_body() -> Self {
        let mut names: Vec<String> = BODY_JOINTS.iter().map(|s| s.to_string()).collect();
        names.extend(hand_joints());
        Self { joint_names: names, body_subset: (0..27).collect() }
    }

    /// 14 upper-body joints followed by 48 hand joints.
    pub fn upper_body() -> Self {
        let mut names: Vec<String> = UPPER_BODY_JOINTS.iter().map(|s| s.to_string()).collect();
        names.extend(hand_joints());
        Self { joint_names: names, body_subset: (0..14).collect() }
    }

    /// Generic layout with `joints` joints named `j0..`, all in the body subset.
    pub fn generic(joints: usize) -> Result<Self> {
        Self::new((0..joints).map(|i| format!("j{i}")).collect(), (0..joints).collect())
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "whole" | "whole-body" => Ok(Self::whole_body()),
            "upper" | "upper-body" => Ok(Self::upper_body()),
            other => match other.strip_prefix("generic") {
                Some(n) => Self::generic(n.parse().map_err(|_| Error::config(format!("bad layout {other:?}")))?),
                None => Err(Error::config(format!("unknown layout {other:?}"))),
            },
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn body_subset(&self) -> &[usize] {
        &self.body_subset
    }

    /// Width of one flattened frame.
    pub fn flat_dim(&self) -> usize {
        self.joint_count() * 9
    }
}

/// Frames × joints rotation matrices with a frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureSequence {
    layout: Arc<SkeletonLayout>,
    fps: f64,
    rotations: Vec<Mat3>,
}

impl GestureSequence {
    /// Builds and validates a sequence; `rotations` is frame-major.
    pub fn new(layout: Arc<SkeletonLayout>, fps: f64, rotations: Vec<Mat3>) -> Result<Self> {
        let seq = Self::new_unchecked(layout, fps, rotations)?;
        seq.validate()?;
        Ok(seq)
    }

    /// Builds a sequence checking only shape and fps, not rotation validity.
    pub fn new_unchecked(layout: Arc<SkeletonLayout>, fps: f64, rotations: Vec<Mat3>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::arg(format!("fps must be positive, got {fps}")));
        }
        let j = layout.joint_count();
        if rotations.is_empty() || rotations.len() % j != 0 {
            return Err(Error::shape(format!("F x {j} rotations with F > 0"), rotations.len()));
        }
        Ok(Self { layout, fps, rotations })
    }

    pub fn layout(&self) -> &Arc<SkeletonLayout> {
        &self.layout
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.rotations.len() / self.layout.joint_count()
    }

    pub fn joints(&self) -> usize {
        self.layout.joint_count()
    }

    pub fn rotations(&self) -> &[Mat3] {
        &self.rotations
    }

    pub fn rotation(&self, frame: usize, joint: usize) -> &Mat3 {
        &self.rotations[frame * self.joints() + joint]
    }

    pub fn frame(&self, frame: usize) -> &[Mat3] {
        let j = self.joints();
        &self.rotations[frame * j..(frame + 1) * j]
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 / self.fps
    }

    /// Checks that every block is a finite proper rotation within [`ROTATION_TOL`].
    pub fn validate(&self) -> Result<()> {
        for (idx, r) in self.rotations.iter().enumerate() {
            if r.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("non-finite rotation at frame {} joint {}", idx / self.joints(), idx % self.joints())));
            }
            let err = rotation_error(r);
            if err > ROTATION_TOL {
                return Err(Error::arg(format!(
                    "frame {} joint {} is not a rotation (error {err:.3e})",
                    idx / self.joints(),
                    idx % self.joints()
                )));
            }
        }
        Ok(())
    }

    pub fn to_flat(&self) -> FlatGesture {
        let values = self.rotations.iter().flat_map(|r| r.iter().flatten().copied()).collect();
        FlatGesture { frames: self.frames(), dim: self.layout.flat_dim(), values }
    }

    /// Inverse of [`to_flat`](Self::to_flat). No rotation validity check is made,
    /// so denoiser output can be carried around before projection.
    pub fn from_flat(flat: &FlatGesture, layout: Arc<SkeletonLayout>, fps: f64) -> Result<Self> {
        if flat.dim != layout.flat_dim() {
            return Err(Error::shape(layout.flat_dim(), flat.dim));
        }
        let rotations = flat
            .values
            .chunks_exact(9)
            .map(|c| [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]])
            .collect();
        Self::new_unchecked(layout, fps, rotations)
    }

    /// Replaces every block by its nearest rotation (polar decomposition).
    pub fn project_to_rotations(&self) -> Self {
        let rotations = self.rotations.iter().map(nearest_rotation).collect();
        Self { layout: self.layout.clone(), fps: self.fps, rotations }
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::arg(format!("window {start}+{len} outside {} frames", self.frames())));
        }
        let j = self.joints();
        Ok(Self {
            layout: self.layout.clone(),
            fps: self.fps,
            rotations: self.rotations[start * j..(start + len) * j].to_vec(),
        })
    }
}

/// Nearest proper rotation to an arbitrary 3×3 matrix.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let a = nalgebra::Matrix3::from_fn(|r, c| m[r][c]);
    let svd = a.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return IDENTITY,
    };
    let mut d = nalgebra::Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = r[(i, j)];
        }
    }
    if out.iter().flatten().all(|v| v.is_finite()) {
        out
    } else {
        IDENTITY
    }
}

/// Row-major F × D matrix of per-frame values (D = joints · 9 for gestures).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGesture {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FlatGesture {
    pub fn new(frames: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * dim {
            return Err(Error::shape(format!("{frames} x {dim}"), values.len()));
        }
        Ok(Self { frames, dim, values })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self { frames, dim, values: vec![0.0; frames * dim] }
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.values[f * self.dim..(f + 1) * self.dim]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.frames, self.dim), device)?.to_dtype(dtype)?)
    }

    /// Accepts a `(F, D)` tensor of any float dtype.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (frames, dim) = t.dims2()?;
        let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self { frames, dim, values })
    }
}

/// Decimates `seq` from its frame rate to `target_fps`.
///
/// The source rate must be an integer multiple of the target. Output frame
/// `k` is input frame `k · ratio`; the output has `ceil(F / ratio)` frames.
pub fn resample(seq: &GestureSequence, target_fps: f64) -> Result<GestureSequence> {
    let unsupported = || Error::UnsupportedRatio { source_fps: seq.fps, target_fps };
    if !(target_fps > 0.0 && target_fps.is_finite()) {
        return Err(unsupported());
    }
    let ratio = seq.fps / target_fps;
    let step = ratio.round();
    if step < 1.0 || (ratio - step).abs() > 1e-9 * ratio.max(1.0) {
        return Err(unsupported());
    }
    let step = step as usize;
    if step == 1 {
        return Ok(seq.clone());
    }
    let j = seq.joints();
    let rotations = (0..seq.frames())
        .step_by(step)
        .flat_map(|f| seq.rotations[f * j..(f + 1) * j].iter().copied())
        .collect();
    Ok(GestureSequence { layout: seq.layout.clone(), fps: target_fps, rotations })
}
