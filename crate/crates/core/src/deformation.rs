//! Human-pose-guided deformation: a coarse skeleton-driven warp from posed
//! space back to the canonical (rest) space, plus a fine pose-conditioned
//! non-rigid residual.
//!
//! The coarse warp is inverse linear blend skinning: per-bone rigid
//! transforms built by forward kinematics, blended with analytic Gaussian
//! falloff weights evaluated around the posed bone segments. The residual is
//! a small MLP over the encoded coarse output concatenated with the raw
//! axis-angle rotations, tanh-bounded so it can never tear the warp apart.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{EvalCtx, ParamAllocator};
use crate::fields::Mlp;
use crate::geometry::{positional_encoding, EncodingConfig};
use crate::linalg::{Mat3, Vec3};
use crate::num::{Real, Scalar};

#[derive(Debug, Error)]
pub enum DeformError {
    #[error("pose has {got} joints but the rig expects {expected}")]
    PoseMismatch { expected: usize, got: usize },
    #[error("invalid joint tree: {0}")]
    InvalidTree(String),
}

/// Joint positions and local axis-angle rotations for one frame, plus the
/// parent table tying them into a tree.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonPose<R: Real> {
    pub joints: Vec<Vec3<R>>,
    pub rotations: Vec<Vec3<R>>,
    pub parents: Vec<i32>,
}

impl<R: Real> SkeletonPose<R> {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn validate(&self) -> Result<(), DeformError> {
        if self.joints.len() != self.rotations.len() || self.joints.len() != self.parents.len() {
            return Err(DeformError::InvalidTree(format!(
                "field lengths differ: {} joints, {} rotations, {} parents",
                self.joints.len(),
                self.rotations.len(),
                self.parents.len()
            )));
        }
        let n = self.parents.len();
        let roots = self.parents.iter().filter(|p| **p < 0).count();
        if roots != 1 {
            return Err(DeformError::InvalidTree(format!("{roots} roots, need exactly 1")));
        }
        for (i, &p) in self.parents.iter().enumerate() {
            if p >= 0 {
                if p as usize >= n {
                    return Err(DeformError::InvalidTree(format!("parent {p} out of range")));
                }
                // cycle check: walk to the root, bounded by n hops
                let mut cur = p;
                let mut hops = 0;
                while cur >= 0 {
                    cur = self.parents[cur as usize];
                    hops += 1;
                    if hops > n {
                        return Err(DeformError::InvalidTree(format!("cycle through joint {i}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// True when this pose matches the rig's rest configuration: all
    /// rotations near zero and joints at their rest positions.
    pub fn is_rest_of(&self, rig: &Rig<R>, tol: R) -> bool {
        if self.len() != rig.rest.len() {
            return false;
        }
        self.rotations.iter().all(|r| r.norm() <= tol)
            && self
                .joints
                .iter()
                .zip(&rig.rest.joints)
                .all(|(a, b)| (*a - *b).norm() <= tol)
    }
}

/// A rig: the rest pose (stored once per sequence) with its joint tree.
/// The rest configuration is the T-pose of the sequence.
#[derive(Clone, Debug)]
pub struct Rig<R: Real> {
    pub rest: SkeletonPose<R>,
}

/// SMPL 24-joint parent table (topology only; no body-shape model).
pub const SMPL_PARENTS: [i32; 24] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

impl<R: Real> Rig<R> {
    pub fn new(rest: SkeletonPose<R>) -> Result<Self, DeformError> {
        rest.validate()?;
        Ok(Self { rest })
    }

    /// Four-joint rig with hand-computable geometry: pelvis, spine, head,
    /// and one arm off the spine.
    pub fn toy() -> Self {
        let joints = vec![
            Vec3::of(0.0, 0.0, 0.0),
            Vec3::of(0.0, 0.4, 0.0),
            Vec3::of(0.0, 0.8, 0.0),
            Vec3::of(0.35, 0.4, 0.0),
        ];
        let n = joints.len();
        Self {
            rest: SkeletonPose {
                joints,
                rotations: vec![Vec3::zero(); n],
                parents: vec![-1, 0, 1, 1],
            },
        }
    }

    /// Two-joint rig used by the rigid-transform oracles.
    pub fn single_bone() -> Self {
        Self {
            rest: SkeletonPose {
                joints: vec![Vec3::zero(), Vec3::of(1.0, 0.0, 0.0)],
                rotations: vec![Vec3::zero(); 2],
                parents: vec![-1, 0],
            },
        }
    }

    /// SMPL-topology rig around externally supplied rest joints.
    pub fn smpl(rest_joints: Vec<Vec3<R>>) -> Result<Self, DeformError> {
        if rest_joints.len() != SMPL_PARENTS.len() {
            return Err(DeformError::PoseMismatch {
                expected: SMPL_PARENTS.len(),
                got: rest_joints.len(),
            });
        }
        let n = rest_joints.len();
        Self::new(SkeletonPose {
            joints: rest_joints,
            rotations: vec![Vec3::zero(); n],
            parents: SMPL_PARENTS.to_vec(),
        })
    }

    pub fn num_joints(&self) -> usize {
        self.rest.len()
    }

    /// Rest configuration as a pose (the T-pose).
    pub fn rest_pose(&self) -> SkeletonPose<R> {
        self.rest.clone()
    }

    /// Bones as (frame joint, child joint) pairs: the segment from a joint
    /// to each child moves rigidly with the joint's frame.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.rest
            .parents
            .iter()
            .enumerate()
            .filter_map(|(c, &p)| (p >= 0).then_some((p as usize, c)))
            .collect()
    }
}

/// Skinning weight source. Only the analytic form is shipped: Gaussian
/// falloff around posed bone segments, nearest-bone one-hot in the far
/// field where every Gaussian underflows.
#[derive(Clone, Copy, Debug)]
pub enum SkinningWeights {
    AnalyticNearestBone {
        /// Falloff sigma as a fraction of each bone's rest length.
        falloff_scale: f64,
    },
}

impl Default for SkinningWeights {
    fn default() -> Self {
        Self::AnalyticNearestBone { falloff_scale: 0.05 }
    }
}

/// Per-pose rigid transforms and cached posed segments, computed once and
/// shared across every sample of a render.
pub struct PoseTransforms<R: Real> {
    rot_global: Vec<Mat3<R>>,
    rot_global_t: Vec<Mat3<R>>,
    posed_joints: Vec<Vec3<R>>,
    rest_joints: Vec<Vec3<R>>,
    /// (frame joint, posed segment start, posed segment delta, |delta|^2, sigma)
    bones: Vec<(usize, Vec3<R>, Vec3<R>, R, R)>,
}

impl<R: Real> PoseTransforms<R> {
    pub fn compute(
        rig: &Rig<R>,
        pose: &SkeletonPose<R>,
        skinning: SkinningWeights,
    ) -> Result<Self, DeformError> {
        if pose.len() != rig.num_joints() {
            return Err(DeformError::PoseMismatch {
                expected: rig.num_joints(),
                got: pose.len(),
            });
        }
        pose.validate()?;
        let n = pose.len();
        let mut rot_global = vec![Mat3::identity(); n];
        // Parents may appear in any order; resolve by walking up the tree.
        let mut done = vec![false; n];
        fn resolve<R: Real>(
            i: usize,
            parents: &[i32],
            rotations: &[Vec3<R>],
            rot_global: &mut [Mat3<R>],
            done: &mut [bool],
        ) {
            if done[i] {
                return;
            }
            let local = Mat3::from_axis_angle(rotations[i]);
            let p = parents[i];
            if p < 0 {
                rot_global[i] = local;
            } else {
                resolve(p as usize, parents, rotations, rot_global, done);
                rot_global[i] = rot_global[p as usize].mul_mat(&local);
            }
            done[i] = true;
        }
        for i in 0..n {
            resolve(i, &pose.parents, &pose.rotations, &mut rot_global, &mut done);
        }

        let SkinningWeights::AnalyticNearestBone { falloff_scale } = skinning;
        let bones = rig
            .bones()
            .into_iter()
            .map(|(frame, child)| {
                let a = pose.joints[frame];
                let d = pose.joints[child] - a;
                let rest_len = (rig.rest.joints[child] - rig.rest.joints[frame]).norm();
                let sigma = (rest_len * R::of(falloff_scale)).max(R::of(1e-6));
                (frame, a, d, d.norm_squared(), sigma)
            })
            .collect();

        Ok(Self {
            rot_global_t: rot_global.iter().map(|m| m.transpose()).collect(),
            rot_global,
            posed_joints: pose.joints.clone(),
            rest_joints: rig.rest.joints.clone(),
            bones,
        })
    }

    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    /// Rigid map of joint `j`'s frame from rest space to posed space.
    pub fn to_posed(&self, j: usize, x_rest: Vec3<R>) -> Vec3<R> {
        self.rot_global[j].mul_vec(x_rest - self.rest_joints[j]) + self.posed_joints[j]
    }

    /// Inverse rigid map of joint `j`'s frame: posed space to rest space.
    pub fn to_canonical(&self, j: usize, x_posed: Vec3<R>) -> Vec3<R> {
        self.rot_global_t[j].mul_vec(x_posed - self.posed_joints[j]) + self.rest_joints[j]
    }

    /// Normalized skinning weights of `x` (posed space), one per bone.
    /// Gaussian falloff around each posed segment; where every Gaussian
    /// underflows, the nearest bone takes weight one.
    pub fn skinning_weights(&self, x: Vec3<R>) -> Vec<R> {
        let mut w = Vec::with_capacity(self.bones.len());
        let mut sum = R::of(0.0);
        let mut nearest = 0usize;
        let mut nearest_d2 = R::of(f64::INFINITY);
        for (b, (_, a, d, len2, sigma)) in self.bones.iter().enumerate() {
            let rel = x - *a;
            let t = if *len2 > R::of(1e-24) {
                (rel.dot(*d) / *len2).max(R::of(0.0)).min(R::of(1.0))
            } else {
                R::of(0.0)
            };
            let d2 = (rel - *d * t).norm_squared();
            if d2 < nearest_d2 {
                nearest_d2 = d2;
                nearest = b;
            }
            let raw = (-d2 / (R::of(2.0) * *sigma * *sigma)).exp();
            sum += raw;
            w.push(raw);
        }
        if sum > R::of(0.0) {
            for v in w.iter_mut() {
                *v /= sum;
            }
        } else {
            w[nearest] = R::of(1.0);
        }
        w
    }

    /// Inverse linear blend skinning: the weighted blend of each bone
    /// frame's posed-to-rest transform.
    pub fn coarse_deform(&self, x_d: Vec3<R>) -> Vec3<R> {
        let w = self.skinning_weights(x_d);
        let mut out = Vec3::zero();
        for ((frame, ..), wb) in self.bones.iter().zip(&w) {
            out = out + self.to_canonical(*frame, x_d) * *wb;
        }
        out
    }
}

/// The full deformation field: rig, skinning configuration, and the
/// non-rigid residual network.
#[derive(Clone, Debug)]
pub struct DeformationField<R: Real> {
    pub rig: Rig<R>,
    pub skinning: SkinningWeights,
    pub nonrigid: Mlp,
    pub nonrigid_encoding: EncodingConfig,
    /// Maximum residual norm in canonical units.
    pub residual_scale: f64,
}

impl<R: Real> DeformationField<R> {
    pub fn layout(
        alloc: &mut ParamAllocator,
        rig: Rig<R>,
        skinning: SkinningWeights,
        encoding: EncodingConfig,
        hidden_dim: usize,
        hidden_layers: usize,
        residual_scale: f64,
    ) -> Self {
        let input_dim = encoding.output_len() + 3 * rig.num_joints();
        let nonrigid = Mlp::layout(alloc, input_dim, hidden_dim, hidden_layers, 3, None);
        Self { rig, skinning, nonrigid, nonrigid_encoding: encoding, residual_scale }
    }

    /// The residual head starts at zero so a fresh field is exactly the
    /// coarse warp.
    pub fn init(&self, values: &mut [R], rng: &mut ChaCha8Rng) {
        self.nonrigid.init(values, rng, true);
    }

    pub fn transforms(&self, pose: &SkeletonPose<R>) -> Result<PoseTransforms<R>, DeformError> {
        PoseTransforms::compute(&self.rig, pose, self.skinning)
    }

    /// Non-rigid offset at a coarse-warped point, conditioned on the pose
    /// rotations. Bounded: |offset| <= residual_scale.
    pub fn fine_deform<C: EvalCtx<R>>(
        &self,
        ctx: C,
        x_c_prime: Vec3<R>,
        pose: &SkeletonPose<R>,
    ) -> Vec3<C::S> {
        let encoded = positional_encoding(
            Vec3::new(ctx.k(x_c_prime.x), ctx.k(x_c_prime.y), ctx.k(x_c_prime.z)),
            &self.nonrigid_encoding,
        );
        let mut input = encoded;
        for r in &pose.rotations {
            input.push(ctx.k(r.x));
            input.push(ctx.k(r.y));
            input.push(ctx.k(r.z));
        }
        let raw = self.nonrigid.forward(ctx, &input);
        // Per-component tanh bound of scale/sqrt(3) keeps the norm bound.
        let s = ctx.kf(self.residual_scale / 3f64.sqrt());
        Vec3::new(raw[0].tanh() * s, raw[1].tanh() * s, raw[2].tanh() * s)
    }

    /// Full posed-to-canonical map: coarse warp plus additive residual.
    pub fn deform<C: EvalCtx<R>>(
        &self,
        ctx: C,
        x_d: Vec3<R>,
        tr: &PoseTransforms<R>,
        pose: &SkeletonPose<R>,
    ) -> Vec3<C::S> {
        let x_c_prime = tr.coarse_deform(x_d);
        let fine = self.fine_deform(ctx, x_c_prime, pose);
        Vec3::new(ctx.k(x_c_prime.x), ctx.k(x_c_prime.y), ctx.k(x_c_prime.z)) + fine
    }
}
