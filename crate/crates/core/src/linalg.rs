//! Minimal 3-vector / 3x3-matrix types, generic over the scalar so the same
//! expressions run on plain floats and on tape variables.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::num::{Real, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }
}

impl<T: Copy> Vec3<T> {
    pub fn splat(v: T) -> Self {
        Self::new(v, v, v)
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn map<U, F: FnMut(T) -> U>(self, mut f: F) -> Vec3<U> {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }
}

impl<S: Scalar> Vec3<S> {
    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_squared(self) -> S {
        self.dot(self)
    }

    pub fn norm(self) -> S {
        self.norm_squared().sqrt()
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn scale(self, s: S) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn primal(self) -> Vec3<S::R> {
        self.map(|v| v.primal())
    }
}

impl<R: Real> Vec3<R> {
    pub fn zero() -> Self {
        Self::splat(R::of(0.0))
    }

    pub fn of(x: f64, y: f64, z: f64) -> Self {
        Self::new(R::of(x), R::of(y), R::of(z))
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        self.scale(n.recip())
    }

    pub fn to_f64(self) -> Vec3<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn cast<Q: Real>(self) -> Vec3<Q> {
        self.map(|v| Q::of(v.to_f64()))
    }
}

impl<T: Add<Output = T>> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Sub<Output = T>> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Neg<Output = T>> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Mul<Output = T> + Copy> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Div<Output = T> + Copy> Div<T> for Vec3<T> {
    type Output = Self;
    fn div(self, s: T) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Copy> Mat3<T> {
    pub fn from_rows(r0: [T; 3], r1: [T; 3], r2: [T; 3]) -> Self {
        Self { m: [r0, r1, r2] }
    }

    pub fn row(&self, i: usize) -> Vec3<T> {
        Vec3::from_array(self.m[i])
    }

    pub fn col(&self, j: usize) -> Vec3<T> {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn transpose(&self) -> Self {
        Self {
            m: [
                [self.m[0][0], self.m[1][0], self.m[2][0]],
                [self.m[0][1], self.m[1][1], self.m[2][1]],
                [self.m[0][2], self.m[1][2], self.m[2][2]],
            ],
        }
    }
}

impl<R: Real> Mat3<R> {
    pub fn zero() -> Self {
        Self {
            m: [[R::of(0.0); 3]; 3],
        }
    }

    pub fn identity() -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            m.m[i][i] = R::of(1.0);
        }
        m
    }

    /// a * b^T
    pub fn outer(a: Vec3<R>, b: Vec3<R>) -> Self {
        let a = a.to_array();
        let b = b.to_array();
        let mut m = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                m.m[i][j] = a[i] * b[j];
            }
        }
        m
    }

    pub fn mul_vec(&self, v: Vec3<R>) -> Vec3<R> {
        Vec3::new(
            self.row(0).dot(v),
            self.row(1).dot(v),
            self.row(2).dot(v),
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = R::of(0.0);
                for k in 0..3 {
                    acc += self.m[i][k] * o.m[k][j];
                }
                out.m[i][j] = acc;
            }
        }
        out
    }

    pub fn scale(&self, s: R) -> Self {
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = out.m[i][j] * s;
            }
        }
        out
    }

    pub fn add_mat(&self, o: &Self) -> Self {
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = out.m[i][j] + o.m[i][j];
            }
        }
        out
    }

    pub fn diag(&self) -> Vec3<R> {
        Vec3::new(self.m[0][0], self.m[1][1], self.m[2][2])
    }

    /// 0.5 * (M + M^T); removes accumulated asymmetry from round-off.
    pub fn symmetrized(&self) -> Self {
        let t = self.transpose();
        self.add_mat(&t).scale(R::of(0.5))
    }

    pub fn max_abs_asymmetry(&self) -> R {
        let mut worst = R::of(0.0);
        for i in 0..3 {
            for j in 0..3 {
                let d = (self.m[i][j] - self.m[j][i]).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    /// Rodrigues' formula: rotation matrix for an axis-angle vector.
    pub fn from_axis_angle(w: Vec3<R>) -> Self {
        let theta = w.norm();
        if theta < R::of(1e-12) {
            return Self::identity();
        }
        let k = w / theta;
        let kx = Self::from_rows(
            [R::of(0.0), -k.z, k.y],
            [k.z, R::of(0.0), -k.x],
            [-k.y, k.x, R::of(0.0)],
        );
        let kx2 = kx.mul_mat(&kx);
        Self::identity()
            .add_mat(&kx.scale(theta.sin()))
            .add_mat(&kx2.scale(R::of(1.0) - theta.cos()))
    }

    pub fn to_f64(&self) -> Mat3<f64> {
        let mut out = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = self.m[i][j].to_f64();
            }
        }
        out
    }

    pub fn cast<Q: Real>(&self) -> Mat3<Q> {
        let mut out = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = Q::of(self.m[i][j].to_f64());
            }
        }
        out
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<R> {
    pub min: Vec3<R>,
    pub max: Vec3<R>,
}

impl<R: Real> Aabb<R> {
    pub fn new(min: Vec3<R>, max: Vec3<R>) -> Self {
        Self { min, max }
    }

    pub fn center(&self) -> Vec3<R> {
        (self.min + self.max) * R::of(0.5)
    }

    pub fn contains(&self, p: Vec3<R>) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn inflated(&self, margin: R) -> Self {
        Self {
            min: self.min - Vec3::splat(margin),
            max: self.max + Vec3::splat(margin),
        }
    }

    pub fn diagonal(&self) -> Vec3<R> {
        self.max - self.min
    }

    /// Ray-box intersection; returns the entry/exit distances when the ray
    /// crosses the box within (t_min, t_max).
    pub fn ray_range(
        &self,
        origin: Vec3<R>,
        dir: Vec3<R>,
        t_min: R,
        t_max: R,
    ) -> Option<(R, R)> {
        let mut lo = t_min;
        let mut hi = t_max;
        let o = origin.to_array();
        let d = dir.to_array();
        let bmin = self.min.to_array();
        let bmax = self.max.to_array();
        for a in 0..3 {
            if d[a].abs() < R::of(1e-15) {
                if o[a] < bmin[a] || o[a] > bmax[a] {
                    return None;
                }
                continue;
            }
            let inv = d[a].recip();
            let mut t0 = (bmin[a] - o[a]) * inv;
            let mut t1 = (bmax[a] - o[a]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            lo = lo.max(t0);
            hi = hi.min(t1);
            if lo > hi {
                return None;
            }
        }
        Some((lo, hi))
    }

    pub fn cast<Q: Real>(&self) -> Aabb<Q> {
        Aabb::new(self.min.cast(), self.max.cast())
    }
}
