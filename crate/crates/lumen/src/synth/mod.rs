//! Synthetic fold-tube scenes: parametric geometry, ray casting, and
//! per-face visibility along a camera trajectory.
//!
//! The surface is a tube around the z axis whose radius dips at periodic
//! "folds"; the part of the wall hidden behind a fold from every camera pose
//! is the missed surface. Geometry runs in f64 so the visibility flags can be
//! compared exactly against a brute-force line-of-sight oracle.

pub mod dataset;
pub mod render;

use crate::error::{config_err, Result};
use crate::rng::derive_seed;
use glam::DVec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum ray parameter accepted as a hit; rejects self-intersections at
/// the ray origin.
const T_MIN: f64 = 1e-9;

/// Parametric fold-tube surface around the z axis.
#[derive(Clone, Copy, Debug)]
pub struct TubeScene {
    pub length: f64,
    pub base_radius: f64,
    /// Fold depth as a fraction of the radius, in [0, 0.8].
    pub fold_amplitude: f64,
    /// Axial distance between folds.
    pub fold_period: f64,
    /// Amplitude (radians) of the per-angle fold phase wobble.
    pub fold_phase_jitter: f64,
    pub seed: u64,
    /// Phase offset of the wobble, derived from the seed.
    jitter_phase: f64,
}

impl TubeScene {
    pub fn new(
        length: f64,
        base_radius: f64,
        fold_amplitude: f64,
        fold_period: f64,
        fold_phase_jitter: f64,
        seed: u64,
    ) -> Result<Self> {
        if length <= 0.0 || base_radius <= 0.0 || fold_period <= 0.0 {
            return config_err("tube length, radius and fold period must be positive");
        }
        if !(0.0..=0.8).contains(&fold_amplitude) {
            return config_err(format!(
                "fold_amplitude must lie in [0, 0.8], got {fold_amplitude}"
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5ce11e));
        let jitter_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        Ok(TubeScene {
            length,
            base_radius,
            fold_amplitude,
            fold_period,
            fold_phase_jitter,
            seed,
            jitter_phase,
        })
    }

    fn jitter(&self, theta: f64) -> f64 {
        self.fold_phase_jitter * (theta + self.jitter_phase).sin()
    }

    /// Wall radius at axial position `z` and angle `theta`; strictly positive
    /// because the amplitude is capped at 0.8.
    pub fn radius(&self, z: f64, theta: f64) -> f64 {
        let phase = std::f64::consts::TAU * z / self.fold_period + self.jitter(theta);
        self.base_radius * (1.0 - self.fold_amplitude * phase.sin().max(0.0))
    }

    pub fn surface_point(&self, z: f64, theta: f64) -> DVec3 {
        let r = self.radius(z, theta);
        DVec3::new(r * theta.cos(), r * theta.sin(), z)
    }
}

/// Indexed triangle mesh of the tube interior with per-face visibility.
#[derive(Clone, Debug)]
pub struct TriangleMesh {
    pub vertices: Vec<DVec3>,
    pub faces: Vec<[u32; 3]>,
    /// Set by `mark_visibility`; `false` faces are the missed surface.
    pub visible: Vec<bool>,
}

impl TriangleMesh {
    pub fn face_vertices(&self, face: usize) -> [DVec3; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn face_centroid(&self, face: usize) -> DVec3 {
        let [a, b, c] = self.face_vertices(face);
        (a + b + c) / 3.0
    }

    /// Unnormalized face normal; inward faces have it pointing toward the axis.
    pub fn face_normal(&self, face: usize) -> DVec3 {
        let [a, b, c] = self.face_vertices(face);
        (b - a).cross(c - a)
    }
}

/// Tessellate the tube into 2 * axial_steps * radial_steps inward triangles,
/// with every vertex exactly on the parametric surface.
pub fn build_mesh(scene: &TubeScene, axial_steps: usize, radial_steps: usize) -> Result<TriangleMesh> {
    if axial_steps < 8 || radial_steps < 8 {
        return config_err(format!(
            "mesh needs at least 8 steps per axis, got {axial_steps}x{radial_steps}"
        ));
    }
    let mut vertices = Vec::with_capacity((axial_steps + 1) * radial_steps);
    for i in 0..=axial_steps {
        let z = scene.length * i as f64 / axial_steps as f64;
        for j in 0..radial_steps {
            let theta = std::f64::consts::TAU * j as f64 / radial_steps as f64;
            vertices.push(scene.surface_point(z, theta));
        }
    }
    let idx = |i: usize, j: usize| (i * radial_steps + j % radial_steps) as u32;
    let mut faces = Vec::with_capacity(2 * axial_steps * radial_steps);
    for i in 0..axial_steps {
        for j in 0..radial_steps {
            let a = idx(i, j);
            let b = idx(i, j + 1);
            let c = idx(i + 1, j + 1);
            let d = idx(i + 1, j);
            // Wound so normals point inward (toward the axis).
            faces.push([a, c, b]);
            faces.push([a, d, c]);
        }
    }
    let n = faces.len();
    Ok(TriangleMesh {
        vertices,
        faces,
        visible: vec![false; n],
    })
}

/// Möller–Trumbore ray/triangle intersection; returns the ray parameter t.
pub fn ray_triangle(origin: DVec3, dir: DVec3, tri: &[DVec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    (t > T_MIN).then_some(t)
}

/// Nearest hit of a ray against the whole mesh; ties go to the lowest face id.
pub fn cast_ray(mesh: &TriangleMesh, origin: DVec3, dir: DVec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (id, _) in mesh.faces.iter().enumerate() {
        let tri = mesh.face_vertices(id);
        if let Some(t) = ray_triangle(origin, dir, &tri) {
            // Strict < keeps the lowest id on an exact distance tie because
            // faces are scanned in ascending id order.
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((id, t));
            }
        }
    }
    best
}

/// A pinhole camera pose on the trajectory.
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    pub position: DVec3,
    pub forward: DVec3,
    pub fov_deg: f64,
}

impl Pose {
    pub fn new(position: DVec3, forward: DVec3, fov_deg: f64) -> Result<Self> {
        let n = forward.length();
        if !(0.999..=1.001).contains(&n) {
            return config_err(format!("pose forward must be unit length, |v| = {n}"));
        }
        if !(0.0..180.0).contains(&fov_deg) || fov_deg <= 0.0 {
            return config_err(format!("fov must lie in (0, 180), got {fov_deg}"));
        }
        Ok(Pose {
            position,
            forward: forward / n,
            fov_deg,
        })
    }

    /// Right/up/forward orthonormal camera basis (deterministic).
    pub fn basis(&self) -> (DVec3, DVec3, DVec3) {
        let f = self.forward;
        let hint = if f.z.abs() < 0.9 { DVec3::Z } else { DVec3::X };
        let right = hint.cross(f).normalize();
        let up = f.cross(right);
        (right, up, f)
    }

    /// True when `point` lies inside the square pinhole frustum.
    pub fn in_frustum(&self, point: DVec3) -> bool {
        let (right, up, f) = self.basis();
        let v = point - self.position;
        let cz = v.dot(f);
        if cz <= T_MIN {
            return false;
        }
        let half = (self.fov_deg.to_radians() / 2.0).tan();
        let cx = v.dot(right);
        let cy = v.dot(up);
        cx.abs() <= cz * half && cy.abs() <= cz * half
    }

    /// World-space direction of the pixel-center ray for an image of edge
    /// `size`; pixel (0, 0) is top-left.
    pub fn pixel_ray(&self, size: usize, px: usize, py: usize) -> DVec3 {
        let (right, up, f) = self.basis();
        let half = (self.fov_deg.to_radians() / 2.0).tan();
        let u = ((px as f64 + 0.5) / size as f64 * 2.0 - 1.0) * half;
        let v = (1.0 - (py as f64 + 0.5) / size as f64 * 2.0) * half;
        (f + right * u + up * v).normalize()
    }
}

/// Straight centerline trajectory: `poses` cameras marching along +z from
/// `z_start` in steps of `step`, all looking forward.
pub fn centerline_trajectory(
    scene: &TubeScene,
    poses: usize,
    z_start: f64,
    step: f64,
    fov_deg: f64,
) -> Result<Vec<Pose>> {
    if poses == 0 {
        return config_err("trajectory needs at least one pose");
    }
    let mut out = Vec::with_capacity(poses);
    for i in 0..poses {
        let z = z_start + step * i as f64;
        if z <= 0.0 || z >= scene.length {
            return config_err(format!(
                "pose {i} at z = {z} lies outside the tube (length {})",
                scene.length
            ));
        }
        out.push(Pose::new(DVec3::new(0.0, 0.0, z), DVec3::Z, fov_deg)?);
    }
    Ok(out)
}

/// Line-of-sight test: the face centroid is visible from `pose` when it lies
/// in the frustum and no other face intersects the sight segment strictly
/// closer than the centroid.
fn centroid_visible_from(mesh: &TriangleMesh, face: usize, pose: &Pose) -> bool {
    let c = mesh.face_centroid(face);
    if !pose.in_frustum(c) {
        return false;
    }
    let to = c - pose.position;
    let t_face = to.length();
    if t_face <= T_MIN {
        return false;
    }
    let dir = to / t_face;
    match cast_ray(mesh, pose.position, dir) {
        // Grazing hits at the centroid distance (shared edges) do not occlude.
        Some((_, t)) => t >= t_face - 1e-9,
        None => true,
    }
}

/// Mark every face that has direct line of sight to at least one pose; the
/// remaining faces form the missed (green) set.
pub fn mark_visibility(mesh: &mut TriangleMesh, trajectory: &[Pose]) {
    let flags = visibility_flags(mesh, trajectory);
    mesh.visible = flags;
}

/// Visibility flags without mutating the mesh (parallel when enabled).
pub fn visibility_flags(mesh: &TriangleMesh, trajectory: &[Pose]) -> Vec<bool> {
    #[cfg(feature = "parallel")]
    {
        (0..mesh.faces.len())
            .into_par_iter()
            .map(|f| trajectory.iter().any(|p| centroid_visible_from(mesh, f, p)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        visibility_flags_seq(mesh, trajectory)
    }
}

/// Sequential reference path; also the benchmark baseline.
pub fn visibility_flags_seq(mesh: &TriangleMesh, trajectory: &[Pose]) -> Vec<bool> {
    (0..mesh.faces.len())
        .map(|f| trajectory.iter().any(|p| centroid_visible_from(mesh, f, p)))
        .collect()
}
