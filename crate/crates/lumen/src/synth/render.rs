//! Frame renderers over the fold-tube mesh.
//!
//! The VC renderer is a two-pass ray caster: a Lambertian headlight pass for
//! the wall, then a continuation pass that looks *through* the first hit and
//! composites green wherever a missed face lies behind it — producing the
//! frame's missed mask at the same time. The OC renderer shades the same
//! geometry with procedural albedo, specular highlights, and a seeded tint.

use super::{cast_ray, ray_triangle, Pose, TriangleMesh};
use crate::error::{config_err, Result};
use crate::rng::derive_seed;
use glam::DVec3;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Base wall tint of the VC render (pinkish gray, red-dominant so the green
/// overlay is unambiguous).
const VC_TINT: [f64; 3] = [1.0, 0.62, 0.72];
/// Quadratic headlight falloff coefficient.
const FALLOFF: f64 = 0.25;
/// Continuation offset past the first hit.
const PASS_EPS: f64 = 1e-6;

fn attenuation(t: f64) -> f64 {
    1.0 / (1.0 + FALLOFF * t * t)
}

/// A camera inside the tube sees interior wall on both sides along x.
fn pose_inside(mesh: &TriangleMesh, position: DVec3) -> bool {
    [DVec3::X, -DVec3::X].iter().all(|&d| {
        cast_ray(mesh, position, d)
            .is_some_and(|(f, _)| mesh.face_normal(f).dot(d) < 0.0)
    })
}

fn to_tensor(pixels: Vec<[f64; 3]>, size: usize) -> ArrayD<f32> {
    let mut data = vec![0f32; 3 * size * size];
    for (i, px) in pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * size * size + i] = (px[c].clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[1, 3, size, size]), data).unwrap()
}

fn render_rows<F>(size: usize, shade: F) -> Vec<[f64; 3]>
where
    F: Fn(usize, usize) -> [f64; 3] + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..size * size)
            .into_par_iter()
            .map(|i| shade(i % size, i / size))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..size * size).map(|i| shade(i % size, i / size)).collect()
    }
}

/// True when any face behind the first hit (t > t0) along the ray is missed.
fn missed_behind(mesh: &TriangleMesh, origin: DVec3, dir: DVec3, t0: f64) -> bool {
    mesh.faces.iter().enumerate().any(|(id, _)| {
        !mesh.visible[id]
            && ray_triangle(origin, dir, &mesh.face_vertices(id))
                .is_some_and(|t| t > t0 + PASS_EPS)
    })
}

/// Lambertian headlight render plus the green missed-surface overlay; the
/// returned mask is exactly the set of composited pixels.
pub fn render_vc_frame(
    mesh: &TriangleMesh,
    pose: &Pose,
    size: usize,
    overlay_opacity: f64,
) -> Result<(ArrayD<f32>, Array2<u8>)> {
    if size == 0 {
        return config_err("image size must be positive");
    }
    if !pose_inside(mesh, pose.position) {
        return config_err("camera pose lies outside the tube");
    }
    let shaded: Vec<([f64; 3], bool)> = {
        let shade = |px: usize, py: usize| -> ([f64; 3], bool) {
            let dir = pose.pixel_ray(size, px, py);
            let Some((f, t)) = cast_ray(mesh, pose.position, dir) else {
                return ([0.0; 3], false);
            };
            let n = mesh.face_normal(f).normalize();
            let lambert = (-dir.dot(n)).max(0.0);
            let s = lambert * attenuation(t);
            let mut px3 = [VC_TINT[0] * s, VC_TINT[1] * s, VC_TINT[2] * s];
            let missed = missed_behind(mesh, pose.position, dir, t);
            if missed {
                let o = overlay_opacity;
                px3 = [
                    (1.0 - o) * px3[0],
                    (1.0 - o) * px3[1] + o,
                    (1.0 - o) * px3[2],
                ];
            }
            (px3, missed)
        };
        #[cfg(feature = "parallel")]
        {
            (0..size * size)
                .into_par_iter()
                .map(|i| shade(i % size, i / size))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..size * size).map(|i| shade(i % size, i / size)).collect()
        }
    };
    let mut mask = Array2::zeros((size, size));
    let mut pixels = Vec::with_capacity(size * size);
    for (i, (px, m)) in shaded.iter().enumerate() {
        pixels.push(*px);
        mask[[i / size, i % size]] = u8::from(*m);
    }
    Ok((to_tensor(pixels, size), mask))
}

/// Procedural value noise on an integer lattice, trilinearly interpolated.
fn vnoise(p: DVec3, seed: u64) -> f64 {
    fn hash(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
        let mut h = seed
            ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (iy as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
            ^ (iz as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 30;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
    let f = p.floor();
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let d = p - f;
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - d.x), (1, d.x)] {
        for (dy, wy) in [(0, 1.0 - d.y), (1, d.y)] {
            for (dz, wz) in [(0, 1.0 - d.z), (1, d.z)] {
                acc += wx * wy * wz * hash(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

/// Textured/specular render of the same geometry; different appearance seeds
/// change texture and tint but never the geometry.
pub fn render_oc_frame(
    mesh: &TriangleMesh,
    pose: &Pose,
    size: usize,
    appearance_seed: u64,
    specular_strength: f64,
) -> Result<ArrayD<f32>> {
    if size == 0 {
        return config_err("image size must be positive");
    }
    if !pose_inside(mesh, pose.position) {
        return config_err("camera pose lies outside the tube");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(appearance_seed, 0x0c0c));
    let tint = [
        0.70 + 0.30 * rng.gen::<f64>(),
        0.30 + 0.25 * rng.gen::<f64>(),
        0.25 + 0.20 * rng.gen::<f64>(),
    ];
    let tex_offset = DVec3::new(
        rng.gen_range(0.0..100.0),
        rng.gen_range(0.0..100.0),
        rng.gen_range(0.0..100.0),
    );
    let noise_seed = derive_seed(appearance_seed, 0x7e37);
    let pixels = render_rows(size, |px, py| {
        let dir = pose.pixel_ray(size, px, py);
        let Some((f, t)) = cast_ray(mesh, pose.position, dir) else {
            return [0.0; 3];
        };
        let p = pose.position + dir * t;
        let n = mesh.face_normal(f).normalize();
        let lambert = (-dir.dot(n)).max(0.0);
        let att = attenuation(t);
        let tex = 0.55
            + 0.30 * vnoise(p * 6.0 + tex_offset, noise_seed)
            + 0.15 * vnoise(p * 18.0 + tex_offset, noise_seed ^ 0xabcd);
        // Headlight Phong term: light direction equals the view ray.
        let r = dir - n * (2.0 * dir.dot(n));
        let spec = specular_strength * r.dot(-dir).max(0.0).powi(24);
        [
            tint[0] * tex * lambert * att + spec,
            tint[1] * tex * lambert * att + spec,
            tint[2] * tex * lambert * att + spec,
        ]
    });
    Ok(to_tensor(pixels, size))
}

/// First-hit distance per pixel (0 where the ray escapes); used to compare
/// depth discontinuities across the two renderers.
pub fn depth_map(mesh: &TriangleMesh, pose: &Pose, size: usize) -> Array2<f64> {
    let mut out = Array2::zeros((size, size));
    for py in 0..size {
        for px in 0..size {
            let dir = pose.pixel_ray(size, px, py);
            if let Some((_, t)) = cast_ray(mesh, pose.position, dir) {
                out[[py, px]] = t;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_mesh, centerline_trajectory, mark_visibility, TubeScene};

    fn folded() -> (TriangleMesh, Vec<Pose>) {
        let s = TubeScene::new(6.0, 0.5, 0.6, 1.0, 0.1, 21).unwrap();
        let mut m = build_mesh(&s, 60, 12).unwrap();
        let poses = centerline_trajectory(&s, 3, 1.0, 1.0, 90.0).unwrap();
        mark_visibility(&mut m, &poses);
        (m, poses)
    }

    #[test]
    fn all_visible_means_no_green_and_empty_mask() {
        let s = TubeScene::new(4.0, 0.5, 0.0, 1.0, 0.0, 1).unwrap();
        let mut m = build_mesh(&s, 16, 12).unwrap();
        m.visible = vec![true; m.faces.len()];
        let pose = Pose::new(DVec3::new(0.0, 0.0, 2.0), DVec3::Z, 90.0).unwrap();
        let (img, mask) = render_vc_frame(&m, &pose, 16, 0.6).unwrap();
        assert_eq!(mask.sum(), 0);
        for y in 0..16 {
            for x in 0..16 {
                let (r, g, b) = (
                    img[[0, 0, y, x]],
                    img[[0, 1, y, x]],
                    img[[0, 2, y, x]],
                );
                assert!(!(g > r && g > b), "green pixel without missed surface");
            }
        }
    }

    #[test]
    fn mask_matches_green_dominance_exactly() {
        let (m, poses) = folded();
        let (img, mask) = render_vc_frame(&m, &poses[0], 32, 0.6).unwrap();
        let mut positive = 0;
        for y in 0..32 {
            for x in 0..32 {
                let (r, g, b) = (
                    img[[0, 0, y, x]],
                    img[[0, 1, y, x]],
                    img[[0, 2, y, x]],
                );
                let dominant = g > r && g > b;
                assert_eq!(
                    dominant,
                    mask[[y, x]] == 1,
                    "pixel ({y},{x}) mask/green disagreement"
                );
                positive += mask[[y, x]] as usize;
            }
        }
        assert!(positive > 0, "fold scene should have missed pixels");
    }

    #[test]
    fn mask_agrees_with_per_pixel_ray_oracle() {
        let (m, poses) = folded();
        let (_, mask) = render_vc_frame(&m, &poses[1], 24, 0.6).unwrap();
        for py in 0..24 {
            for px in 0..24 {
                let dir = poses[1].pixel_ray(24, px, py);
                let expect = match cast_ray(&m, poses[1].position, dir) {
                    None => false,
                    Some((_, t0)) => {
                        let mut hit_missed = false;
                        for f in 0..m.faces.len() {
                            if let Some(t) =
                                ray_triangle(poses[1].position, dir, &m.face_vertices(f))
                            {
                                if t > t0 + PASS_EPS && !m.visible[f] {
                                    hit_missed = true;
                                }
                            }
                        }
                        hit_missed
                    }
                };
                assert_eq!(mask[[py, px]] == 1, expect, "pixel ({py},{px})");
            }
        }
    }

    #[test]
    fn oc_seeds_change_appearance_not_geometry() {
        let (m, poses) = folded();
        let a = render_oc_frame(&m, &poses[0], 24, 100, 0.4).unwrap();
        let b = render_oc_frame(&m, &poses[0], 24, 200, 0.4).unwrap();
        let dist: f32 =
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.len() as f32;
        assert!(dist > 0.0, "seeds must change appearance");
        let a2 = render_oc_frame(&m, &poses[0], 24, 100, 0.4).unwrap();
        assert_eq!(a, a2, "same seed must reproduce the frame exactly");
    }

    #[test]
    fn zero_specular_never_brightens() {
        let (m, poses) = folded();
        let with = render_oc_frame(&m, &poses[0], 16, 7, 0.5).unwrap();
        let without = render_oc_frame(&m, &poses[0], 16, 7, 0.0).unwrap();
        for (w, wo) in with.iter().zip(without.iter()) {
            assert!(*wo <= w + 1e-6);
        }
    }

    #[test]
    fn depth_edges_coincide_across_renderers() {
        // Both renderers cast identical primary rays, so their depth-edge maps
        // are the same by construction; verify on the shared depth map that a
        // folded scene does produce edges at all.
        let (m, poses) = folded();
        let d = depth_map(&m, &poses[0], 24);
        let mut edges = 0;
        for y in 0..24 {
            for x in 1..24 {
                if (d[[y, x]] - d[[y, x - 1]]).abs() > 0.3 {
                    edges += 1;
                }
            }
        }
        assert!(edges > 0, "fold scene should have depth discontinuities");
    }

    #[test]
    fn outside_pose_is_rejected() {
        let (m, _) = folded();
        let pose = Pose::new(DVec3::new(5.0, 0.0, 3.0), DVec3::Z, 90.0).unwrap();
        assert!(render_vc_frame(&m, &pose, 8, 0.6).is_err());
        assert!(render_oc_frame(&m, &pose, 8, 1, 0.4).is_err());
    }
}
