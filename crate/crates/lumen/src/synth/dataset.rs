//! Dataset generation: unpaired OC (A) and VC (B) splits with exact
//! missed-surface ground truth and a CSV manifest.
//!
//! Scene seeds for the two domains are drawn from disjoint salt ranges, so
//! no OC frame shares geometry with any VC frame. Every frame — including OC
//! frames — ships the mask of its own scene/pose, which is what an OC→VC
//! translation of that frame should reproduce.

use super::render::{render_oc_frame, render_vc_frame};
use super::{build_mesh, centerline_trajectory, mark_visibility, TubeScene};
use crate::config::DataConfig;
use crate::data::{write_manifest, ManifestRow};
use crate::error::{config_err, Result};
use crate::rng::derive_seed;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub frames_per_domain: usize,
    pub manifest_rows: usize,
}

/// Scene counts per split; train gets the rounded fractions, test the rest.
fn split_counts(scenes: usize, train_frac: f64, val_frac: f64) -> (usize, usize, usize) {
    let mut n_train = (scenes as f64 * train_frac).round() as usize;
    let mut n_val = (scenes as f64 * val_frac).round() as usize;
    if n_train > scenes {
        n_train = scenes;
    }
    if n_train + n_val > scenes {
        n_val = scenes - n_train;
    }
    (n_train, n_val, scenes - n_train - n_val)
}

fn split_name(scene_idx: usize, counts: (usize, usize, usize), domain: char) -> &'static str {
    let (tr, va, _) = counts;
    match (scene_idx < tr, scene_idx < tr + va, domain) {
        (true, _, 'A') => "trainA",
        (true, _, _) => "trainB",
        (false, true, 'A') => "valA",
        (false, true, _) => "valB",
        (false, false, 'A') => "testA",
        (false, false, _) => "testB",
    }
}

pub fn generate_dataset(cfg: &DataConfig, root: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    if cfg.scenes * cfg.poses == 0 {
        return config_err("dataset would contain zero frames");
    }
    for split in crate::data::SPLITS {
        std::fs::create_dir_all(root.join(split))?;
        std::fs::create_dir_all(root.join(format!("{split}_masks")))?;
    }
    let counts = split_counts(cfg.scenes, cfg.train_frac, cfg.val_frac);
    let length = cfg.effective_length();
    let axial = cfg.effective_axial_steps();
    let z_start = 2.0 * cfg.fold_period;
    let mut rows = Vec::with_capacity(2 * cfg.scenes * cfg.poses);

    for domain in ['A', 'B'] {
        // Disjoint seed salt ranges keep the two domains unpaired.
        let salt_base = if domain == 'A' { 1_000 } else { 2_000 };
        for scene_idx in 0..cfg.scenes {
            let scene_seed = derive_seed(cfg.seed, salt_base + scene_idx as u64);
            let scene = TubeScene::new(
                length,
                cfg.base_radius,
                cfg.fold_amplitude,
                cfg.fold_period,
                cfg.fold_phase_jitter,
                scene_seed,
            )?;
            let mut mesh = build_mesh(&scene, axial, cfg.radial_steps)?;
            let traj =
                centerline_trajectory(&scene, cfg.poses, z_start, cfg.pose_step, cfg.fov_deg)?;
            mark_visibility(&mut mesh, &traj);

            let split = split_name(scene_idx, counts, domain);
            let dl = domain.to_ascii_lowercase();
            for (pose_idx, pose) in traj.iter().enumerate() {
                let (vc_img, mask) =
                    render_vc_frame(&mesh, pose, cfg.image_size, cfg.overlay_opacity)?;
                let img = if domain == 'A' {
                    render_oc_frame(
                        &mesh,
                        pose,
                        cfg.image_size,
                        derive_seed(scene_seed, 3_000 + pose_idx as u64),
                        cfg.specular_strength,
                    )?
                } else {
                    vc_img
                };
                let frame_id = format!("{dl}{scene_idx:04}_{pose_idx:04}");
                let image_path = format!("{split}/{frame_id}.png");
                let mask_path = format!("{split}_masks/{frame_id}.png");
                crate::data::save_image(&root.join(&image_path), &img)?;
                crate::data::save_mask(&root.join(&mask_path), &mask)?;
                rows.push(ManifestRow {
                    frame_id,
                    domain,
                    scene_seed,
                    pose_index: pose_idx,
                    image_path,
                    mask_path,
                });
            }
        }
    }
    write_manifest(&root.join("manifest.csv"), &rows)?;
    Ok(DatasetSummary {
        frames_per_domain: cfg.scenes * cfg.poses,
        manifest_rows: rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_manifest;
    use std::collections::BTreeSet;
    use tempfile::tempdir;

    fn tiny_cfg() -> DataConfig {
        let mut cfg = DataConfig::default();
        cfg.scenes = 4;
        cfg.poses = 2;
        cfg.image_size = 12;
        cfg.poses = 2;
        cfg.pose_step = 0.5;
        cfg.fold_period = 0.5;
        cfg.radial_steps = 8;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn counting_and_layout() {
        let dir = tempdir().unwrap();
        let s = generate_dataset(&tiny_cfg(), dir.path()).unwrap();
        assert_eq!(s.frames_per_domain, 8);
        assert_eq!(s.manifest_rows, 16);
        let rows = read_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(rows.len(), 16);
        for r in &rows {
            assert!(dir.path().join(&r.image_path).is_file());
            assert!(dir.path().join(&r.mask_path).is_file());
        }
        for split in crate::data::SPLITS {
            assert!(dir.path().join(split).is_dir());
        }
    }

    #[test]
    fn domain_seed_sets_are_disjoint() {
        let dir = tempdir().unwrap();
        generate_dataset(&tiny_cfg(), dir.path()).unwrap();
        let rows = read_manifest(&dir.path().join("manifest.csv")).unwrap();
        let a: BTreeSet<u64> = rows
            .iter()
            .filter(|r| r.domain == 'A')
            .map(|r| r.scene_seed)
            .collect();
        let b: BTreeSet<u64> = rows
            .iter()
            .filter(|r| r.domain == 'B')
            .map(|r| r.scene_seed)
            .collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn train_and_test_scenes_are_disjoint() {
        let dir = tempdir().unwrap();
        generate_dataset(&tiny_cfg(), dir.path()).unwrap();
        let rows = read_manifest(&dir.path().join("manifest.csv")).unwrap();
        let train: BTreeSet<u64> = rows
            .iter()
            .filter(|r| r.image_path.starts_with("train"))
            .map(|r| r.scene_seed)
            .collect();
        let test: BTreeSet<u64> = rows
            .iter()
            .filter(|r| r.image_path.starts_with("test"))
            .map(|r| r.scene_seed)
            .collect();
        assert!(!train.is_empty() && !test.is_empty());
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate_dataset(&tiny_cfg(), d1.path()).unwrap();
        generate_dataset(&tiny_cfg(), d2.path()).unwrap();
        let rows = read_manifest(&d1.path().join("manifest.csv")).unwrap();
        for r in rows {
            let b1 = std::fs::read(d1.path().join(&r.image_path)).unwrap();
            let b2 = std::fs::read(d2.path().join(&r.image_path)).unwrap();
            assert_eq!(b1, b2, "{} differs between reruns", r.image_path);
        }
    }

    #[test]
    fn split_count_arithmetic() {
        assert_eq!(split_counts(4, 0.5, 0.25), (2, 1, 1));
        assert_eq!(split_counts(80, 0.5, 0.25), (40, 20, 20));
        assert_eq!(split_counts(1, 1.0, 0.5), (1, 0, 0));
        assert_eq!(split_counts(2, 0.5, 0.25), (1, 1, 0));
    }
}
