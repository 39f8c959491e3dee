//! Mask extraction and segmentation metrics: green-dominance binarization,
//! per-pixel accuracy, Dice coefficient, temporal stability across a frame
//! sequence, and green overlay rendering for human inspection.

use crate::data::{list_pngs, load_mask};
use crate::error::{config_err, Result};
use ndarray::{Array2, ArrayD};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

/// Default green-dominance margin (on the `[0, 1]` channel scale).
pub const DEFAULT_TAU: f64 = 0.2;

/// Extract the predicted missed-surface mask from an RGB image in `[-1, 1]`:
/// a pixel is masked iff, after rescaling channels to `[0, 1]`, green exceeds
/// both red and blue by more than `tau`.
pub fn binarize_missed(image: &ArrayD<f32>, tau: f64) -> Result<Array2<u8>> {
    let s = image.shape();
    let (h, w) = match s {
        [1, 3, h, w] | [3, h, w] => (*h, *w),
        _ => return config_err(format!("expected [1,3,H,W] image tensor, got {s:?}")),
    };
    let flat = image
        .as_slice()
        .ok_or_else(|| crate::error::Error::Config("image tensor must be contiguous".into()))?;
    let plane = h * w;
    let base = flat.len() - 3 * plane; // skip leading batch axis if present
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r = (flat[base + i] as f64 + 1.0) / 2.0;
            let g = (flat[base + plane + i] as f64 + 1.0) / 2.0;
            let b = (flat[base + 2 * plane + i] as f64 + 1.0) / 2.0;
            mask[[y, x]] = u8::from(g - r.max(b) > tau);
        }
    }
    Ok(mask)
}

fn check_dims(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return config_err(format!(
            "mask dimension mismatch: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        ));
    }
    Ok(())
}

/// Fraction of pixels classified correctly: (TP + TN) / total.
pub fn pixel_accuracy(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_dims(pred, gt)?;
    let correct = pred
        .iter()
        .zip(gt.iter())
        .filter(|(p, g)| (**p != 0) == (**g != 0))
        .count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Dice coefficient 2|pred ∩ gt| / (|pred| + |gt|); both masks empty → 1.0.
pub fn dice(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_dims(pred, gt)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (*p != 0, *g != 0);
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / total as f64)
    }
}

/// Mean Dice between consecutive masks of one ordered trajectory.
pub fn temporal_stability(masks: &[Array2<u8>]) -> Result<f64> {
    if masks.len() < 2 {
        return config_err("temporal stability needs at least 2 frames");
    }
    let mut sum = 0.0;
    for pair in masks.windows(2) {
        sum += dice(&pair[0], &pair[1])?;
    }
    Ok(sum / (masks.len() - 1) as f64)
}

/// Alpha-blend pure green (alpha 0.5) into the masked pixels of an RGB image
/// in `[-1, 1]`; unmasked pixels are returned untouched.
pub fn overlay(oc_input: &ArrayD<f32>, mask: &Array2<u8>) -> Result<ArrayD<f32>> {
    let s = oc_input.shape();
    let (h, w) = match s {
        [1, 3, h, w] | [3, h, w] => (*h, *w),
        _ => return config_err(format!("expected [1,3,H,W] image tensor, got {s:?}")),
    };
    if mask.dim() != (h, w) {
        return config_err(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        ));
    }
    let mut out = oc_input.clone();
    let plane = h * w;
    let flat = out.as_slice_mut().expect("image tensor must be contiguous");
    let base = flat.len() - 3 * plane;
    const GREEN: [f32; 3] = [-1.0, 1.0, -1.0];
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                for c in 0..3 {
                    let i = base + c * plane + y * w + x;
                    flat[i] = 0.5 * flat[i] + 0.5 * GREEN[c];
                }
            }
        }
    }
    Ok(out)
}

/// Metrics for one evaluated frame.
#[derive(Clone, Debug, Serialize)]
pub struct FrameMetrics {
    pub frame_id: String,
    pub accuracy: f64,
    pub dice: f64,
}

/// Aggregate segmentation metrics. `accuracy` and `dice` are unweighted means
/// over frames; `accuracy_pixel_pooled` pools correct-pixel counts over the
/// whole set, which can differ when frame sizes vary.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub frame_count: usize,
    pub accuracy: f64,
    pub accuracy_pixel_pooled: f64,
    pub dice: f64,
    pub frames: Vec<FrameMetrics>,
}

pub const FRAME_CSV_HEADER: &str = "frame_id,accuracy,dice";

impl MetricsReport {
    /// Compute the report from `(frame_id, predicted mask, ground truth)` rows.
    pub fn from_masks(rows: &[(String, Array2<u8>, Array2<u8>)]) -> Result<Self> {
        if rows.is_empty() {
            return config_err("no frames to evaluate");
        }
        let frames: Vec<FrameMetrics> = rows
            .iter()
            .map(|(id, pred, gt)| {
                Ok(FrameMetrics {
                    frame_id: id.clone(),
                    accuracy: pixel_accuracy(pred, gt)?,
                    dice: dice(pred, gt)?,
                })
            })
            .collect::<Result<_>>()?;
        let n = frames.len() as f64;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (_, pred, gt) in rows {
            correct += pred
                .iter()
                .zip(gt.iter())
                .filter(|(p, g)| (**p != 0) == (**g != 0))
                .count();
            total += pred.len();
        }
        Ok(MetricsReport {
            frame_count: frames.len(),
            accuracy: frames.iter().map(|f| f.accuracy).sum::<f64>() / n,
            accuracy_pixel_pooled: correct as f64 / total as f64,
            dice: frames.iter().map(|f| f.dice).sum::<f64>() / n,
            frames,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-frame rows as CSV (one line per frame plus header).
    pub fn per_frame_csv(&self) -> String {
        let mut out = String::from(FRAME_CSV_HEADER);
        out.push('\n');
        for f in &self.frames {
            writeln!(out, "{},{},{}", f.frame_id, f.accuracy, f.dice).unwrap();
        }
        out
    }
}

/// Evaluate two directories of mask PNGs that must contain identical frame
/// ids (file stems). Missing ids on either side are a configuration error
/// listing the offending ids.
pub fn evaluate_mask_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<MetricsReport> {
    let stems = |dir: &Path| -> Result<Vec<String>> {
        Ok(list_pngs(dir)?
            .iter()
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect())
    };
    let pred_ids = stems(pred_dir)?;
    let gt_ids = stems(gt_dir)?;
    let missing_gt: Vec<&String> = pred_ids.iter().filter(|i| !gt_ids.contains(i)).collect();
    let missing_pred: Vec<&String> = gt_ids.iter().filter(|i| !pred_ids.contains(i)).collect();
    if !missing_gt.is_empty() || !missing_pred.is_empty() {
        return config_err(format!(
            "frame id mismatch: missing from ground truth {missing_gt:?}, missing from predictions {missing_pred:?}"
        ));
    }
    if pred_ids.is_empty() {
        return config_err("no mask PNGs to evaluate");
    }
    let load_pair = |id: &String| -> Result<(String, Array2<u8>, Array2<u8>)> {
        let pred = load_mask(&pred_dir.join(format!("{id}.png")))?;
        let gt = load_mask(&gt_dir.join(format!("{id}.png")))?;
        Ok((id.clone(), pred, gt))
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<_> = pred_ids.par_iter().map(load_pair).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<_> = pred_ids.iter().map(load_pair).collect::<Result<_>>()?;
    MetricsReport::from_masks(&rows)
}

/// Write a static HTML contact sheet of `(frame_id, relative image path)`
/// entries next to the overlay PNGs.
pub fn write_contact_sheet(path: &Path, title: &str, entries: &[(String, String)]) -> Result<()> {
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">");
    writeln!(html, "<title>{title}</title>").unwrap();
    html.push_str(
        "<style>body{font-family:sans-serif;background:#222;color:#eee}\
         figure{display:inline-block;margin:6px;text-align:center}\
         img{image-rendering:pixelated;width:128px;height:128px}\
         figcaption{font-size:11px}</style></head><body>\n",
    );
    writeln!(html, "<h1>{title}</h1>").unwrap();
    for (id, rel) in entries {
        writeln!(
            html,
            "<figure><img src=\"{rel}\" alt=\"{id}\"><figcaption>{id}</figcaption></figure>"
        )
        .unwrap();
    }
    html.push_str("</body></html>\n");
    std::fs::write(path, html)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_mask;
    use crate::error::Error;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn pixel_image(r: f32, g: f32, b: f32) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&[1, 3, 1, 1]), vec![r, g, b]).unwrap()
    }

    #[test]
    fn binarize_hand_values() {
        // pure green
        assert_eq!(
            binarize_missed(&pixel_image(-1.0, 1.0, -1.0), DEFAULT_TAU).unwrap()[[0, 0]],
            1
        );
        // gray: green never dominates
        assert_eq!(
            binarize_missed(&pixel_image(0.2, 0.2, 0.2), DEFAULT_TAU).unwrap()[[0, 0]],
            0
        );
        // rescaled channels (0.3, 0.55, 0.3): margin 0.25
        let px = pixel_image(2.0 * 0.3 - 1.0, 2.0 * 0.55 - 1.0, 2.0 * 0.3 - 1.0);
        assert_eq!(binarize_missed(&px, 0.2).unwrap()[[0, 0]], 1);
        assert_eq!(binarize_missed(&px, 0.3).unwrap()[[0, 0]], 0);
    }

    #[test]
    fn binarize_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let img = ArrayD::from_shape_vec(
            IxDyn(&[1, 3, 16, 16]),
            (0..3 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut prev = binarize_missed(&img, 0.0).unwrap();
        for i in 1..=10 {
            let cur = binarize_missed(&img, i as f64 / 10.0).unwrap();
            for (lo, hi) in cur.iter().zip(prev.iter()) {
                assert!(lo <= hi, "raising tau added a mask pixel");
            }
            prev = cur;
        }
    }

    fn mask_from(bits: &[u8], h: usize, w: usize) -> Array2<u8> {
        Array2::from_shape_vec((h, w), bits.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_hand_values() {
        let gt = mask_from(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0], 2, 5);
        // TP = 3 (first three), TN = 5 (last five), two errors in the middle
        let pred = mask_from(&[1, 1, 1, 0, 1, 0, 0, 0, 0, 0], 2, 5);
        assert!((pixel_accuracy(&pred, &gt).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(pixel_accuracy(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn dice_hand_values() {
        let gt = mask_from(&[1, 1, 1, 1, 1, 1, 0, 0, 0, 0], 2, 5); // 6 px
        let pred = mask_from(&[1, 1, 1, 0, 0, 0, 1, 0, 0, 0], 2, 5); // 4 px, 3 overlap
        assert!((dice(&pred, &gt).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(dice(&gt, &gt).unwrap(), 1.0);
        let empty = Array2::zeros((2, 5));
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        let disjoint = mask_from(&[0, 0, 0, 0, 0, 0, 0, 1, 1, 1], 2, 5);
        assert_eq!(dice(&disjoint, &gt).unwrap(), 0.0);
    }

    #[test]
    fn dims_must_match() {
        let a = Array2::zeros((2, 2));
        let b = Array2::zeros((2, 3));
        assert!(matches!(pixel_accuracy(&a, &b), Err(Error::Config(_))));
        assert!(matches!(dice(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn metrics_match_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for _ in 0..1000 {
            let bits = |rng: &mut ChaCha8Rng| {
                Array2::from_shape_fn((16, 16), |_| u8::from(rng.gen_bool(0.3)))
            };
            let pred = bits(&mut rng);
            let gt = bits(&mut rng);
            let mut tp = 0;
            let mut tn = 0;
            let mut np = 0;
            let mut ng = 0;
            for (p, g) in pred.iter().zip(gt.iter()) {
                tp += usize::from(*p == 1 && *g == 1);
                tn += usize::from(*p == 0 && *g == 0);
                np += usize::from(*p == 1);
                ng += usize::from(*g == 1);
            }
            let acc_oracle = (tp + tn) as f64 / 256.0;
            let dice_oracle = if np + ng == 0 {
                1.0
            } else {
                2.0 * tp as f64 / (np + ng) as f64
            };
            assert_eq!(pixel_accuracy(&pred, &gt).unwrap(), acc_oracle);
            assert_eq!(dice(&pred, &gt).unwrap(), dice_oracle);
            // symmetry and bounds
            assert_eq!(dice(&pred, &gt).unwrap(), dice(&gt, &pred).unwrap());
            let d = dice(&pred, &gt).unwrap();
            let a = pixel_accuracy(&pred, &gt).unwrap();
            assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn temporal_stability_hand_values() {
        let m = mask_from(&[1, 0, 1, 0], 2, 2);
        assert_eq!(temporal_stability(&[m.clone(), m.clone(), m.clone()]).unwrap(), 1.0);
        let inv = mask_from(&[0, 1, 0, 1], 2, 2);
        assert_eq!(temporal_stability(&[m.clone(), inv.clone()]).unwrap(), 0.0);
        // consecutive Dice 0.8 then 0.6 → mean 0.7:
        // a=5px, b=5px sharing 4 → 8/10 = 0.8; c=5px sharing 3 with b → 6/10 = 0.6
        let a = mask_from(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0], 2, 5);
        let b = mask_from(&[1, 1, 1, 1, 0, 1, 0, 0, 0, 0], 2, 5);
        let c = mask_from(&[1, 1, 1, 0, 0, 0, 1, 1, 0, 0], 2, 5);
        assert!((dice(&a, &b).unwrap() - 0.8).abs() < 1e-12);
        assert!((dice(&b, &c).unwrap() - 0.6).abs() < 1e-12);
        assert!((temporal_stability(&[a, b, c]).unwrap() - 0.7).abs() < 1e-12);
        let single = vec![m];
        assert!(matches!(
            temporal_stability(&single),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overlay_blend_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = ArrayD::from_shape_vec(
            IxDyn(&[1, 3, 4, 4]),
            (0..48).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
        )
        .unwrap();
        let empty = Array2::zeros((4, 4));
        assert_eq!(overlay(&img, &empty).unwrap(), img);
        let full = Array2::ones((4, 4));
        let out = overlay(&img, &full).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert!(out[[0, 1, y, x]] >= img[[0, 1, y, x]]);
            }
        }
        let mut half = Array2::zeros((4, 4));
        half[[1, 2]] = 1;
        let out = overlay(&img, &half).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    if (y, x) != (1, 2) {
                        assert_eq!(out[[0, c, y, x]], img[[0, c, y, x]]);
                    }
                }
            }
        }
        let bad = Array2::zeros((3, 3));
        assert!(matches!(overlay(&img, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let gt = mask_from(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0], 2, 5);
        let pred = mask_from(&[1, 1, 1, 0, 1, 0, 0, 0, 0, 0], 2, 5);
        let rows = vec![
            ("f0".to_string(), gt.clone(), gt.clone()),
            ("f1".to_string(), pred, gt),
        ];
        let r = MetricsReport::from_masks(&rows).unwrap();
        assert_eq!(r.frame_count, 2);
        assert!((r.accuracy - 0.9).abs() < 1e-12);
        assert!((r.accuracy_pixel_pooled - 0.9).abs() < 1e-12);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["frame_count"], 2);
        let csv = r.per_frame_csv();
        assert!(csv.starts_with(FRAME_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn dir_evaluation_matches_and_rejects_mismatch() {
        let dir = tempdir().unwrap();
        let pred_dir = dir.path().join("pred");
        let gt_dir = dir.path().join("gt");
        std::fs::create_dir_all(&pred_dir).unwrap();
        std::fs::create_dir_all(&gt_dir).unwrap();
        let m = mask_from(&[1, 0, 0, 1], 2, 2);
        for id in ["a", "b"] {
            save_mask(&pred_dir.join(format!("{id}.png")), &m).unwrap();
            save_mask(&gt_dir.join(format!("{id}.png")), &m).unwrap();
        }
        let r = evaluate_mask_dirs(&pred_dir, &gt_dir).unwrap();
        assert_eq!(r.frame_count, 2);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.dice, 1.0);
        // an extra prediction with no ground truth is named in the error
        save_mask(&pred_dir.join("zz.png"), &m).unwrap();
        match evaluate_mask_dirs(&pred_dir, &gt_dir) {
            Err(Error::Config(msg)) => assert!(msg.contains("zz"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn contact_sheet_lists_entries() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("index.html");
        let entries = vec![
            ("f0".to_string(), "overlays/f0.png".to_string()),
            ("f1".to_string(), "overlays/f1.png".to_string()),
        ];
        write_contact_sheet(&path, "overlays", &entries).unwrap();
        let html = std::fs::read_to_string(&path).unwrap();
        assert!(html.contains("overlays/f0.png") && html.contains("f1"));
    }
}
