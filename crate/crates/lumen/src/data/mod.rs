//! On-disk dataset access: PNG <-> tensor conversion, the dataset manifest,
//! and the unpaired two-domain loader used by training.
//!
//! Layout: `<root>/{trainA,trainB,valA,valB,testA,testB}` with A = OC and
//! B = VC; masks live next to their split as `<split>_masks`. Tensors are
//! `[N, 3, H, W]` in `[-1, 1]`.

use crate::error::{config_err, Error, Result};
use crate::rng::SeededStream;
use image::{GrayImage, RgbImage};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const SPLITS: [&str; 6] = ["trainA", "trainB", "valA", "valB", "testA", "testB"];

/// Load an RGB PNG as a `[1, 3, H, W]` tensor in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<ArrayD<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (y, x_, px) in img.enumerate_pixels().map(|(x, y, p)| (y as usize, x as usize, p)) {
        for c in 0..3 {
            data[c * h * w + y * w + x_] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[1, 3, h, w]), data).unwrap())
}

/// Write a `[1, 3, H, W]` (or `[3, H, W]`) tensor in `[-1, 1]` as an RGB PNG.
pub fn save_image(path: &Path, t: &ArrayD<f32>) -> Result<()> {
    let s = t.shape();
    let (c, h, w) = match s {
        [1, c, h, w] | [c, h, w] => (*c, *h, *w),
        _ => return config_err(format!("expected [1,3,H,W] image tensor, got {s:?}")),
    };
    if c != 3 {
        return config_err(format!("expected 3 channels, got {c}"));
    }
    let v = t.as_slice().expect("image tensor must be contiguous");
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let f = (v[ch * h * w + y * w + x].clamp(-1.0, 1.0) + 1.0) * 127.5;
                px[ch] = f.round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(Error::from)
}

/// Load a single-channel 0/255 mask PNG as a 0/1 grid.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut m = Array2::zeros((h, w));
    for (x, y, p) in img.enumerate_pixels() {
        m[[y as usize, x as usize]] = u8::from(p.0[0] >= 128);
    }
    Ok(m)
}

pub fn save_mask(path: &Path, m: &Array2<u8>) -> Result<()> {
    let (h, w) = m.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([m[[y, x]] * 255]));
        }
    }
    img.save(path).map_err(Error::from)
}

/// One frame entry in the dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub frame_id: String,
    pub domain: char, // 'A' (OC) or 'B' (VC)
    pub scene_seed: u64,
    pub pose_index: usize,
    pub image_path: String,
    pub mask_path: String,
}

pub const MANIFEST_HEADER: &str = "frame_id,domain,scene_seed,pose_index,image_path,mask_path";

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 64);
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.frame_id, r.domain, r.scene_seed, r.pose_index, r.image_path, r.mask_path
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return config_err(format!("bad manifest header: {other:?}"));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return config_err(format!("manifest line {}: expected 6 fields", i + 2));
        }
        rows.push(ManifestRow {
            frame_id: f[0].to_string(),
            domain: f[1].chars().next().unwrap_or('?'),
            scene_seed: f[2]
                .parse()
                .map_err(|_| Error::Config(format!("manifest line {}: bad seed", i + 2)))?,
            pose_index: f[3]
                .parse()
                .map_err(|_| Error::Config(format!("manifest line {}: bad pose", i + 2)))?,
            image_path: f[4].to_string(),
            mask_path: f[5].to_string(),
        });
    }
    Ok(rows)
}

/// Sorted PNG paths directly inside a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    Ok(files)
}

/// Unpaired loader over the two training splits. Batches are drawn by
/// independent uniform index draws from the loader stream (sampling with
/// replacement; there is no epoch structure).
pub struct UnpairedLoader {
    files_a: Vec<PathBuf>,
    files_b: Vec<PathBuf>,
    image_size: usize,
}

impl UnpairedLoader {
    pub fn new(root: &Path, image_size: usize) -> Result<Self> {
        let dir_a = root.join("trainA");
        let dir_b = root.join("trainB");
        for d in [&dir_a, &dir_b] {
            if !d.is_dir() {
                return config_err(format!("missing dataset directory {}", d.display()));
            }
        }
        let files_a = list_pngs(&dir_a)?;
        let files_b = list_pngs(&dir_b)?;
        if files_a.is_empty() || files_b.is_empty() {
            return config_err("training splits must contain at least one PNG each");
        }
        Ok(UnpairedLoader {
            files_a,
            files_b,
            image_size,
        })
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.files_a.len(), self.files_b.len())
    }

    /// One unpaired batch: (OC tensor, VC tensor), each `[B, 3, H, W]`.
    pub fn next_batch(
        &self,
        stream: &mut SeededStream,
        batch: usize,
    ) -> Result<(ArrayD<f32>, ArrayD<f32>)> {
        let a = self.stack(stream, &self.files_a, batch)?;
        let b = self.stack(stream, &self.files_b, batch)?;
        Ok((a, b))
    }

    fn stack(
        &self,
        stream: &mut SeededStream,
        files: &[PathBuf],
        batch: usize,
    ) -> Result<ArrayD<f32>> {
        let hw = self.image_size;
        let mut out = ArrayD::zeros(IxDyn(&[batch, 3, hw, hw]));
        for i in 0..batch {
            let idx = stream.rng.gen_range(0..files.len());
            let img = load_image(&files[idx])?;
            if img.shape() != [1, 3, hw, hw] {
                return config_err(format!(
                    "{}: expected {hw}x{hw} RGB frame, got shape {:?}",
                    files[idx].display(),
                    img.shape()
                ));
            }
            out.index_axis_mut(ndarray::Axis(0), i)
                .assign(&img.index_axis(ndarray::Axis(0), 0));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn image_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut t = ArrayD::zeros(IxDyn(&[1, 3, 4, 4]));
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    t[[0, c, y, x]] = ((c + y + x) as f32 / 10.0) * 2.0 - 1.0;
                }
            }
        }
        save_image(&path, &t).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in t.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1.0 / 127.5, "{a} vs {b}");
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = Array2::zeros((5, 3));
        m[[0, 0]] = 1;
        m[[4, 2]] = 1;
        save_mask(&path, &m).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let rows = vec![
            ManifestRow {
                frame_id: "a_000001_0007".into(),
                domain: 'A',
                scene_seed: 31,
                pose_index: 7,
                image_path: "trainA/a_000001_0007.png".into(),
                mask_path: "trainA_masks/a_000001_0007.png".into(),
            },
            ManifestRow {
                frame_id: "b_000002_0001".into(),
                domain: 'B',
                scene_seed: 44,
                pose_index: 1,
                image_path: "trainB/b_000002_0001.png".into(),
                mask_path: "trainB_masks/b_000002_0001.png".into(),
            },
        ];
        write_manifest(&path, &rows).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), rows);
    }

    #[test]
    fn loader_rejects_missing_split() {
        let dir = tempdir().unwrap();
        assert!(matches!(
            UnpairedLoader::new(dir.path(), 64),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loader_draws_are_deterministic() {
        use crate::rng::{SeededStream, StreamId};
        let dir = tempdir().unwrap();
        for split in ["trainA", "trainB"] {
            let d = dir.path().join(split);
            std::fs::create_dir_all(&d).unwrap();
            for i in 0..3 {
                let t = ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), i as f32 / 3.0);
                save_image(&d.join(format!("{i}.png")), &t).unwrap();
            }
        }
        let loader = UnpairedLoader::new(dir.path(), 4).unwrap();
        let draw = |seed| {
            let mut s = SeededStream::new(seed, StreamId::Loader);
            let (a, b) = loader.next_batch(&mut s, 2).unwrap();
            (a, b)
        };
        assert_eq!(draw(5), draw(5));
    }
}
