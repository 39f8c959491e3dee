//! Checkpoint-driven inference: per-frame OC→VC translation with mask and
//! overlay outputs, and one-to-many OC sampling from a single input frame.
//!
//! Every frame is processed independently — no state is carried between
//! frames — so results do not depend on processing order.

use crate::checkpoint::Checkpoint;
use crate::config::{load_config, TrainConfig};
use crate::data::{list_pngs, load_image, save_image, save_mask};
use crate::error::{config_err, Result};
use crate::eval::{binarize_missed, overlay, temporal_stability, write_contact_sheet};
use crate::model::{sample_noise, SharedLatentModel};
use crate::nn::{Graph, ParamStore};
use crate::rng::{SeededStream, StreamId};
use ndarray::ArrayD;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// A trained model rebuilt from a checkpoint, ready for forward passes.
pub struct LoadedModel {
    pub cfg: TrainConfig,
    pub store: ParamStore<f32>,
    pub model: SharedLatentModel,
    pub step: u64,
}

/// Rebuild the architecture recorded in a checkpoint and restore its weights.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = load_config(
        TrainConfig::default(),
        Some(&ckpt.config_text),
        &[],
        TrainConfig::set,
    )?;
    let mut store = ParamStore::new();
    let mut init = SeededStream::new(cfg.seed, StreamId::Init);
    let model = SharedLatentModel::new(cfg.arch(), &mut store, &mut init);
    ckpt.restore_params(&mut store)?;
    Ok(LoadedModel {
        cfg,
        store,
        model,
        step: ckpt.step,
    })
}

impl LoadedModel {
    /// OC image `[1,3,H,W]` -> VC image with overlay; deterministic.
    pub fn translate_to_vc(&self, image: &ArrayD<f32>) -> Result<ArrayD<f32>> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(image.clone());
        let y = self.model.translate_to_vc(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InferSummary {
    pub checkpoint_step: u64,
    pub frames: usize,
    pub skipped: usize,
    pub tau: f64,
    /// Mean Dice between consecutive predicted masks; absent with < 2 frames.
    pub temporal_stability: Option<f64>,
    pub frames_per_second: f64,
}

/// Translate every readable PNG in `input_dir`, writing per-frame VC images,
/// masks, and overlays under `out_dir` plus `summary.json` and an HTML
/// contact sheet. Unreadable frames are skipped with a warning and counted.
pub fn infer_dir(
    ckpt_path: &Path,
    input_dir: &Path,
    out_dir: &Path,
    tau: f64,
) -> Result<InferSummary> {
    let loaded = load_model(ckpt_path)?;
    let files = list_pngs(input_dir)?;
    if files.is_empty() {
        return config_err(format!("no PNG frames in {}", input_dir.display()));
    }
    for sub in ["vc", "masks", "overlays"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let start = Instant::now();
    let process = |file: &PathBuf| -> Option<Result<(String, ndarray::Array2<u8>)>> {
        let id = file.file_stem()?.to_string_lossy().into_owned();
        let img = match load_image(file) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", file.display());
                return None;
            }
        };
        let run = || -> Result<(String, ndarray::Array2<u8>)> {
            let vc = loaded.translate_to_vc(&img)?;
            let mask = binarize_missed(&vc, tau)?;
            let shaded = overlay(&img, &mask)?;
            save_image(&out_dir.join("vc").join(format!("{id}.png")), &vc)?;
            save_mask(&out_dir.join("masks").join(format!("{id}.png")), &mask)?;
            save_image(&out_dir.join("overlays").join(format!("{id}.png")), &shaded)?;
            Ok((id.clone(), mask))
        };
        Some(run())
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = files.par_iter().filter_map(process).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = files.iter().filter_map(process).collect();
    let mut done: Vec<(String, ndarray::Array2<u8>)> =
        results.into_iter().collect::<Result<_>>()?;
    done.sort_by(|a, b| a.0.cmp(&b.0));
    let elapsed = start.elapsed().as_secs_f64();

    let masks: Vec<_> = done.iter().map(|(_, m)| m.clone()).collect();
    let stability = if masks.len() >= 2 {
        Some(temporal_stability(&masks)?)
    } else {
        None
    };
    let entries: Vec<(String, String)> = done
        .iter()
        .map(|(id, _)| (id.clone(), format!("overlays/{id}.png")))
        .collect();
    write_contact_sheet(&out_dir.join("index.html"), "predicted overlays", &entries)?;
    let summary = InferSummary {
        checkpoint_step: loaded.step,
        frames: done.len(),
        skipped: files.len() - done.len(),
        tau,
        temporal_stability: stability,
        frames_per_second: done.len() as f64 / elapsed.max(1e-9),
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

/// Which translation domain the sampling input frame belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleDomain {
    Oc,
    Vc,
}

#[derive(Debug)]
pub struct SampleOutcome {
    pub paths: Vec<PathBuf>,
    /// Mean per-pixel L1 distance over all sample pairs; 0.0 when k = 1.
    pub mean_pairwise_l1: f64,
}

/// Mean per-pixel L1 distance over all unordered image pairs.
pub fn mean_pairwise_l1(images: &[ArrayD<f32>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let d: f64 = images[i]
                .iter()
                .zip(images[j].iter())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum();
            sum += d / images[i].len() as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Decode `k` OC variations of one input frame's geometry, one per noise
/// draw. A VC input is encoded directly; an OC input reaches the shared
/// latent through the VC-side encoder.
pub fn sample_variations(
    ckpt_path: &Path,
    input_path: &Path,
    domain: SampleDomain,
    k: usize,
    noise_seed: u64,
    out_dir: &Path,
) -> Result<SampleOutcome> {
    if k < 1 {
        return config_err("sample count k must be at least 1");
    }
    let loaded = load_model(ckpt_path)?;
    let img = load_image(input_path)?;
    std::fs::create_dir_all(out_dir)?;
    let mut noise = SeededStream::new(noise_seed, StreamId::Noise);
    let mut g = Graph::new(&loaded.store);
    let x = g.constant(img);
    let latent = match domain {
        SampleDomain::Vc => loaded.model.g_oc.encode(&mut g, x)?,
        SampleDomain::Oc => loaded.model.g_vc.encode(&mut g, x)?,
    };
    let mut paths = Vec::with_capacity(k);
    let mut outputs = Vec::with_capacity(k);
    for i in 0..k {
        let z = g.constant(sample_noise(&mut noise, 1, loaded.cfg.noise_dim));
        let y = loaded.model.g_oc.decode(&mut g, latent, Some(z))?;
        let path = out_dir.join(format!("sample_{i:03}.png"));
        save_image(&path, g.value(y))?;
        outputs.push(g.value(y).clone());
        paths.push(path);
    }
    Ok(SampleOutcome {
        paths,
        mean_pairwise_l1: mean_pairwise_l1(&outputs),
    })
}
