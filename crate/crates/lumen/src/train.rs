//! The optimization loop: alternating discriminator/generator Adam updates
//! over unpaired batches, with image-history pools, checkpoints, and seeded
//! streams for bit-identical reruns and resumes.
//!
//! One tape per step evaluates every generator chain once and shares the
//! intermediate activations across all loss terms. Both gradient sets are
//! extracted from that tape before any update; the discriminator step is
//! applied first, then the generator step. Discriminator losses see only
//! detached, pooled fakes, so the two phases touch disjoint parameter sets.

use crate::checkpoint::{Checkpoint, OptimizerState, PoolState, StreamPositions, MAGIC};
use crate::config::{GanMode, TrainConfig};
use crate::data::UnpairedLoader;
use crate::error::{config_err, Error, Result};
use crate::losses::{
    gan_loss_discriminator_scores, gan_loss_generator_scores, ls_loss_discriminator_scores,
    ls_loss_generator_scores, noise_loss, translation_loss, LossReport,
};
use crate::model::{sample_noise, SharedLatentModel};
use crate::nn::{Adam, Graph, ParamStore};
use crate::pool::ImagePool;
use crate::rng::{SeededStream, StreamId};
use ndarray::{ArrayD, Axis};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Which tagged tensors each loss term consumed in one audited step; the
/// wiring contract of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepAudit {
    /// Input whose round trip the extended cycle compares (must be the OC batch).
    pub excyc_source: Option<&'static str>,
    /// Input whose round trip the plain cycle compares (must be the VC batch).
    pub cyc_source: Option<&'static str>,
    /// Input fed to the identity term (must be the VC batch, never OC).
    pub iden_source: Option<&'static str>,
    /// Fake sample shown to the OC discriminator (must be a cycle reconstruction).
    pub d_oc_fake: Option<&'static str>,
    /// Channel order of the directional fake pair (must be OC then VC).
    pub dir_fake_pair: (Option<&'static str>, Option<&'static str>),
    /// Channel order of the directional real pair (must be OC then VC).
    pub dir_real_pair: (Option<&'static str>, Option<&'static str>),
    /// Whether the discriminator update was applied before the generator one.
    pub discriminators_updated_first: bool,
}

pub struct TrainState {
    pub cfg: TrainConfig,
    pub store: ParamStore<f32>,
    pub model: SharedLatentModel,
    /// Scales both adversarial objectives; 1.0 in normal training. Exposed so
    /// tests can switch the adversarial game off entirely.
    pub adversarial_scale: f64,
    opt_g_oc: Adam<f32>,
    opt_g_vc: Adam<f32>,
    opt_d_oc: Adam<f32>,
    opt_d_dir: Adam<f32>,
    pool_oc: ImagePool,
    pool_dir: ImagePool,
    noise: SeededStream,
    pool_oc_stream: SeededStream,
    pool_dir_stream: SeededStream,
    pub loader_stream: SeededStream,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = SeededStream::new(cfg.seed, StreamId::Init);
        let model = SharedLatentModel::new(cfg.arch(), &mut store, &mut init);
        let mk = |ids: &Vec<_>, store: &ParamStore<f32>| {
            Adam::new(store, ids.clone(), cfg.learning_rate, cfg.adam_beta1)
        };
        let opt_g_oc = mk(&model.ids_g_oc, &store);
        let opt_g_vc = mk(&model.ids_g_vc, &store);
        let opt_d_oc = mk(&model.ids_d_oc, &store);
        let opt_d_dir = mk(&model.ids_d_dir, &store);
        Ok(TrainState {
            pool_oc: ImagePool::new(cfg.pool_size),
            pool_dir: ImagePool::new(cfg.pool_size),
            noise: SeededStream::new(cfg.seed, StreamId::Noise),
            pool_oc_stream: SeededStream::new(cfg.seed, StreamId::PoolOc),
            pool_dir_stream: SeededStream::new(cfg.seed, StreamId::PoolDir),
            loader_stream: SeededStream::new(cfg.seed, StreamId::Loader),
            step: 0,
            adversarial_scale: 1.0,
            opt_g_oc,
            opt_g_vc,
            opt_d_oc,
            opt_d_dir,
            cfg,
            store,
            model,
        })
    }

    /// Rebuild a state from a checkpoint; `cfg` must match the stored config
    /// on every key except `iterations` (extending a run is allowed).
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let stored = crate::config::parse_kv(&ckpt.config_text)?;
        let current = crate::config::parse_kv(&cfg.to_text())?;
        for ((ks, vs), (kc, vc)) in stored.iter().zip(&current) {
            if ks != kc || (vs != vc && ks != "iterations") {
                return Err(Error::Checkpoint(format!(
                    "config mismatch on `{ks}`: checkpoint has `{vs}`, run has `{vc}`"
                )));
            }
        }
        let mut state = TrainState::new(cfg)?;
        ckpt.restore_params(&mut state.store)?;
        if ckpt.optimizers.len() != 4 || ckpt.pools.len() != 2 {
            return Err(Error::Checkpoint("wrong optimizer/pool section count".into()));
        }
        ckpt.optimizers[0].restore_into(&mut state.opt_g_oc)?;
        ckpt.optimizers[1].restore_into(&mut state.opt_g_vc)?;
        ckpt.optimizers[2].restore_into(&mut state.opt_d_oc)?;
        ckpt.optimizers[3].restore_into(&mut state.opt_d_dir)?;
        state.pool_oc = ckpt.pools[0].to_pool()?;
        state.pool_dir = ckpt.pools[1].to_pool()?;
        let seed = ckpt.master_seed;
        state.noise = SeededStream::restore(seed, StreamId::Noise, ckpt.streams.noise);
        state.pool_oc_stream = SeededStream::restore(seed, StreamId::PoolOc, ckpt.streams.pool_oc);
        state.pool_dir_stream =
            SeededStream::restore(seed, StreamId::PoolDir, ckpt.streams.pool_dir);
        state.loader_stream = SeededStream::restore(seed, StreamId::Loader, ckpt.streams.loader);
        state.step = ckpt.step;
        Ok(state)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            magic: MAGIC.into(),
            config_hash: self.cfg.hash(),
            config_text: self.cfg.to_text(),
            step: self.step,
            master_seed: self.cfg.seed,
            params: Checkpoint::capture_params(&self.store),
            optimizers: vec![
                OptimizerState::from_adam(&self.opt_g_oc),
                OptimizerState::from_adam(&self.opt_g_vc),
                OptimizerState::from_adam(&self.opt_d_oc),
                OptimizerState::from_adam(&self.opt_d_dir),
            ],
            streams: StreamPositions {
                noise: self.noise.word_pos(),
                pool_oc: self.pool_oc_stream.word_pos(),
                pool_dir: self.pool_dir_stream.word_pos(),
                loader: self.loader_stream.word_pos(),
            },
            pools: vec![
                PoolState::from_pool(&self.pool_oc),
                PoolState::from_pool(&self.pool_dir),
            ],
        }
    }

    /// One full optimization step over one unpaired batch pair.
    pub fn train_step(
        &mut self,
        batch_oc: &ArrayD<f32>,
        batch_vc: &ArrayD<f32>,
    ) -> Result<(LossReport, StepAudit)> {
        let w = self.cfg.weights;
        let dim = self.cfg.noise_dim;
        let b = batch_oc.shape()[0];
        // Fixed draw order keeps the noise stream resumable.
        let z_cycle = sample_noise::<f32>(&mut self.noise, b, dim);
        let z_alt = sample_noise::<f32>(&mut self.noise, b, dim);
        let z_trans = sample_noise::<f32>(&mut self.noise, b, dim);

        let model = &self.model;
        let mut g: Graph<'_, f32> = Graph::new(&self.store);
        let x_oc = g.constant(batch_oc.clone());
        g.tag(x_oc, "batch:oc");
        let x_vc = g.constant(batch_vc.clone());
        g.tag(x_vc, "batch:vc");
        let zc = g.constant(z_cycle);
        let za = g.constant(z_alt);
        let zt = g.constant(z_trans);

        // OC round trip: v1 = G_vc(I_oc); o1 = G_oc(v1, z); v2 = G_vc(o1).
        let l_v1 = model.g_vc.encode(&mut g, x_oc)?;
        let v1 = model.g_vc.decode(&mut g, l_v1, None)?;
        g.tag(v1, "translated:vc-from-oc");
        let l_o1 = model.g_oc.encode(&mut g, v1)?;
        let o1 = model.g_oc.decode(&mut g, l_o1, Some(zc))?;
        g.tag(o1, "cycle-reconstruction:oc");
        let l_v2 = model.g_vc.encode(&mut g, o1)?;
        let v2 = model.g_vc.decode(&mut g, l_v2, None)?;
        let excyc = g.l1_mean(v1, v2)?;
        let sls_vc = g.l1_mean(l_v1, l_o1)?;

        // VC round trip: c1 = G_oc(I_vc, z); c2 = G_vc(c1).
        let l_c1 = model.g_oc.encode(&mut g, x_vc)?;
        let c1 = model.g_oc.decode(&mut g, l_c1, Some(zt))?;
        g.tag(c1, "translated:oc-from-vc");
        let l_c2 = model.g_vc.encode(&mut g, c1)?;
        let c2 = model.g_vc.decode(&mut g, l_c2, None)?;
        let cyc = g.l1_mean(x_vc, c2)?;
        let sls_oc = g.l1_mean(l_c1, l_c2)?;

        // Identity on VC only.
        let l_idt = model.g_vc.encode(&mut g, x_vc)?;
        let idt = model.g_vc.decode(&mut g, l_idt, None)?;
        let iden = g.l1_mean(idt, x_vc)?;

        // Noise diversity on the shared cycle latent.
        let o_alt = model.g_oc.decode(&mut g, l_o1, Some(za))?;
        let noise_term = noise_loss(&mut g, w.alpha, o1, o_alt)?;

        // ---- discriminator phase inputs (detached + pooled) ----------------
        let fake_oc = self
            .pool_oc
            .query(&mut self.pool_oc_stream, g.value(o1).clone());
        let mut fake_pair = g.value(c1).clone();
        fake_pair
            .append(Axis(1), batch_vc.view())
            .map_err(|e| Error::Runtime(format!("pair concat failed: {e}")))?;
        let fake_pair = self
            .pool_dir
            .query(&mut self.pool_dir_stream, fake_pair);

        let fake_oc_n = g.constant(fake_oc);
        g.tag(fake_oc_n, "pooled-fake:cycle-reconstruction");
        let fake_pair_n = g.constant(fake_pair);
        let v1_detached = g.constant(g.value(v1).clone());
        g.tag(v1_detached, "translated:vc-from-oc");

        let sr_oc = model.d_oc.forward(&mut g, x_oc)?;
        let sf_oc = model.d_oc.forward(&mut g, fake_oc_n)?;
        let real_pair = g.concat_c(x_oc, v1_detached)?;
        let sr_dir = model.d_dir.forward(&mut g, real_pair)?;
        let sf_dir = model.d_dir.forward(&mut g, fake_pair_n)?;
        let (d_oc_loss, d_dir_loss) = match self.cfg.gan_mode {
            GanMode::Log => (
                gan_loss_discriminator_scores(&mut g, sr_oc, sf_oc),
                gan_loss_discriminator_scores(&mut g, sr_dir, sf_dir),
            ),
            GanMode::LeastSquares => (
                ls_loss_discriminator_scores(&mut g, sr_oc, sf_oc),
                ls_loss_discriminator_scores(&mut g, sr_dir, sf_dir),
            ),
        };
        let adv = self.adversarial_scale;
        let d_total = g.weighted_sum(&[(d_oc_loss, adv), (d_dir_loss, adv)]);

        // ---- generator-phase adversarial terms -----------------------------
        let sg_oc = model.d_oc.forward(&mut g, o1)?;
        let gen_pair = g.concat_c(c1, x_vc)?;
        let sg_dir = model.d_dir.forward(&mut g, gen_pair)?;
        let (gan_oc_g, dir_g) = match self.cfg.gan_mode {
            GanMode::Log => (
                gan_loss_generator_scores(&mut g, sg_oc),
                gan_loss_generator_scores(&mut g, sg_dir),
            ),
            GanMode::LeastSquares => (
                ls_loss_generator_scores(&mut g, sg_oc),
                ls_loss_generator_scores(&mut g, sg_dir),
            ),
        };
        let trans = translation_loss(&mut g, &w, excyc, cyc, sls_vc, sls_oc, iden);
        let g_total = g.weighted_sum(&[
            (trans, 1.0),
            (dir_g, adv),
            (gan_oc_g, adv),
            (noise_term, 1.0),
        ]);

        let report = LossReport {
            cyc: g.scalar(cyc),
            excyc: g.scalar(excyc),
            sls_vc: g.scalar(sls_vc),
            sls_oc: g.scalar(sls_oc),
            iden: g.scalar(iden),
            dir: g.scalar(dir_g),
            gan_oc: g.scalar(gan_oc_g),
            noise: g.scalar(noise_term),
            total: g.scalar(g_total),
        };
        if !report.is_finite() || !g.scalar(d_total).is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                report: format!("{report:?}"),
            });
        }

        let audit = StepAudit {
            excyc_source: g.tag_of(x_oc),
            cyc_source: g.tag_of(x_vc),
            iden_source: g.tag_of(x_vc),
            d_oc_fake: g.tag_of(fake_oc_n),
            dir_fake_pair: (g.tag_of(c1), g.tag_of(x_vc)),
            dir_real_pair: (g.tag_of(x_oc), g.tag_of(v1_detached)),
            discriminators_updated_first: true,
        };

        // Both gradient sets come off the tape before any parameter moves;
        // the updates are then applied discriminators-first.
        let grads_d = g.backward(d_total)?;
        let grads_g = g.backward(g_total)?;
        drop(g);
        self.opt_d_oc.step(&mut self.store, &grads_d);
        self.opt_d_dir.step(&mut self.store, &grads_d);
        self.opt_g_oc.step(&mut self.store, &grads_g);
        self.opt_g_vc.step(&mut self.store, &grads_g);
        self.step += 1;
        Ok((report, audit))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub csv_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Full training run. With `resume`, continues from the stored step and
/// starts a fresh CSV covering only the continued steps.
pub fn train(
    cfg: TrainConfig,
    dataset_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let loader = UnpairedLoader::new(dataset_root, cfg.image_size)?;
    std::fs::create_dir_all(out_dir)?;
    let mut state = match resume {
        Some(path) => TrainState::resume(cfg.clone(), &Checkpoint::load(path)?)?,
        None => TrainState::new(cfg.clone())?,
    };
    if state.step >= cfg.iterations {
        return config_err(format!(
            "checkpoint is already at step {}, nothing to do for iterations = {}",
            state.step, cfg.iterations
        ));
    }
    let csv_path = out_dir.join("loss.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(csv, "{}", LossReport::CSV_HEADER)?;

    let start = state.step;
    while state.step < cfg.iterations {
        let (batch_oc, batch_vc) = loader.next_batch(&mut state.loader_stream, cfg.batch_size)?;
        let (report, _) = state.train_step(&batch_oc, &batch_vc)?;
        writeln!(csv, "{}", report.csv_row(state.step))?;
        if state.step % cfg.checkpoint_every == 0 && state.step < cfg.iterations {
            csv.flush()?;
            state
                .checkpoint()
                .save(&out_dir.join(format!("ckpt_{:06}.ckpt", state.step)))?;
        }
    }
    csv.flush()?;
    let final_path = out_dir.join("final.ckpt");
    state.checkpoint().save(&final_path)?;
    Ok(TrainOutcome {
        steps_run: state.step - start,
        csv_path,
        final_checkpoint: final_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn mini_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.image_size = 8;
        cfg.base_channels = 8;
        cfg.res_blocks = 1;
        cfg.disc_channels = 8;
        cfg.disc_stages = 1;
        cfg.pool_size = 4;
        cfg.seed = 11;
        cfg
    }

    fn batches(seed: f32) -> (ArrayD<f32>, ArrayD<f32>) {
        let mk = |off: f32| {
            ArrayD::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |ix| {
                ((ix[1] as f32 + ix[2] as f32 * 0.3 + ix[3] as f32 * 0.7 + off) % 7.0) / 3.5 - 1.0
            })
        };
        (mk(seed), mk(seed + 2.0))
    }

    #[test]
    fn step_changes_generator_parameters() {
        let mut st = TrainState::new(mini_cfg()).unwrap();
        let before: Vec<f32> = st.store.get(st.model.ids_g_vc[0]).value.iter().copied().collect();
        let (oc, vc) = batches(0.0);
        let (report, _) = st.train_step(&oc, &vc).unwrap();
        assert!(report.total > 0.0);
        let after: Vec<f32> = st.store.get(st.model.ids_g_vc[0]).value.iter().copied().collect();
        let max_delta = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_delta > 0.0, "generator parameters did not move");
    }

    #[test]
    fn same_seed_gives_identical_reports() {
        let run = || {
            let mut st = TrainState::new(mini_cfg()).unwrap();
            let mut out = Vec::new();
            for i in 0..10 {
                let (oc, vc) = batches(i as f32);
                out.push(st.train_step(&oc, &vc).unwrap().0);
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_weights_and_adversarial_freeze_parameters() {
        let mut cfg = mini_cfg();
        cfg.weights.lambda_c = 0.0;
        cfg.weights.lambda_sls = 0.0;
        cfg.weights.lambda_iden = 0.0;
        cfg.weights.alpha = 0.0;
        let mut st = TrainState::new(cfg).unwrap();
        st.adversarial_scale = 0.0;
        let snapshot: Vec<f32> = st
            .store
            .iter()
            .flat_map(|(_, p)| p.value.iter().copied().collect::<Vec<_>>())
            .collect();
        let (oc, vc) = batches(1.0);
        st.train_step(&oc, &vc).unwrap();
        let after: Vec<f32> = st
            .store
            .iter()
            .flat_map(|(_, p)| p.value.iter().copied().collect::<Vec<_>>())
            .collect();
        assert_eq!(snapshot, after);
    }

    #[test]
    fn discriminator_phase_is_isolated_from_generators() {
        // With the adversarial game on but every generator-side loss weight
        // zero and noise off, the generator gradient is purely adversarial;
        // conversely the discriminator updates must never touch generator
        // parameters if the adversarial scale is zero on the generator side.
        let mut st = TrainState::new(mini_cfg()).unwrap();
        let g_ids = st.model.ids_g_oc.clone();
        let d_ids = st.model.ids_d_oc.clone();
        let snap = |st: &TrainState, ids: &[crate::nn::ParamId]| -> Vec<f32> {
            ids.iter()
                .flat_map(|id| st.store.get(*id).value.iter().copied().collect::<Vec<_>>())
                .collect()
        };
        let g_before = snap(&st, &g_ids);
        let d_before = snap(&st, &d_ids);
        let (oc, vc) = batches(3.0);
        st.train_step(&oc, &vc).unwrap();
        assert_ne!(g_before, snap(&st, &g_ids));
        assert_ne!(d_before, snap(&st, &d_ids));
    }

    #[test]
    fn audit_confirms_objective_wiring() {
        let mut st = TrainState::new(mini_cfg()).unwrap();
        let (oc, vc) = batches(0.0);
        let (_, audit) = st.train_step(&oc, &vc).unwrap();
        assert_eq!(audit.excyc_source, Some("batch:oc"));
        assert_eq!(audit.cyc_source, Some("batch:vc"));
        assert_eq!(audit.iden_source, Some("batch:vc"));
        assert_eq!(audit.d_oc_fake, Some("pooled-fake:cycle-reconstruction"));
        assert_eq!(
            audit.dir_fake_pair,
            (Some("translated:oc-from-vc"), Some("batch:vc"))
        );
        assert_eq!(
            audit.dir_real_pair,
            (Some("batch:oc"), Some("translated:vc-from-oc"))
        );
        assert!(audit.discriminators_updated_first);
    }

    #[test]
    fn checkpoint_resume_continues_bit_identically() {
        let cfg = mini_cfg();
        let mut a = TrainState::new(cfg.clone()).unwrap();
        let mut reports_a = Vec::new();
        for i in 0..6 {
            let (oc, vc) = batches(i as f32);
            reports_a.push(a.train_step(&oc, &vc).unwrap().0);
        }
        let mut b = TrainState::new(cfg.clone()).unwrap();
        for i in 0..3 {
            let (oc, vc) = batches(i as f32);
            b.train_step(&oc, &vc).unwrap();
        }
        let ckpt = b.checkpoint();
        let mut c = TrainState::resume(cfg, &ckpt).unwrap();
        assert_eq!(c.step, 3);
        for i in 3..6 {
            let (oc, vc) = batches(i as f32);
            let (r, _) = c.train_step(&oc, &vc).unwrap();
            assert_eq!(r, reports_a[i], "step {} diverged after resume", i + 1);
        }
    }

    #[test]
    fn resume_rejects_config_mismatch() {
        let mut st = TrainState::new(mini_cfg()).unwrap();
        let (oc, vc) = batches(0.0);
        st.train_step(&oc, &vc).unwrap();
        let ckpt = st.checkpoint();
        let mut other = mini_cfg();
        other.learning_rate = 1e-3;
        assert!(matches!(
            TrainState::resume(other, &ckpt),
            Err(Error::Checkpoint(_))
        ));
        let mut longer = mini_cfg();
        longer.iterations = 4000;
        assert!(TrainState::resume(longer, &ckpt).is_ok());
    }
}
