//! Plain-text run configuration: `key = value` lines, `#` comments, unknown
//! keys rejected by name. The same `set` path serves both config files and
//! command-line overrides, and the canonical text form feeds the provenance
//! hash recorded in checkpoints and `run.json`.

use crate::error::{config_err, Result};
use crate::losses::LossWeights;
use crate::model::ArchConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Adversarial objective family. The log form is the default; the
/// least-squares form is available for experimentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GanMode {
    Log,
    LeastSquares,
}

impl GanMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(GanMode::Log),
            "least-squares" => Ok(GanMode::LeastSquares),
            other => config_err(format!(
                "invalid gan_mode `{other}` (expected `log` or `least-squares`)"
            )),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            GanMode::Log => "log",
            GanMode::LeastSquares => "least-squares",
        }
    }
}

/// Training-run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub pool_size: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub gan_mode: GanMode,
    pub base_channels: usize,
    pub res_blocks: usize,
    pub noise_dim: usize,
    pub disc_channels: usize,
    pub disc_stages: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 64,
            batch_size: 1,
            iterations: 2000,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            pool_size: 50,
            checkpoint_every: 500,
            seed: 7,
            weights: LossWeights::default(),
            gan_mode: GanMode::Log,
            base_channels: 64,
            res_blocks: 5,
            noise_dim: 8,
            disc_channels: 64,
            disc_stages: 3,
        }
    }
}

impl TrainConfig {
    pub const KEY_HELP: &'static [(&'static str, &'static str)] = &[
        ("image_size", "square frame edge in pixels, multiple of 4 [64]"),
        ("batch_size", "images per domain per step [1]"),
        ("iterations", "optimizer steps [2000]"),
        ("learning_rate", "Adam learning rate [0.0002]"),
        ("adam_beta1", "Adam beta1 [0.5]"),
        ("pool_size", "fake-image history pool capacity, 0 disables [50]"),
        ("checkpoint_every", "steps between checkpoints [500]"),
        ("seed", "master random seed [7]"),
        ("lambda_c", "cycle/extended-cycle weight [10]"),
        ("lambda_sls", "shared-latent weight [1]"),
        ("lambda_iden", "identity weight [1]"),
        ("alpha", "noise-diversity distance floor [0.1]"),
        ("gan_mode", "adversarial form: log | least-squares [log]"),
        ("base_channels", "generator first-stage width [64]"),
        ("res_blocks", "residual blocks per encoder/decoder half [5]"),
        ("noise_dim", "noise vector length for the OC decoder [8]"),
        ("disc_channels", "discriminator first-stage width [64]"),
        ("disc_stages", "stride-2 discriminator stages [3]"),
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, value)?,
            "pool_size" => self.pool_size = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "lambda_c" => self.weights.lambda_c = parse_num(key, value)?,
            "lambda_sls" => self.weights.lambda_sls = parse_num(key, value)?,
            "lambda_iden" => self.weights.lambda_iden = parse_num(key, value)?,
            "alpha" => self.weights.alpha = parse_num(key, value)?,
            "gan_mode" => self.gan_mode = GanMode::parse(value)?,
            "base_channels" => self.base_channels = parse_num(key, value)?,
            "res_blocks" => self.res_blocks = parse_num(key, value)?,
            "noise_dim" => self.noise_dim = parse_num(key, value)?,
            "disc_channels" => self.disc_channels = parse_num(key, value)?,
            "disc_stages" => self.disc_stages = parse_num(key, value)?,
            _ => return config_err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return config_err(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            ));
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if self.iterations == 0 {
            return config_err("iterations must be positive");
        }
        if self.checkpoint_every == 0 {
            return config_err("checkpoint_every must be positive");
        }
        let w = &self.weights;
        if w.lambda_c < 0.0 || w.lambda_sls < 0.0 || w.lambda_iden < 0.0 || w.alpha < 0.0 {
            return config_err("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            base_channels: self.base_channels,
            res_blocks: self.res_blocks,
            noise_dim: self.noise_dim,
            disc_channels: self.disc_channels,
            disc_stride2_stages: self.disc_stages,
        }
    }

    /// Canonical text form: every key on its own line, fixed order.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        format!(
            "adam_beta1 = {}\nalpha = {}\nbase_channels = {}\nbatch_size = {}\n\
             checkpoint_every = {}\ndisc_channels = {}\ndisc_stages = {}\ngan_mode = {}\nimage_size = {}\n\
             iterations = {}\nlambda_c = {}\nlambda_iden = {}\nlambda_sls = {}\n\
             learning_rate = {}\nnoise_dim = {}\npool_size = {}\nres_blocks = {}\nseed = {}\n",
            self.adam_beta1,
            w.alpha,
            self.base_channels,
            self.batch_size,
            self.checkpoint_every,
            self.disc_channels,
            self.disc_stages,
            self.gan_mode.as_str(),
            self.image_size,
            self.iterations,
            w.lambda_c,
            w.lambda_iden,
            w.lambda_sls,
            self.learning_rate,
            self.noise_dim,
            self.pool_size,
            self.res_blocks,
            self.seed,
        )
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

/// Synthetic dataset generation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Scenes generated per domain; split into train/val/test by fraction.
    pub scenes: usize,
    /// Camera poses (frames) rendered per scene.
    pub poses: usize,
    pub image_size: usize,
    pub seed: u64,
    pub fov_deg: f64,
    pub axial_steps: usize,
    pub radial_steps: usize,
    pub tube_length: f64,
    pub base_radius: f64,
    pub fold_amplitude: f64,
    pub fold_period: f64,
    pub fold_phase_jitter: f64,
    /// Centerline distance between consecutive camera poses.
    pub pose_step: f64,
    pub overlay_opacity: f64,
    pub specular_strength: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 4,
            poses: 50,
            image_size: 64,
            seed: 7,
            fov_deg: 90.0,
            axial_steps: 0, // 0 = derived: 10 subdivisions per fold period
            radial_steps: 16,
            tube_length: 0.0, // 0 = derived from poses and pose_step
            base_radius: 0.5,
            fold_amplitude: 0.5,
            fold_period: 1.0,
            fold_phase_jitter: 0.15,
            pose_step: 1.0,
            overlay_opacity: 0.6,
            specular_strength: 0.4,
            train_frac: 0.5,
            val_frac: 0.25,
        }
    }
}

impl DataConfig {
    pub const KEY_HELP: &'static [(&'static str, &'static str)] = &[
        ("scenes", "scenes per domain [4]"),
        ("poses", "frames per scene [50]"),
        ("image_size", "square frame edge in pixels [64]"),
        ("seed", "master random seed [7]"),
        ("fov_deg", "pinhole field of view in degrees [90]"),
        ("axial_steps", "mesh subdivisions along the tube, 0 derives from length [0]"),
        ("radial_steps", "mesh subdivisions around the tube [16]"),
        ("tube_length", "tube length in world units, 0 derives it from poses [0]"),
        ("base_radius", "unfolded tube radius [0.5]"),
        ("fold_amplitude", "fold depth as a fraction of radius, in [0, 0.8] [0.5]"),
        ("fold_period", "axial distance between folds [1]"),
        ("fold_phase_jitter", "per-angle fold phase wobble in radians [0.15]"),
        ("pose_step", "centerline distance between camera poses [1]"),
        ("overlay_opacity", "green compositing opacity for missed surfaces [0.6]"),
        ("specular_strength", "specular highlight weight in OC renders [0.4]"),
        ("train_frac", "fraction of scenes in the training split [0.5]"),
        ("val_frac", "fraction of scenes in the validation split [0.25]"),
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scenes" => self.scenes = parse_num(key, value)?,
            "poses" => self.poses = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "fov_deg" => self.fov_deg = parse_num(key, value)?,
            "axial_steps" => self.axial_steps = parse_num(key, value)?,
            "radial_steps" => self.radial_steps = parse_num(key, value)?,
            "tube_length" => self.tube_length = parse_num(key, value)?,
            "base_radius" => self.base_radius = parse_num(key, value)?,
            "fold_amplitude" => self.fold_amplitude = parse_num(key, value)?,
            "fold_period" => self.fold_period = parse_num(key, value)?,
            "fold_phase_jitter" => self.fold_phase_jitter = parse_num(key, value)?,
            "pose_step" => self.pose_step = parse_num(key, value)?,
            "overlay_opacity" => self.overlay_opacity = parse_num(key, value)?,
            "specular_strength" => self.specular_strength = parse_num(key, value)?,
            "train_frac" => self.train_frac = parse_num(key, value)?,
            "val_frac" => self.val_frac = parse_num(key, value)?,
            _ => return config_err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.poses == 0 {
            return config_err("scenes and poses must be positive");
        }
        if self.image_size == 0 {
            return config_err("image_size must be positive");
        }
        if (self.axial_steps != 0 && self.axial_steps < 8) || self.radial_steps < 8 {
            return config_err("axial_steps (when explicit) and radial_steps must be at least 8");
        }
        if !(0.0..=0.8).contains(&self.fold_amplitude) {
            return config_err(format!(
                "fold_amplitude must lie in [0, 0.8], got {}",
                self.fold_amplitude
            ));
        }
        if self.base_radius <= 0.0 || self.fold_period <= 0.0 || self.pose_step <= 0.0 {
            return config_err("base_radius, fold_period, pose_step must be positive");
        }
        if !(0.0..180.0).contains(&self.fov_deg) || self.fov_deg <= 0.0 {
            return config_err("fov_deg must lie in (0, 180)");
        }
        if !(0.0..=1.0).contains(&self.overlay_opacity) {
            return config_err("overlay_opacity must lie in [0, 1]");
        }
        if self.train_frac < 0.0
            || self.val_frac < 0.0
            || self.train_frac + self.val_frac > 1.0
        {
            return config_err("train_frac and val_frac must be non-negative with sum <= 1");
        }
        Ok(())
    }

    /// Tube length: explicit, or long enough for the pose march plus margins.
    pub fn effective_length(&self) -> f64 {
        if self.tube_length > 0.0 {
            self.tube_length
        } else {
            self.pose_step * self.poses as f64 + 4.0 * self.fold_period
        }
    }

    /// Axial mesh steps: explicit, or enough to sample every fold.
    pub fn effective_axial_steps(&self) -> usize {
        if self.axial_steps != 0 {
            self.axial_steps
        } else {
            ((self.effective_length() / self.fold_period) * 10.0).ceil() as usize
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "axial_steps = {}\nbase_radius = {}\nfold_amplitude = {}\nfold_period = {}\n\
             fold_phase_jitter = {}\nfov_deg = {}\nimage_size = {}\noverlay_opacity = {}\n\
             pose_step = {}\nposes = {}\nradial_steps = {}\nscenes = {}\nseed = {}\n\
             specular_strength = {}\ntrain_frac = {}\ntube_length = {}\nval_frac = {}\n",
            self.axial_steps,
            self.base_radius,
            self.fold_amplitude,
            self.fold_period,
            self.fold_phase_jitter,
            self.fov_deg,
            self.image_size,
            self.overlay_opacity,
            self.pose_step,
            self.poses,
            self.radial_steps,
            self.scenes,
            self.seed,
            self.specular_strength,
            self.train_frac,
            self.tube_length,
            self.val_frac,
        )
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| crate::Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return config_err(format!(
                "line {}: expected `key = value`, got `{}`",
                lineno + 1,
                line
            ));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Apply a config file (optional) and then override pairs to a config value.
pub fn load_config<C>(
    mut cfg: C,
    file_text: Option<&str>,
    overrides: &[String],
    set: impl Fn(&mut C, &str, &str) -> Result<()>,
) -> Result<C> {
    if let Some(text) = file_text {
        for (k, v) in parse_kv(text)? {
            set(&mut cfg, &k, &v)?;
        }
    }
    for ov in overrides {
        let Some((k, v)) = ov.split_once('=') else {
            return config_err(format!("override `{ov}` is not of the form key=value"));
        };
        set(&mut cfg, k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
