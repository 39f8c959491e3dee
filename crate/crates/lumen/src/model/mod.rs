//! The two generators (encoder + decoder each), the domain and directional
//! discriminators, and their forward passes.
//!
//! Naming follows the translation direction of the *parent generator*, not
//! the input domain: `g_oc` consumes VC-domain images and emits OC-domain
//! images, so `En_oc` is the encoder that VC images enter through.

use crate::error::{config_err, Result};
use crate::nn::{Graph, NodeId, ParamId, ParamStore, Scalar};
use crate::rng::SeededStream;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Network shape knobs. `default()` is the full-size backbone; `mini()` is
/// the small variant the gradient-check suite runs on 8x8 images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// channel width after the 7x7 head; doubles at each downsampling
    pub base_channels: usize,
    /// residual blocks per half (encoder and decoder each get this many)
    pub res_blocks: usize,
    /// noise vector length fed to the OC decoder
    pub noise_dim: usize,
    /// first-stage width of both discriminators
    pub disc_channels: usize,
    /// stride-2 downsampling stages in each discriminator
    pub disc_stride2_stages: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: 64,
            res_blocks: 5,
            noise_dim: 8,
            disc_channels: 64,
            disc_stride2_stages: 3,
        }
    }
}

impl ArchConfig {
    pub fn mini() -> Self {
        ArchConfig {
            base_channels: 8,
            res_blocks: 1,
            noise_dim: 8,
            disc_channels: 8,
            disc_stride2_stages: 1,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.base_channels * 4
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
}

fn add_conv<E: Scalar>(
    store: &mut ParamStore<E>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Conv {
    let w = store.add_normal(format!("{name}.w"), &[cout, cin, k, k], 0.02, rng);
    let b = store.add_zeros(format!("{name}.b"), &[cout]);
    Conv { w, b }
}

fn add_norm<E: Scalar>(store: &mut ParamStore<E>, name: &str, c: usize) -> Norm {
    let gamma = store.add_ones(format!("{name}.gamma"), &[c]);
    let beta = store.add_zeros(format!("{name}.beta"), &[c]);
    Norm { gamma, beta }
}

fn add_res_block<E: Scalar>(
    store: &mut ParamStore<E>,
    name: &str,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> ResBlock {
    ResBlock {
        c1: add_conv(store, &format!("{name}.conv1"), c, c, 3, rng),
        n1: add_norm(store, &format!("{name}.norm1"), c),
        c2: add_conv(store, &format!("{name}.conv2"), c, c, 3, rng),
        n2: add_norm(store, &format!("{name}.norm2"), c),
    }
}

/// Encoder + decoder pair. The OC-side generator carries a noise projection;
/// the VC-side generator's decoder is noise-free and fully deterministic.
#[derive(Clone, Debug)]
pub struct Generator {
    arch: ArchConfig,
    takes_noise: bool,
    head: Conv,
    head_n: Norm,
    down1: Conv,
    down1_n: Norm,
    down2: Conv,
    down2_n: Norm,
    enc_blocks: Vec<ResBlock>,
    noise_proj: Option<Conv>,
    dec_blocks: Vec<ResBlock>,
    up1: Conv,
    up1_n: Norm,
    up2: Conv,
    up2_n: Norm,
    tail: Conv,
}

impl Generator {
    fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        name: &str,
        arch: ArchConfig,
        takes_noise: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = arch.base_channels;
        let lc = arch.latent_channels();
        let head = add_conv(store, &format!("{name}.enc.head"), c, 3, 7, rng);
        let head_n = add_norm(store, &format!("{name}.enc.head_norm"), c);
        let down1 = add_conv(store, &format!("{name}.enc.down1"), 2 * c, c, 3, rng);
        let down1_n = add_norm(store, &format!("{name}.enc.down1_norm"), 2 * c);
        let down2 = add_conv(store, &format!("{name}.enc.down2"), lc, 2 * c, 3, rng);
        let down2_n = add_norm(store, &format!("{name}.enc.down2_norm"), lc);
        let enc_blocks = (0..arch.res_blocks)
            .map(|i| add_res_block(store, &format!("{name}.enc.res{i}"), lc, rng))
            .collect();
        let noise_proj = takes_noise.then(|| {
            add_conv(
                store,
                &format!("{name}.dec.noise_proj"),
                lc,
                lc + arch.noise_dim,
                1,
                rng,
            )
        });
        let dec_blocks = (0..arch.res_blocks)
            .map(|i| add_res_block(store, &format!("{name}.dec.res{i}"), lc, rng))
            .collect();
        let up1 = add_conv(store, &format!("{name}.dec.up1"), 2 * c, lc, 3, rng);
        let up1_n = add_norm(store, &format!("{name}.dec.up1_norm"), 2 * c);
        let up2 = add_conv(store, &format!("{name}.dec.up2"), c, 2 * c, 3, rng);
        let up2_n = add_norm(store, &format!("{name}.dec.up2_norm"), c);
        // The noise-taking decoder re-injects the noise right before the tail
        // convolution: every earlier stage is followed by an instance norm,
        // which strips the spatially uniform appearance shifts (lighting,
        // color) that the noise is meant to drive, so the tail is the only
        // stage where such shifts can survive to the output.
        let tail_in = if takes_noise { c + arch.noise_dim } else { c };
        let tail = add_conv(store, &format!("{name}.dec.tail"), 3, tail_in, 7, rng);
        Generator {
            arch,
            takes_noise,
            head,
            head_n,
            down1,
            down1_n,
            down2,
            down2_n,
            enc_blocks,
            noise_proj,
            dec_blocks,
            up1,
            up1_n,
            up2,
            up2_n,
            tail,
        }
    }

    fn res_block<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        x: NodeId,
        blk: &ResBlock,
    ) -> Result<NodeId> {
        let p = g.reflect_pad(x, 1)?;
        let wb = g.param(blk.c1.w);
        let bb = g.param(blk.c1.b);
        let c1 = g.conv2d(p, wb, bb, 1)?;
        let ga = g.param(blk.n1.gamma);
        let be = g.param(blk.n1.beta);
        let n1 = g.instance_norm(c1, ga, be)?;
        let a = g.relu(n1);
        let p2 = g.reflect_pad(a, 1)?;
        let wb2 = g.param(blk.c2.w);
        let bb2 = g.param(blk.c2.b);
        let c2 = g.conv2d(p2, wb2, bb2, 1)?;
        let ga2 = g.param(blk.n2.gamma);
        let be2 = g.param(blk.n2.beta);
        let n2 = g.instance_norm(c2, ga2, be2)?;
        g.add(x, n2)
    }

    /// Image -> LatentCode at (H/4, W/4, 4*base channels).
    pub fn encode<E: Scalar>(&self, g: &mut Graph<'_, E>, image: NodeId) -> Result<NodeId> {
        let s = g.value(image).shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return config_err(format!("encode expects (N, 3, H, W) image, got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return config_err(format!(
                "image dimensions must be positive multiples of 4, got {h}x{w}"
            ));
        }
        let p = g.reflect_pad(image, 3)?;
        let wq = g.param(self.head.w);
        let bq = g.param(self.head.b);
        let c = g.conv2d(p, wq, bq, 1)?;
        let ga = g.param(self.head_n.gamma);
        let be = g.param(self.head_n.beta);
        let n = g.instance_norm(c, ga, be)?;
        let mut x = g.relu(n);
        for (conv, norm) in [(self.down1, self.down1_n), (self.down2, self.down2_n)] {
            let p = g.zero_pad(x, 1)?;
            let wq = g.param(conv.w);
            let bq = g.param(conv.b);
            let c = g.conv2d(p, wq, bq, 2)?;
            let ga = g.param(norm.gamma);
            let be = g.param(norm.beta);
            let n = g.instance_norm(c, ga, be)?;
            x = g.relu(n);
        }
        for blk in &self.enc_blocks {
            let b = *blk;
            x = self.res_block(g, x, &b)?;
        }
        Ok(x)
    }

    /// LatentCode (+ noise for the OC decoder) -> Image in [-1, 1].
    pub fn decode<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        latent: NodeId,
        noise: Option<NodeId>,
    ) -> Result<NodeId> {
        let s = g.value(latent).shape().to_vec();
        let lc = self.arch.latent_channels();
        if s.len() != 4 || s[1] != lc {
            return config_err(format!(
                "decode expects (N, {lc}, h, w) latent, got {s:?}"
            ));
        }
        let mut x = latent;
        let mut tail_noise = None;
        match (self.takes_noise, noise) {
            (true, Some(z)) => {
                tail_noise = Some(z);
                let zs = g.value(z).shape().to_vec();
                if zs.len() != 2 || zs[1] != self.arch.noise_dim || zs[0] != s[0] {
                    return config_err(format!(
                        "noise must be (N, {}), got {zs:?}",
                        self.arch.noise_dim
                    ));
                }
                let zb = g.broadcast_vec(z, s[2], s[3])?;
                let cat = g.concat_c(latent, zb)?;
                let proj = self.noise_proj.expect("noise generator has projection");
                let wq = g.param(proj.w);
                let bq = g.param(proj.b);
                let c = g.conv2d(cat, wq, bq, 1)?;
                // The projection must be followed by a nonlinearity: a purely
                // linear injection adds a spatially constant per-channel
                // shift, which the downstream instance norms would subtract
                // away exactly, silencing the noise input altogether.
                x = g.relu(c);
            }
            (true, None) => {
                return config_err("this decoder requires a noise vector");
            }
            (false, Some(_)) => {
                return config_err("this decoder takes no noise input");
            }
            (false, None) => {}
        }
        for blk in &self.dec_blocks {
            let b = *blk;
            x = self.res_block(g, x, &b)?;
        }
        for (conv, norm) in [(self.up1, self.up1_n), (self.up2, self.up2_n)] {
            let u = g.upsample2x(x)?;
            let p = g.reflect_pad(u, 1)?;
            let wq = g.param(conv.w);
            let bq = g.param(conv.b);
            let c = g.conv2d(p, wq, bq, 1)?;
            let ga = g.param(norm.gamma);
            let be = g.param(norm.beta);
            let n = g.instance_norm(c, ga, be)?;
            x = g.relu(n);
        }
        if let Some(z) = tail_noise {
            let xs = g.value(x).shape().to_vec();
            let zb = g.broadcast_vec(z, xs[2], xs[3])?;
            x = g.concat_c(x, zb)?;
        }
        let p = g.reflect_pad(x, 3)?;
        let wq = g.param(self.tail.w);
        let bq = g.param(self.tail.b);
        let c = g.conv2d(p, wq, bq, 1)?;
        Ok(g.tanh(c))
    }

    pub fn takes_noise(&self) -> bool {
        self.takes_noise
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }
}

/// 70x70-receptive-field patch discriminator with a sigmoid head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    in_channels: usize,
    stages: Vec<(Conv, Option<Norm>, usize)>, // (conv, norm, stride)
    head: Conv,
}

impl Discriminator {
    fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        name: &str,
        in_channels: usize,
        arch: ArchConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = arch.disc_channels;
        let cap = 8 * c;
        let mut stages = Vec::new();
        let s0 = add_conv(store, &format!("{name}.c0"), c, in_channels, 4, rng);
        stages.push((s0, None, 2));
        let mut cin = c;
        for i in 1..arch.disc_stride2_stages {
            let cout = (c << i).min(cap);
            let conv = add_conv(store, &format!("{name}.c{i}"), cout, cin, 4, rng);
            let norm = add_norm(store, &format!("{name}.n{i}"), cout);
            stages.push((conv, Some(norm), 2));
            cin = cout;
        }
        let i = arch.disc_stride2_stages;
        let cout = (c << i).min(cap);
        let conv = add_conv(store, &format!("{name}.c{i}"), cout, cin, 4, rng);
        let norm = add_norm(store, &format!("{name}.n{i}"), cout);
        stages.push((conv, Some(norm), 1));
        let head = add_conv(store, &format!("{name}.head"), 1, cout, 4, rng);
        Discriminator {
            in_channels,
            stages,
            head,
        }
    }

    /// Image (or channel-concatenated pair) -> patch score map in (0, 1).
    pub fn forward<E: Scalar>(&self, g: &mut Graph<'_, E>, x: NodeId) -> Result<NodeId> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return config_err(format!(
                "discriminator expects {} input channels, got {s:?}",
                self.in_channels
            ));
        }
        let mut x = x;
        for (conv, norm, stride) in &self.stages {
            let p = g.zero_pad(x, 1)?;
            let wq = g.param(conv.w);
            let bq = g.param(conv.b);
            let c = g.conv2d(p, wq, bq, *stride)?;
            let n = match norm {
                Some(nm) => {
                    let ga = g.param(nm.gamma);
                    let be = g.param(nm.beta);
                    g.instance_norm(c, ga, be)?
                }
                None => c,
            };
            x = g.leaky_relu(n, 0.2);
        }
        let p = g.zero_pad(x, 1)?;
        let wq = g.param(self.head.w);
        let bq = g.param(self.head.b);
        let c = g.conv2d(p, wq, bq, 1)?;
        Ok(g.sigmoid(c))
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
}

/// The four networks plus per-network parameter id ranges (used to give each
/// network its own optimizer and to freeze parameter counts).
#[derive(Clone, Debug)]
pub struct SharedLatentModel {
    pub arch: ArchConfig,
    pub g_oc: Generator,
    pub g_vc: Generator,
    pub d_oc: Discriminator,
    pub d_dir: Discriminator,
    pub ids_g_oc: Vec<ParamId>,
    pub ids_g_vc: Vec<ParamId>,
    pub ids_d_oc: Vec<ParamId>,
    pub ids_d_dir: Vec<ParamId>,
}

impl SharedLatentModel {
    pub fn new<E: Scalar>(
        arch: ArchConfig,
        store: &mut ParamStore<E>,
        init: &mut SeededStream,
    ) -> Self {
        let rng = &mut init.rng;
        let mark = store.len();
        let g_oc = Generator::new(store, "g_oc", arch, true, rng);
        let ids_g_oc: Vec<ParamId> = (mark..store.len()).map(ParamId).collect();
        let mark = store.len();
        let g_vc = Generator::new(store, "g_vc", arch, false, rng);
        let ids_g_vc: Vec<ParamId> = (mark..store.len()).map(ParamId).collect();
        let mark = store.len();
        let d_oc = Discriminator::new(store, "d_oc", 3, arch, rng);
        let ids_d_oc: Vec<ParamId> = (mark..store.len()).map(ParamId).collect();
        let mark = store.len();
        let d_dir = Discriminator::new(store, "d_dir", 6, arch, rng);
        let ids_d_dir: Vec<ParamId> = (mark..store.len()).map(ParamId).collect();
        SharedLatentModel {
            arch,
            g_oc,
            g_vc,
            d_oc,
            d_dir,
            ids_g_oc,
            ids_g_vc,
            ids_d_oc,
            ids_d_dir,
        }
    }

    /// VC image + noise -> OC image (G_oc = De_oc . En_oc).
    pub fn translate_to_oc<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        image_vc: NodeId,
        z: NodeId,
    ) -> Result<NodeId> {
        let l = self.g_oc.encode(g, image_vc)?;
        self.g_oc.decode(g, l, Some(z))
    }

    /// OC image -> VC image (G_vc = De_vc . En_vc); deterministic.
    pub fn translate_to_vc<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        image_oc: NodeId,
    ) -> Result<NodeId> {
        let l = self.g_vc.encode(g, image_oc)?;
        self.g_vc.decode(g, l, None)
    }

    /// Directional pair is always ordered (OC, VC).
    pub fn discriminate_dir<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        image_oc: NodeId,
        image_vc: NodeId,
    ) -> Result<NodeId> {
        let so = g.value(image_oc).shape().to_vec();
        let sv = g.value(image_vc).shape().to_vec();
        if so != sv {
            return config_err(format!(
                "directional pair spatial mismatch: {so:?} vs {sv:?}"
            ));
        }
        let pair = g.concat_c(image_oc, image_vc)?;
        self.d_dir.forward(g, pair)
    }
}

/// Draw an (N, dim) noise matrix from the run's seeded normal stream.
pub fn sample_noise<E: Scalar>(stream: &mut SeededStream, n: usize, dim: usize) -> ArrayD<E> {
    let data: Vec<E> = (0..n * dim)
        .map(|_| E::sample_normal(&mut stream.rng))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[n, dim]), data).unwrap()
}
