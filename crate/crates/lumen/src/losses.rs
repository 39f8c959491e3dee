//! Every training loss term as a differentiable scalar node.
//!
//! All L1 norms are means over elements, so the loss weights stay meaningful
//! across resolutions. Adversarial terms use the non-saturating log form with
//! scores stabilized by `LOG_EPS`.
//!
//! The noise-diversity hinge is `max(0, alpha - d)` — the penalty is active
//! when two noise draws produce images *closer* than `alpha`, which is what
//! forces the decoder to actually use its noise input.

use crate::error::Result;
use crate::model::Discriminator;
use crate::nn::{Graph, NodeId, Scalar};
use serde::{Deserialize, Serialize};

/// Loss weights with the standard defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_sls: f64,
    pub lambda_iden: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 10.0,
            lambda_sls: 1.0,
            lambda_iden: 1.0,
            alpha: 0.1,
        }
    }
}

/// Per-step scalar values of every term plus the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cyc: f64,
    pub excyc: f64,
    pub sls_vc: f64,
    pub sls_oc: f64,
    pub iden: f64,
    pub dir: f64,
    pub gan_oc: f64,
    pub noise: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,cyc,excyc,sls_vc,sls_oc,iden,dir,gan_oc,noise,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            step,
            self.cyc,
            self.excyc,
            self.sls_vc,
            self.sls_oc,
            self.iden,
            self.dir,
            self.gan_oc,
            self.noise,
            self.total
        )
    }

    /// Recompute the weighted combination from the stored terms.
    pub fn recombined_total(&self, w: &LossWeights) -> f64 {
        w.lambda_c * (self.excyc + self.cyc)
            + w.lambda_sls * (self.sls_vc + self.sls_oc)
            + w.lambda_iden * self.iden
            + self.dir
            + self.gan_oc
            + self.noise
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cyc, self.excyc, self.sls_vc, self.sls_oc, self.iden, self.dir,
            self.gan_oc, self.noise, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A generator pass as seen by the composite losses. Implemented by real
/// model closures in training and by constant stubs in tests.
pub type MapFn<'a, E> = dyn FnMut(&mut Graph<'_, E>, NodeId) -> Result<NodeId> + 'a;

/// mean |y - y_rec|
pub fn cycle_loss<E: Scalar>(g: &mut Graph<'_, E>, y: NodeId, y_rec: NodeId) -> Result<NodeId> {
    g.l1_mean(y, y_rec)
}

/// mean |G_b(y) - G_b(G_a(G_b(y)))|, compared in G_b's output (common) domain.
pub fn extended_cycle_loss<E: Scalar>(
    g: &mut Graph<'_, E>,
    g_a: &mut MapFn<'_, E>,
    g_b: &mut MapFn<'_, E>,
    y: NodeId,
) -> Result<NodeId> {
    let v = g_b(g, y)?;
    let a = g_a(g, v)?;
    let w = g_b(g, a)?;
    g.l1_mean(v, w)
}

/// mean |En_b(y) - En_a(G_b(y))|
pub fn shared_latent_loss<E: Scalar>(
    g: &mut Graph<'_, E>,
    en_b: &mut MapFn<'_, E>,
    g_b: &mut MapFn<'_, E>,
    en_a: &mut MapFn<'_, E>,
    y: NodeId,
) -> Result<NodeId> {
    let lb = en_b(g, y)?;
    let t = g_b(g, y)?;
    let la = en_a(g, t)?;
    g.l1_mean(lb, la)
}

/// mean |G_vc(y_vc) - y_vc|; VC domain only.
pub fn identity_loss<E: Scalar>(
    g: &mut Graph<'_, E>,
    g_vc: &mut MapFn<'_, E>,
    y_vc: NodeId,
) -> Result<NodeId> {
    let t = g_vc(g, y_vc)?;
    g.l1_mean(t, y_vc)
}

/// lambda_c (excyc + cyc) + lambda_sls (sls_vc + sls_oc) + lambda_iden iden
pub fn translation_loss<E: Scalar>(
    g: &mut Graph<'_, E>,
    w: &LossWeights,
    excyc: NodeId,
    cyc: NodeId,
    sls_vc: NodeId,
    sls_oc: NodeId,
    iden: NodeId,
) -> NodeId {
    g.weighted_sum(&[
        (excyc, w.lambda_c),
        (cyc, w.lambda_c),
        (sls_vc, w.lambda_sls),
        (sls_oc, w.lambda_sls),
        (iden, w.lambda_iden),
    ])
}

/// -mean log D(real) - mean log(1 - D(fake)); the discriminator's objective.
pub fn gan_loss_discriminator_scores<E: Scalar>(
    g: &mut Graph<'_, E>,
    scores_real: NodeId,
    scores_fake: NodeId,
) -> NodeId {
    let lr = g.mean_log_eps(scores_real);
    let lf = g.mean_log1m_eps(scores_fake);
    g.weighted_sum(&[(lr, -1.0), (lf, -1.0)])
}

/// -mean log D(fake); the generator's non-saturating objective.
pub fn gan_loss_generator_scores<E: Scalar>(g: &mut Graph<'_, E>, scores_fake: NodeId) -> NodeId {
    let lf = g.mean_log_eps(scores_fake);
    g.weighted_sum(&[(lf, -1.0)])
}

/// Discriminator side over real/fake images through a concrete network.
pub fn gan_loss_discriminator<E: Scalar>(
    g: &mut Graph<'_, E>,
    d: &Discriminator,
    real: NodeId,
    fake: NodeId,
) -> Result<NodeId> {
    let sr = d.forward(g, real)?;
    let sf = d.forward(g, fake)?;
    Ok(gan_loss_discriminator_scores(g, sr, sf))
}

/// Generator side over a fake image through a concrete network.
pub fn gan_loss_generator<E: Scalar>(
    g: &mut Graph<'_, E>,
    d: &Discriminator,
    fake: NodeId,
) -> Result<NodeId> {
    let sf = d.forward(g, fake)?;
    Ok(gan_loss_generator_scores(g, sf))
}

/// Directional discriminator objective over ordered (OC, VC) pairs:
/// real-direction pairs are (y, G_vc(y)), fake-direction pairs are
/// (G_oc(x, z), x). Same log structure as `gan_loss_discriminator`.
pub fn dir_loss_discriminator<E: Scalar>(
    g: &mut Graph<'_, E>,
    d_dir: &Discriminator,
    real_pair: (NodeId, NodeId),
    fake_pair: (NodeId, NodeId),
) -> Result<NodeId> {
    let rp = g.concat_c(real_pair.0, real_pair.1)?;
    let fp = g.concat_c(fake_pair.0, fake_pair.1)?;
    let sr = d_dir.forward(g, rp)?;
    let sf = d_dir.forward(g, fp)?;
    Ok(gan_loss_discriminator_scores(g, sr, sf))
}

/// Generator side of the directional loss: fool the discriminator on the
/// fake-direction pair (G_oc(x, z), x).
pub fn dir_loss_generator<E: Scalar>(
    g: &mut Graph<'_, E>,
    d_dir: &Discriminator,
    fake_pair: (NodeId, NodeId),
) -> Result<NodeId> {
    let fp = g.concat_c(fake_pair.0, fake_pair.1)?;
    let sf = d_dir.forward(g, fp)?;
    Ok(gan_loss_generator_scores(g, sf))
}

/// Least-squares alternative: mean (D(real) - 1)^2 + mean D(fake)^2.
pub fn ls_loss_discriminator_scores<E: Scalar>(
    g: &mut Graph<'_, E>,
    scores_real: NodeId,
    scores_fake: NodeId,
) -> NodeId {
    let rm1 = g.affine(scores_real, 1.0, -1.0);
    let lr = g.mean_square(rm1);
    let lf = g.mean_square(scores_fake);
    g.weighted_sum(&[(lr, 1.0), (lf, 1.0)])
}

/// Least-squares generator side: mean (D(fake) - 1)^2.
pub fn ls_loss_generator_scores<E: Scalar>(g: &mut Graph<'_, E>, scores_fake: NodeId) -> NodeId {
    let fm1 = g.affine(scores_fake, 1.0, -1.0);
    let lf = g.mean_square(fm1);
    g.weighted_sum(&[(lf, 1.0)])
}

/// dir + gan composition; both components enter with unit weight.
pub fn adversarial_loss<E: Scalar>(
    g: &mut Graph<'_, E>,
    dir_term: NodeId,
    gan_term: NodeId,
) -> NodeId {
    g.weighted_sum(&[(dir_term, 1.0), (gan_term, 1.0)])
}

/// max(0, alpha - mean|img1 - img2|): pushes the distance between two
/// noise-conditioned decodings of one latent above alpha.
pub fn noise_loss<E: Scalar>(
    g: &mut Graph<'_, E>,
    alpha: f64,
    img1: NodeId,
    img2: NodeId,
) -> Result<NodeId> {
    let d = g.l1_mean(img1, img2)?;
    let neg = g.affine(d, -1.0, alpha);
    Ok(g.relu(neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use ndarray::{ArrayD, IxDyn};

    fn img(shape: &[usize], fill: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), fill)
    }

    #[test]
    fn cycle_loss_hand_values() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(img(&[1, 3, 2, 2], 0.5));
        let b = g.constant(img(&[1, 3, 2, 2], 0.3));
        let l = cycle_loss(&mut g, a, b).unwrap();
        assert!((g.scalar(l) - 0.2).abs() < 1e-12);

        let l0 = cycle_loss(&mut g, a, a).unwrap();
        assert_eq!(g.scalar(l0), 0.0);

        // 2x2x3 equal except one element off by 1.2 -> 1.2/12 = 0.1
        let mut v = img(&[1, 3, 2, 2], 0.0);
        v.as_slice_mut().unwrap()[7] = 1.2;
        let c = g.constant(v);
        let z = g.constant(img(&[1, 3, 2, 2], 0.0));
        let l2 = cycle_loss(&mut g, c, z).unwrap();
        assert!((g.scalar(l2) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn extended_cycle_with_constant_stubs() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let y = g.constant(img(&[1, 3, 2, 2], 0.9));
        // G_b emits 0.2; G_b(G_a(G_b(y))) emits 0.5 via G_a marking its input
        let mut calls = 0usize;
        let mut g_b = |gr: &mut Graph<'_, f64>, _x: NodeId| -> Result<NodeId> {
            calls += 1;
            Ok(gr.constant(img(&[1, 3, 2, 2], if calls == 1 { 0.2 } else { 0.5 })))
        };
        let mut g_a =
            |gr: &mut Graph<'_, f64>, x: NodeId| -> Result<NodeId> { Ok(gr.affine(x, 1.0, 0.0)) };
        let l = extended_cycle_loss(&mut g, &mut g_a, &mut g_b, y).unwrap();
        assert!((g.scalar(l) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn extended_cycle_fixed_point_is_zero() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let y = g.constant(img(&[1, 3, 2, 2], 0.7));
        let mut ident =
            |gr: &mut Graph<'_, f64>, x: NodeId| -> Result<NodeId> { Ok(gr.affine(x, 1.0, 0.0)) };
        let mut ident2 =
            |gr: &mut Graph<'_, f64>, x: NodeId| -> Result<NodeId> { Ok(gr.affine(x, 1.0, 0.0)) };
        let l = extended_cycle_loss(&mut g, &mut ident, &mut ident2, y).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn extended_cycle_constant_gb_ignores_y() {
        let store: ParamStore<f64> = ParamStore::new();
        for fill in [0.1, -0.8] {
            let mut g = Graph::new(&store);
            let y = g.constant(img(&[1, 3, 2, 2], fill));
            let mut g_b = |gr: &mut Graph<'_, f64>, _x: NodeId| -> Result<NodeId> {
                Ok(gr.constant(img(&[1, 3, 2, 2], 0.25)))
            };
            let mut g_a = |gr: &mut Graph<'_, f64>, x: NodeId| -> Result<NodeId> {
                Ok(gr.affine(x, 2.0, 0.1))
            };
            let l = extended_cycle_loss(&mut g, &mut g_a, &mut g_b, y).unwrap();
            assert_eq!(g.scalar(l), 0.0); // constant G_b: both sides equal
        }
    }

    #[test]
    fn shared_latent_loss_stub_values() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let y = g.constant(img(&[1, 3, 4, 4], 0.0));
        let mut en_b = |gr: &mut Graph<'_, f64>, _x: NodeId| -> Result<NodeId> {
            Ok(gr.constant(img(&[1, 8, 1, 1], 1.0)))
        };
        let mut en_a = |gr: &mut Graph<'_, f64>, _x: NodeId| -> Result<NodeId> {
            Ok(gr.constant(img(&[1, 8, 1, 1], 0.25)))
        };
        let mut g_b =
            |gr: &mut Graph<'_, f64>, x: NodeId| -> Result<NodeId> { Ok(gr.affine(x, 1.0, 0.0)) };
        let l = shared_latent_loss(&mut g, &mut en_b, &mut g_b, &mut en_a, y).unwrap();
        assert!((g.scalar(l) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn identity_loss_values() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let y = g.constant(img(&[1, 3, 2, 2], 0.4));
        let mut ident =
            |gr: &mut Graph<'_, f64>, x: NodeId| -> Result<NodeId> { Ok(gr.affine(x, 1.0, 0.0)) };
        let l = identity_loss(&mut g, &mut ident, y).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        let mut zero = |gr: &mut Graph<'_, f64>, _x: NodeId| -> Result<NodeId> {
            Ok(gr.constant(img(&[1, 3, 2, 2], 0.0)))
        };
        let l2 = identity_loss(&mut g, &mut zero, y).unwrap();
        assert!((g.scalar(l2) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn translation_loss_weighted_sum() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let terms: Vec<NodeId> = [0.1, 0.2, 0.3, 0.4, 0.5]
            .iter()
            .map(|&v| g.constant(ArrayD::from_elem(IxDyn(&[]), v)))
            .collect();
        let w = LossWeights::default();
        // (excyc, cyc, sls_vc, sls_oc, iden) = (0.1, 0.2, 0.3, 0.4, 0.5)
        let t = translation_loss(&mut g, &w, terms[0], terms[1], terms[2], terms[3], terms[4]);
        assert!((g.scalar(t) - 4.2).abs() < 1e-12);

        // halving lambda_c halves only the first bracket
        let w2 = LossWeights {
            lambda_c: 5.0,
            ..w
        };
        let t2 = translation_loss(&mut g, &w2, terms[0], terms[1], terms[2], terms[3], terms[4]);
        assert!((g.scalar(t2) - (4.2 - 1.5)).abs() < 1e-12);
    }

    #[test]
    fn gan_losses_hand_values() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let half = g.constant(img(&[1, 1, 6, 6], 0.5));
        let d = gan_loss_discriminator_scores(&mut g, half, half);
        assert!((g.scalar(d) - 2.0 * (0.5f64 + 1e-7).ln().abs()).abs() < 1e-6);
        assert!((g.scalar(d) - 1.3863).abs() < 1e-3);

        let gen = gan_loss_generator_scores(&mut g, half);
        assert!((g.scalar(gen) - 0.6931).abs() < 1e-3);

        // perfect discriminator limit
        let ones = g.constant(img(&[1, 1, 6, 6], 1.0));
        let zeros = g.constant(img(&[1, 1, 6, 6], 0.0));
        let dp = gan_loss_discriminator_scores(&mut g, ones, zeros);
        assert!(g.scalar(dp).abs() < 1e-5);
        let gp = gan_loss_generator_scores(&mut g, ones);
        assert!(g.scalar(gp).abs() < 1e-5);
    }

    #[test]
    fn noise_loss_hinge() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(img(&[1, 3, 2, 2], 0.0));
        // z1 == z2: distance 0 -> exactly alpha
        let l = noise_loss(&mut g, 0.1, a, a).unwrap();
        assert_eq!(g.scalar(l), 0.1);

        // distance 0.5 >= alpha -> 0
        let b = g.constant(img(&[1, 3, 2, 2], 0.5));
        let l2 = noise_loss(&mut g, 0.1, a, b).unwrap();
        assert_eq!(g.scalar(l2), 0.0);

        // distance 0.06 -> 0.04
        let c = g.constant(img(&[1, 3, 2, 2], 0.06));
        let l3 = noise_loss(&mut g, 0.1, a, c).unwrap();
        assert!((g.scalar(l3) - 0.04).abs() < 1e-12);
    }

    #[test]
    fn report_total_consistency() {
        let w = LossWeights::default();
        let r = LossReport {
            cyc: 0.2,
            excyc: 0.1,
            sls_vc: 0.3,
            sls_oc: 0.4,
            iden: 0.5,
            dir: 0.7,
            gan_oc: 0.3,
            noise: 0.04,
            total: 0.0,
        };
        let total = r.recombined_total(&w);
        assert!((total - (4.2 + 0.7 + 0.3 + 0.04)).abs() < 1e-9);
    }

    #[test]
    fn adversarial_composition() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(ArrayD::from_elem(IxDyn(&[]), 0.7));
        let b = g.constant(ArrayD::from_elem(IxDyn(&[]), 0.3));
        let s = adversarial_loss(&mut g, a, b);
        assert!((g.scalar(s) - 1.0).abs() < 1e-12);
        let z = g.constant(ArrayD::from_elem(IxDyn(&[]), 0.0));
        let s0 = adversarial_loss(&mut g, z, z);
        assert_eq!(g.scalar(s0), 0.0);
    }
}
