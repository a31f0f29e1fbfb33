//! Generator-side losses and the total training objective: pixel and
//! perceptual reconstruction terms summed over the fake-image set, plus
//! their composition with the warp loss.

use crate::domain::{ImageTensor, LossWeights};
use crate::error::{Result, RmgnError};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use ndarray::{Array1, Array3, Array4, Ix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Frozen, seed-deterministic convolutional feature stack standing in for a
/// pretrained perceptual network. Stage 0 is linear; later stages apply a
/// leaky rectifier. Every stage downsamples by 2 and is tapped.
#[derive(Debug, Clone)]
pub struct PerceptualEmbedder<F: Scalar> {
    stages: Vec<(Array4<F>, Array1<F>)>,
    seed: u64,
}

impl<F: Scalar> PerceptualEmbedder<F> {
    pub fn new(seed: u64, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(RmgnError::InvalidValue("embedder needs >= 1 stage".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(channels.len());
        for (i, &co) in channels.iter().enumerate() {
            let ci = if i == 0 { 3 } else { channels[i - 1] };
            let std = (2.0 / (ci * 9) as f64).sqrt();
            let w = Array4::from_shape_fn((co, ci, 3, 3), |_| {
                let z: f64 = rng.sample(StandardNormal);
                F::cast(z * std)
            });
            let b = Array1::zeros(co);
            stages.push((w, b));
        }
        Ok(Self { stages, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_taps(&self) -> usize {
        self.stages.len()
    }

    /// Pushes the embedder onto a tape rooted at `x`; weights enter as
    /// constants so gradients flow only to the input.
    pub fn taps_on_graph(&self, g: &Graph<F>, x: NodeId) -> Vec<NodeId> {
        let slope = F::cast(0.1);
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (i, (w, b)) in self.stages.iter().enumerate() {
            let wn = g.constant(w.clone().into_dyn());
            let bn = g.constant(b.clone().into_dyn());
            cur = g.conv2d(cur, wn, bn, 2, 1);
            if i > 0 {
                cur = g.leaky_relu(cur, slope);
            }
            taps.push(cur);
        }
        taps
    }

    /// Eager tap features for a single image.
    pub fn features(&self, image: &ImageTensor<F>) -> Vec<Array3<F>> {
        let g = Graph::new();
        let x = g.constant(image.data().clone().into_dyn());
        self.taps_on_graph(&g, x)
            .into_iter()
            .map(|id| {
                g.value_owned(id)
                    .into_dimensionality::<Ix3>()
                    .expect("[c,h,w] tap")
            })
            .collect()
    }

    /// Spatially pooled final-tap embedding, used by the distribution
    /// metric.
    pub fn pooled_embedding(&self, image: &ImageTensor<F>) -> Array1<f64> {
        let taps = self.features(image);
        let last = taps.last().expect(">= 1 stage");
        let (c, h, w) = last.dim();
        let n = (h * w) as f64;
        Array1::from_shape_fn(c, |ci| {
            last.index_axis(ndarray::Axis(0), ci)
                .iter()
                .map(|v| v.to_f64_())
                .sum::<f64>()
                / n
        })
    }
}

fn check_same<F: Scalar>(a: &ImageTensor<F>, b: &ImageTensor<F>) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(RmgnError::shape(
            format!("{:?}", a.data().dim()),
            format!("{:?}", b.data().dim()),
        ));
    }
    Ok(())
}

/// Mean absolute pixel difference.
pub fn loss_pixel<F: Scalar>(pred: &ImageTensor<F>, gt: &ImageTensor<F>) -> Result<F> {
    check_same(pred, gt)?;
    let g = Graph::new();
    let a = g.constant(pred.data().clone().into_dyn());
    let b = g.constant(gt.data().clone().into_dyn());
    Ok(g.scalar(g.mean_abs_diff(a, b)))
}

/// Graph-side perceptual loss between two `[3, h, w]` nodes.
pub fn perceptual_on_graph<F: Scalar>(
    g: &Graph<F>,
    pred: NodeId,
    gt: NodeId,
    emb: &PerceptualEmbedder<F>,
) -> NodeId {
    let taps_a = emb.taps_on_graph(g, pred);
    let taps_b = emb.taps_on_graph(g, gt);
    let terms: Vec<NodeId> = taps_a
        .iter()
        .zip(taps_b.iter())
        .map(|(&a, &b)| g.mean_abs_diff(a, b))
        .collect();
    g.sum_scalars(&terms)
}

/// Sum over taps of the mean absolute feature difference.
pub fn loss_perceptual<F: Scalar>(
    pred: &ImageTensor<F>,
    gt: &ImageTensor<F>,
    emb: &PerceptualEmbedder<F>,
) -> Result<F> {
    check_same(pred, gt)?;
    let g = Graph::new();
    let a = g.constant(pred.data().clone().into_dyn());
    let b = g.constant(gt.data().clone().into_dyn());
    Ok(g.scalar(perceptual_on_graph(&g, a, b, emb)))
}

/// Graph-side generator loss: `Σ_j λ_f L_f(P̂_j, P) + λ_p L_p(P̂_j, P)`,
/// summed (not averaged) over the fake-image set.
pub fn generator_loss_on_graph<F: Scalar>(
    g: &Graph<F>,
    preds: &[NodeId],
    gt: NodeId,
    w: &LossWeights<F>,
    emb: &PerceptualEmbedder<F>,
) -> NodeId {
    assert!(!preds.is_empty(), "generator loss over empty prediction set");
    let terms: Vec<NodeId> = preds
        .iter()
        .map(|&p| {
            let lf = g.mean_abs_diff(p, gt);
            let lp = perceptual_on_graph(g, p, gt, emb);
            g.sum_scalars(&[g.scale(lf, w.lambda_f), g.scale(lp, w.lambda_p)])
        })
        .collect();
    g.sum_scalars(&terms)
}

/// Eager generator loss over a prediction set.
pub fn generator_loss<F: Scalar>(
    preds: &[ImageTensor<F>],
    gt: &ImageTensor<F>,
    w: &LossWeights<F>,
    emb: &PerceptualEmbedder<F>,
) -> Result<F> {
    if preds.is_empty() {
        return Err(RmgnError::InvalidValue("empty prediction set".into()));
    }
    for p in preds {
        check_same(p, gt)?;
    }
    let g = Graph::new();
    let nodes: Vec<NodeId> = preds
        .iter()
        .map(|p| g.constant(p.data().clone().into_dyn()))
        .collect();
    let gt_node = g.constant(gt.data().clone().into_dyn());
    Ok(g.scalar(generator_loss_on_graph(&g, &nodes, gt_node, w, emb)))
}

/// Total objective `O = L_W + L_G`; refuses non-finite inputs so a diverged
/// run aborts with diagnostics instead of training on NaN.
pub fn total_objective<F: Scalar>(l_w: F, l_g: F) -> Result<F> {
    if !l_w.is_finite() || !l_g.is_finite() {
        return Err(RmgnError::InvalidValue(format!(
            "non-finite objective components: L_W = {l_w}, L_G = {l_g}"
        )));
    }
    Ok(l_w + l_g)
}
