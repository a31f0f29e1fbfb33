//! Quantitative evaluation: Fréchet distance between embedded image sets,
//! a mask-localization score, pixel distance against the exact oracle
//! composites, and the ablation / fake-set-size harnesses built on them.

use crate::atelier::{oracle_teacher, render_cloth, render_person, DatasetManifest};
use crate::config::TrainConfig;
use crate::domain::{ImageTensor, RegionalMask};
use crate::error::{Result, RmgnError};
use crate::objectives::PerceptualEmbedder;
use crate::scalar::Scalar;
use crate::train::{embedder_for, infer, train, ModelState};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use std::path::Path;

/// Gaussian fit of an embedded image set.
#[derive(Debug, Clone)]
pub struct EmbeddingStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

/// Pools every image through the embedder's final tap and fits sample mean
/// and unbiased covariance.
pub fn fit_stats<F: Scalar>(
    images: &[ImageTensor<F>],
    emb: &PerceptualEmbedder<F>,
) -> Result<EmbeddingStats> {
    if images.len() < 2 {
        return Err(RmgnError::InvalidValue(format!(
            "distribution fit needs >= 2 images, got {}",
            images.len()
        )));
    }
    let rows: Vec<Array1<f64>> = images.iter().map(|im| emb.pooled_embedding(im)).collect();
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = Array1::<f64>::zeros(d);
    for r in &rows {
        mean += r;
    }
    mean /= n;
    let mut cov = Array2::<f64>::zeros((d, d));
    for r in &rows {
        let c = r - &mean;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov /= n - 1.0;
    Ok(EmbeddingStats { mean, cov })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.dim().0, a.dim().1, |i, j| a[[i, j]])
}

/// Symmetric PSD square root via eigendecomposition, clamping negative
/// eigenvalues at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussian fits:
/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`, with the cross term
/// computed as the trace of `(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2}`.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(RmgnError::shape(
            format!("{} dims", a.mean.len()),
            format!("{} dims", b.mean.len()),
        ));
    }
    let delta = DVector::from_iterator(
        a.mean.len(),
        a.mean.iter().zip(b.mean.iter()).map(|(x, y)| x - y),
    );
    let sa = to_dmatrix(&a.cov);
    let sb = to_dmatrix(&b.cov);
    let sa_sqrt = psd_sqrt(&sa);
    let inner = &sa_sqrt * &sb * &sa_sqrt;
    let cross = psd_sqrt(&inner);
    let dist = delta.norm_squared() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(dist.max(0.0))
}

/// How sharply the finest selector masks localize the worn-cloth region:
/// mean over samples of (mask mean inside the ground-truth region − mask
/// mean outside). 0 for a flat mask, 1 for a perfect one.
pub fn mask_region_score<F: Scalar>(
    masks: &[RegionalMask<F>],
    gt_cloth_masks: &[Array2<F>],
) -> Result<f64> {
    if masks.is_empty() || masks.len() != gt_cloth_masks.len() {
        return Err(RmgnError::InvalidValue(format!(
            "need equally many masks and regions, got {} and {}",
            masks.len(),
            gt_cloth_masks.len()
        )));
    }
    let mut total = 0.0;
    for (m, gt) in masks.iter().zip(gt_cloth_masks.iter()) {
        let (_, h, w) = m.values().dim();
        if gt.dim() != (h, w) {
            return Err(RmgnError::shape(
                format!("{h}x{w} region"),
                format!("{}x{}", gt.dim().0, gt.dim().1),
            ));
        }
        let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0f64, 0usize, 0.0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                let v = m.values()[[0, y, x]].to_f64_();
                if gt[[y, x]] > F::cast(0.5) {
                    in_sum += v;
                    in_n += 1;
                } else {
                    out_sum += v;
                    out_n += 1;
                }
            }
        }
        if in_n == 0 || out_n == 0 {
            return Err(RmgnError::InvalidValue(
                "degenerate ground-truth region (all inside or all outside)".into(),
            ));
        }
        total += in_sum / in_n as f64 - out_sum / out_n as f64;
    }
    Ok(total / masks.len() as f64)
}

/// Model quality against the synthetic ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    /// Mean absolute pixel distance between the inferred try-on and the
    /// oracle teacher's exact composite.
    pub pixel_l1: f64,
    /// Fréchet distance between the inferred and oracle image sets
    /// (requires at least two items).
    pub fid: Option<f64>,
    /// Finest-mask localization score against the worn-cloth regions.
    pub mask_score: f64,
}

/// Runs inference over every manifest item (first candidate cloth each) and
/// scores against the oracle composites.
pub fn evaluate_model<F: Scalar>(
    state: &ModelState<F>,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    emb: &PerceptualEmbedder<F>,
) -> Result<EvalMetrics> {
    if manifest.items.is_empty() {
        return Err(RmgnError::InvalidValue("empty dataset manifest".into()));
    }
    let mut preds = Vec::with_capacity(manifest.items.len());
    let mut oracles = Vec::with_capacity(manifest.items.len());
    let mut l1 = 0.0;
    let mut count = 0.0;
    let mut finest_masks = Vec::with_capacity(manifest.items.len());
    let mut regions = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let render = render_person::<F>(&item.person, cfg.height, cfg.width);
        let cloth = render_cloth::<F>(&item.clothes[0], cfg.height, cfg.width);
        let (pred, masks) = infer(&render.image, &cloth, state)?;
        let oracle = oracle_teacher(
            &render.image,
            &render.cloth_region,
            &render.torso_geometry,
            &cloth,
        )?;
        l1 += pred
            .data()
            .iter()
            .zip(oracle.data().iter())
            .map(|(a, b)| (*a - *b).abs().to_f64_())
            .sum::<f64>()
            / pred.data().len() as f64;
        count += 1.0;
        preds.push(pred);
        oracles.push(oracle);
        finest_masks.push(masks.into_iter().last().expect(">= 1 level"));
        regions.push(render.cloth_region);
    }
    let fid = if preds.len() >= 2 {
        Some(frechet_distance(
            &fit_stats(&preds, emb)?,
            &fit_stats(&oracles, emb)?,
        )?)
    } else {
        None
    };
    let mask_score = mask_region_score(&finest_masks, &regions)?;
    Ok(EvalMetrics {
        pixel_l1: l1 / count,
        fid,
        mask_score,
    })
}

/// One row of the ablation / sweep tables: per-seed metrics for a named
/// configuration.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub pixel_l1: Vec<f64>,
    pub fid: Vec<f64>,
}

impl VariantResult {
    pub fn median_pixel_l1(&self) -> f64 {
        median(&self.pixel_l1)
    }

    pub fn median_fid(&self) -> f64 {
        median(&self.fid)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn train_and_eval<F: Scalar>(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    work_dir: &Path,
    tag: &str,
    seed: u64,
) -> Result<EvalMetrics> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let run_dir = work_dir.join(format!("{tag}_seed{seed}"));
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| RmgnError::io(run_dir.display().to_string(), e))?;
    let state = train::<F>(&cfg, manifest, &run_dir, None)?;
    let emb = embedder_for::<F>(&cfg)?;
    evaluate_model(&state, &cfg, manifest, &emb)
}

/// The four ablation variants: a bare baseline, then the multi-level
/// extractor, the regional-mask fusion, and the multi-fake posture loss
/// added cumulatively.
pub fn ablation_variants(cfg: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let base = TrainConfig {
        use_multilevel_extractor: false,
        use_mask_fusion: false,
        n_fake: 1,
        ..cfg.clone()
    };
    vec![
        ("A_baseline".into(), base.clone()),
        (
            "B_extractor".into(),
            TrainConfig {
                use_multilevel_extractor: true,
                ..base.clone()
            },
        ),
        (
            "C_mask".into(),
            TrainConfig {
                use_multilevel_extractor: true,
                use_mask_fusion: true,
                ..base.clone()
            },
        ),
        (
            "D_full".into(),
            TrainConfig {
                use_multilevel_extractor: true,
                use_mask_fusion: true,
                n_fake: cfg.n_fake.max(2),
                ..base
            },
        ),
    ]
}

/// Trains every ablation variant over the given seeds and collects the
/// quality metrics; run directories land under `work_dir`.
pub fn run_ablation<F: Scalar>(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    seeds: &[u64],
    work_dir: &Path,
) -> Result<Vec<VariantResult>> {
    if seeds.is_empty() {
        return Err(RmgnError::InvalidValue("need >= 1 seed".into()));
    }
    let mut results = Vec::new();
    for (name, vcfg) in ablation_variants(cfg) {
        let mut row = VariantResult {
            name: name.clone(),
            seeds: seeds.to_vec(),
            pixel_l1: Vec::new(),
            fid: Vec::new(),
        };
        for &seed in seeds {
            let m = train_and_eval::<F>(&vcfg, manifest, work_dir, &name, seed)?;
            row.pixel_l1.push(m.pixel_l1);
            row.fid.push(m.fid.unwrap_or(f64::NAN));
        }
        results.push(row);
    }
    Ok(results)
}

/// Trains one model per fake-set size with otherwise identical
/// configuration, so metric differences are attributable to `n_fake` alone.
pub fn run_fakeset_sweep<F: Scalar>(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    n_values: &[usize],
    seeds: &[u64],
    work_dir: &Path,
) -> Result<Vec<VariantResult>> {
    if n_values.is_empty() || seeds.is_empty() {
        return Err(RmgnError::InvalidValue("need >= 1 n value and seed".into()));
    }
    if n_values.iter().any(|n| !(1..=3).contains(n)) {
        return Err(RmgnError::InvalidValue(
            "fake-set sizes must lie in [1, 3]".into(),
        ));
    }
    let mut results = Vec::new();
    for &n in n_values {
        let vcfg = TrainConfig {
            n_fake: n,
            ..cfg.clone()
        };
        let name = format!("nfake{n}");
        let mut row = VariantResult {
            name: name.clone(),
            seeds: seeds.to_vec(),
            pixel_l1: Vec::new(),
            fid: Vec::new(),
        };
        for &seed in seeds {
            let m = train_and_eval::<F>(&vcfg, manifest, work_dir, &name, seed)?;
            row.pixel_l1.push(m.pixel_l1);
            row.fid.push(m.fid.unwrap_or(f64::NAN));
        }
        results.push(row);
    }
    Ok(results)
}

/// Renders the result tables as CSV.
pub fn results_to_csv(rows: &[VariantResult]) -> String {
    let mut out = String::from("variant,seed,pixel_l1,fid\n");
    for row in rows {
        for (i, &seed) in row.seeds.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.name, seed, row.pixel_l1[i], row.fid[i]
            ));
        }
    }
    out
}
