//! Fake-triplet training loop: samples a fake set per person, optimizes the
//! joint warp + generator objective with one adaptive-moment update per
//! step, and owns checkpointing, metrics, and inference.

use crate::atelier::{
    gt_warped_cloth, oracle_teacher, own_cloth_spec, render_cloth, render_person, ClothSpec,
    DatasetManifest, PersonRender,
};
use crate::config::TrainConfig;
use crate::domain::{ImageTensor, LossWeights, RegionalMask, WarpedCloth};
use crate::error::{Result, RmgnError};
use crate::generator::{generate, GeneratorParams};
use crate::graph::Graph;
use crate::objectives::{generator_loss_on_graph, PerceptualEmbedder};
use crate::params::{
    read_adam_payload, read_container, read_rng_payload, read_store_payload, write_adam_payload,
    write_container, write_rng_payload, write_store_payload, Adam,
};
use crate::scalar::Scalar;
use crate::warp::{
    posture_loss_on_graph, predict_flow, teacher_flow_pyramid, warp, FlowPyramid, WarpParams,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Everything the optimizer touches, plus the RNG that drives sampling; a
/// checkpoint restores all of it bit-identically.
#[derive(Debug, Clone)]
pub struct ModelState<F: Scalar> {
    pub warp: WarpParams<F>,
    pub gen: GeneratorParams<F>,
    pub warp_opt: Adam<F>,
    pub gen_opt: Adam<F>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub last_checkpoint: String,
}

impl<F: Scalar> ModelState<F> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let warp = WarpParams::new(cfg, &mut rng);
        let gen = GeneratorParams::new(cfg, &mut rng);
        let lr = F::cast(cfg.learning_rate);
        let warp_opt = Adam::new(&warp.store, lr);
        let gen_opt = Adam::new(&gen.store, lr);
        Ok(Self {
            warp,
            gen,
            warp_opt,
            gen_opt,
            step: 0,
            rng,
            last_checkpoint: "none".into(),
        })
    }
}

/// Frozen embedder used by the perceptual term; keyed off the run seed so
/// the whole run stays a pure function of the config.
pub fn embedder_for<F: Scalar>(cfg: &TrainConfig) -> Result<PerceptualEmbedder<F>> {
    PerceptualEmbedder::new(cfg.seed ^ 0x9E37_79B9_7F4A_7C15, &cfg.embed_channels)
}

/// One person's supervision unit: the fake set, its shared cloth and
/// ground-truth data, and the exact teacher flows.
#[derive(Debug, Clone)]
pub struct TrainSample<F: Scalar> {
    pub fakes: Vec<ImageTensor<F>>,
    pub target_cloth: ImageTensor<F>,
    pub real_person: ImageTensor<F>,
    pub gt_warped: WarpedCloth<F>,
    pub gt_mask: Array2<F>,
    pub teacher: FlowPyramid<F>,
}

/// Teacher composites of `n` distinct sampled clothes onto one person
/// render — same posture, different clothes, drawn without replacement.
pub fn sample_fake_set<F: Scalar>(
    render: &PersonRender<F>,
    clothes: &[ClothSpec],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ImageTensor<F>>> {
    if n == 0 {
        return Err(RmgnError::InvalidValue("fake set size must be >= 1".into()));
    }
    if clothes.len() < n {
        return Err(RmgnError::InvalidValue(format!(
            "cloth pool of {} cannot supply {n} distinct fakes",
            clothes.len()
        )));
    }
    let (h, w) = (render.image.height(), render.image.width());
    let picks = rand::seq::index::sample(rng, clothes.len(), n);
    picks
        .into_iter()
        .map(|i| {
            let cloth = render_cloth::<F>(&clothes[i], h, w);
            oracle_teacher(
                &render.image,
                &render.cloth_region,
                &render.torso_geometry,
                &cloth,
            )
        })
        .collect()
}

/// Renders one manifest item into a training sample.
pub fn build_sample<F: Scalar>(
    item: &crate::atelier::DatasetItem,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample<F>> {
    let render = render_person::<F>(&item.person, cfg.height, cfg.width);
    let fakes = sample_fake_set(&render, &item.clothes, cfg.n_fake, rng)?;
    let target_cloth = render_cloth::<F>(&own_cloth_spec(&item.person), cfg.height, cfg.width);
    let gt_warped = gt_warped_cloth(&render.image, &render.cloth_region);
    let teacher =
        teacher_flow_pyramid::<F>(&render.torso_geometry, cfg.height, cfg.width, cfg.l_scales);
    Ok(TrainSample {
        fakes,
        target_cloth,
        real_person: render.image,
        gt_mask: render.cloth_region,
        teacher,
        gt_warped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub l_w: f64,
    pub l_g: f64,
    pub o: f64,
}

/// One joint optimization step on `O = L_W + L_G`. The warped clothes
/// produced inside the posture loss are reused as generator inputs, so
/// generator gradients reach the warp parameters too.
pub fn train_step<F: Scalar>(
    state: &mut ModelState<F>,
    sample: &TrainSample<F>,
    cfg: &TrainConfig,
    emb: &PerceptualEmbedder<F>,
) -> Result<StepMetrics> {
    let w: LossWeights<F> = cfg.loss_weights();
    let g = Graph::new();
    let warp_nodes = state.warp.store.leaves(&g);
    let gen_nodes = state.gen.store.leaves(&g);
    let fakes: Vec<_> = sample
        .fakes
        .iter()
        .map(|f| g.constant(f.data().clone().into_dyn()))
        .collect();
    let cloth = g.constant(sample.target_cloth.data().clone().into_dyn());
    let gt_img = g.constant(sample.gt_warped.image.data().clone().into_dyn());
    let real = g.constant(sample.real_person.data().clone().into_dyn());

    let (l_w, warped) = posture_loss_on_graph(
        &g,
        &warp_nodes,
        &state.warp.net,
        &fakes,
        cloth,
        gt_img,
        &sample.teacher,
        &w,
    );
    let preds: Vec<_> = warped
        .iter()
        .zip(fakes.iter())
        .map(|(&wc, &fk)| state.gen.net.forward(&g, &gen_nodes, wc, fk).0)
        .collect();
    let l_g = generator_loss_on_graph(&g, &preds, real, &w, emb);
    let o = g.sum_scalars(&[l_w, l_g]);

    let metrics = StepMetrics {
        step: state.step + 1,
        l_w: g.scalar(l_w).to_f64_(),
        l_g: g.scalar(l_g).to_f64_(),
        o: g.scalar(o).to_f64_(),
    };
    if !metrics.o.is_finite() {
        return Err(RmgnError::NonFiniteLoss {
            step: state.step,
            last_checkpoint: state.last_checkpoint.clone(),
        });
    }

    let grads = g.backward(o);
    let warp_grads: Vec<_> = warp_nodes.iter().map(|&id| grads.get(id).cloned()).collect();
    let gen_grads: Vec<_> = gen_nodes.iter().map(|&id| grads.get(id).cloned()).collect();
    state.warp_opt.step(&mut state.warp.store, &warp_grads);
    state.gen_opt.step(&mut state.gen.store, &gen_grads);
    if !state.warp.store.all_finite() || !state.gen.store.all_finite() {
        return Err(RmgnError::NonFiniteLoss {
            step: state.step,
            last_checkpoint: state.last_checkpoint.clone(),
        });
    }
    state.step += 1;
    Ok(metrics)
}

fn ckpt_sections<F: Scalar>(state: &ModelState<F>) -> Vec<(&'static str, Vec<u8>)> {
    let mut opt = Vec::new();
    for payload in [
        write_adam_payload(&state.warp_opt),
        write_adam_payload(&state.gen_opt),
    ] {
        opt.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        opt.extend_from_slice(&payload);
    }
    vec![
        ("warp", write_store_payload(&state.warp.store)),
        ("gen", write_store_payload(&state.gen.store)),
        ("optimizer", opt),
        ("rng", write_rng_payload(&state.rng)),
        ("meta", state.step.to_le_bytes().to_vec()),
    ]
}

pub fn save_checkpoint<F: Scalar>(state: &ModelState<F>, path: &Path) -> Result<()> {
    write_container(path, &ckpt_sections(state))
}

pub fn load_checkpoint<F: Scalar>(path: &Path, cfg: &TrainConfig) -> Result<ModelState<F>> {
    let mut state = ModelState::new(cfg)?;
    let sections = read_container(path)?;
    let find = |name: &str| {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| RmgnError::Checkpoint(format!("missing section '{name}'")))
    };
    read_store_payload(find("warp")?, &mut state.warp.store)?;
    read_store_payload(find("gen")?, &mut state.gen.store)?;
    let opt = find("optimizer")?;
    let mut offset = 0usize;
    for adam in [&mut state.warp_opt, &mut state.gen_opt] {
        if opt.len() < offset + 8 {
            return Err(RmgnError::Checkpoint("truncated optimizer section".into()));
        }
        let len = u64::from_le_bytes(opt[offset..offset + 8].try_into().unwrap()) as usize;
        offset += 8;
        if opt.len() < offset + len {
            return Err(RmgnError::Checkpoint("truncated optimizer section".into()));
        }
        read_adam_payload(&opt[offset..offset + len], adam)?;
        offset += len;
    }
    state.rng = read_rng_payload(find("rng")?)?;
    let meta = find("meta")?;
    if meta.len() != 8 {
        return Err(RmgnError::Checkpoint("bad meta section".into()));
    }
    state.step = u64::from_le_bytes(meta.try_into().unwrap());
    state.last_checkpoint = path.display().to_string();
    Ok(state)
}

fn io_at(step: u64, path: &Path, e: std::io::Error) -> RmgnError {
    RmgnError::Checkpoint(format!("step {step}: {}: {e}", path.display()))
}

/// Runs the training loop, writing `metrics.csv` and periodic checkpoints
/// under `run_dir`. Resuming from a saved state reproduces the metrics
/// stream of an uninterrupted run bit for bit.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<ModelState<F>> {
    cfg.validate()?;
    if manifest.items.is_empty() {
        return Err(RmgnError::InvalidValue("empty dataset manifest".into()));
    }
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| io_at(0, &ckpt_dir, e))?;
    let mut state: ModelState<F> = match resume {
        Some(p) => load_checkpoint(p, cfg)?,
        None => ModelState::new(cfg)?,
    };
    let emb = embedder_for::<F>(cfg)?;

    let metrics_path = run_dir.join("metrics.csv");
    let fresh = resume.is_none() || !metrics_path.exists();
    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| io_at(state.step, &metrics_path, e))?;
    if fresh {
        writeln!(metrics_file, "step,L_W,L_G,O")
            .map_err(|e| io_at(state.step, &metrics_path, e))?;
    }

    // the schedule is replayed from step 0 so a resumed run sees the same
    // item order and rng draws as an uninterrupted one
    let mut schedule_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_F42D_4C95_7F2D);
    let mut order: Vec<usize> = (0..manifest.items.len()).collect();
    let mut cursor = manifest.items.len(); // force a shuffle on first use
    for step in 0..cfg.steps {
        if cursor >= order.len() {
            order.shuffle(&mut schedule_rng);
            cursor = 0;
        }
        let item = &manifest.items[order[cursor]];
        cursor += 1;
        if step < state.step {
            // the restored rng already reflects these draws; only the
            // schedule cursor needs to advance
            continue;
        }
        let sample = build_sample::<F>(item, cfg, &mut state.rng)?;
        let m = train_step(&mut state, &sample, cfg, &emb)?;
        writeln!(metrics_file, "{},{},{},{}", m.step, m.l_w, m.l_g, m.o)
            .map_err(|e| io_at(m.step, &metrics_path, e))?;
        if cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0 {
            let path = ckpt_path(&ckpt_dir, state.step);
            save_checkpoint(&state, &path)?;
            state.last_checkpoint = path.display().to_string();
        }
    }
    if cfg.steps > 0 {
        let path = ckpt_path(&ckpt_dir, state.step);
        if !path.exists() {
            save_checkpoint(&state, &path)?;
        }
        state.last_checkpoint = path.display().to_string();
    }
    Ok(state)
}

pub fn ckpt_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Parser-free inference: exactly two images plus the model state in,
/// try-on image plus the per-level selector masks out.
pub fn infer<F: Scalar>(
    person: &ImageTensor<F>,
    cloth: &ImageTensor<F>,
    state: &ModelState<F>,
) -> Result<(ImageTensor<F>, Vec<RegionalMask<F>>)> {
    let flows = predict_flow(person, cloth, &state.warp)?;
    let warped = warp(cloth, flows.flows.last().expect(">= 1 scale"))?;
    generate(&warped, person, &state.gen)
}
