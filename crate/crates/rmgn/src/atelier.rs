//! Procedural data: stick-figure persons, flat clothes, exact torso
//! geometry, and the oracle teacher that composites arbitrary clothes onto
//! a rendered person. The teacher is exact (ground-truth affine geometry),
//! so every error in the trained student is attributable to the student.

use crate::domain::{ImageTensor, WarpedCloth};
use crate::error::{Result, RmgnError};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Affine map from the canonical cloth frame to the person image frame:
/// rotation (torso lean) and uniform scale (body scale) about the cloth
/// center, then translation to the torso anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorsoGeometry {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl TorsoGeometry {
    pub fn new(lean_deg: f64, scale: f64, center_from: (f64, f64), center_to: (f64, f64)) -> Self {
        let r = lean_deg.to_radians();
        let (s, c) = (r.sin(), r.cos());
        let (a11, a12, a21, a22) = (scale * c, -scale * s, scale * s, scale * c);
        let (cx, cy) = center_from;
        let (px, py) = center_to;
        Self {
            a11,
            a12,
            a21,
            a22,
            tx: px - (a11 * cx + a12 * cy),
            ty: py - (a21 * cx + a22 * cy),
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a11 * x + self.a12 * y + self.tx,
            self.a21 * x + self.a22 * y + self.ty,
        )
    }

    pub fn inverse(&self) -> Self {
        let det = self.a11 * self.a22 - self.a12 * self.a21;
        let (i11, i12, i21, i22) = (
            self.a22 / det,
            -self.a12 / det,
            -self.a21 / det,
            self.a11 / det,
        );
        Self {
            a11: i11,
            a12: i12,
            a21: i21,
            a22: i22,
            tx: -(i11 * self.tx + i12 * self.ty),
            ty: -(i21 * self.tx + i22 * self.ty),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Solid,
    Stripes,
    LogoPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SleeveLength {
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClothSpec {
    pub seed: u64,
    /// RGB in [-1, 1].
    pub base_color: [f64; 3],
    pub pattern: Pattern,
    pub sleeve_length: SleeveLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub seed: u64,
    /// Degrees from straight-down, per arm, in [-90, 90].
    pub arm_angles: [f64; 2],
    /// Degrees, in [-20, 20].
    pub torso_lean: f64,
    pub skin_tone: [f64; 3],
    pub background_tone: [f64; 3],
    /// In [0.8, 1.2].
    pub body_scale: f64,
}

impl PersonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.arm_angles.iter().any(|a| a.abs() > 90.0) {
            return Err(RmgnError::InvalidValue("arm angle outside [-90, 90]".into()));
        }
        if self.torso_lean.abs() > 20.0 {
            return Err(RmgnError::InvalidValue("torso lean outside [-20, 20]".into()));
        }
        if !(0.8..=1.2).contains(&self.body_scale) {
            return Err(RmgnError::InvalidValue("body scale outside [0.8, 1.2]".into()));
        }
        Ok(())
    }
}

/// Axis-aligned rect in continuous canonical-frame pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Canonical cloth silhouette for an `h x w` frame: torso rectangle plus
/// two straight sleeves.
fn silhouette(h: usize, w: usize, sleeve: SleeveLength) -> Vec<Rect> {
    let (hf, wf) = (h as f64, w as f64);
    let torso = Rect {
        x0: 0.30 * wf,
        y0: 0.25 * hf,
        x1: 0.70 * wf,
        y1: 0.62 * hf,
    };
    let sleeve_y1 = match sleeve {
        SleeveLength::Short => 0.40 * hf,
        SleeveLength::Long => 0.58 * hf,
    };
    let left = Rect {
        x0: 0.14 * wf,
        y0: 0.25 * hf,
        x1: 0.30 * wf,
        y1: sleeve_y1,
    };
    let right = Rect {
        x0: 0.70 * wf,
        y0: 0.25 * hf,
        x1: 0.86 * wf,
        y1: sleeve_y1,
    };
    vec![torso, left, right]
}

fn in_silhouette(rects: &[Rect], x: f64, y: f64) -> bool {
    rects.iter().any(|r| r.contains(x, y))
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Bilinear sample with border clamping, at continuous coordinates `(x, y)`.
fn sample_bilinear<F: Scalar>(img: &Array3<F>, x: f64, y: f64) -> Vec<F> {
    let (c, h, w) = img.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = F::cast(x - x0);
    let fy = F::cast(y - y0);
    let cl = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let (xa, xb) = (cl(x0, w), cl(x0 + 1, w));
    let (ya, yb) = (cl(y0, h), cl(y0 + 1, h));
    let one = F::one();
    (0..c)
        .map(|ci| {
            img[[ci, ya, xa]] * (one - fx) * (one - fy)
                + img[[ci, ya, xb]] * fx * (one - fy)
                + img[[ci, yb, xa]] * (one - fx) * fy
                + img[[ci, yb, xb]] * fx * fy
        })
        .collect()
}

/// Renders a target cloth laid flat in the canonical frame on a neutral
/// background. Deterministic in the spec.
pub fn render_cloth<F: Scalar>(spec: &ClothSpec, h: usize, w: usize) -> ImageTensor<F> {
    let rects = silhouette(h, w, spec.sleeve_length);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xC107);
    let neutral = 0.85;
    let mut data = Array3::from_elem((3, h, w), F::cast(neutral));
    // stripe variant: lightened base color
    let stripe_color: Vec<f64> = spec
        .base_color
        .iter()
        .map(|&v| clamp_unit(v * 0.4 + 0.5))
        .collect();
    let logo_color: Vec<f64> = spec.base_color.iter().map(|&v| clamp_unit(-v)).collect();
    let logo = Rect {
        x0: 0.42 * w as f64,
        y0: 0.36 * h as f64,
        x1: 0.58 * w as f64,
        y1: 0.48 * h as f64,
    };
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            if !in_silhouette(&rects, xf, yf) {
                continue;
            }
            let mut color = spec.base_color;
            match spec.pattern {
                Pattern::Solid => {}
                Pattern::Stripes => {
                    if (y / 4) % 2 == 1 {
                        color = [stripe_color[0], stripe_color[1], stripe_color[2]];
                    }
                }
                Pattern::LogoPatch => {
                    if logo.contains(xf, yf) {
                        color = [logo_color[0], logo_color[1], logo_color[2]];
                    }
                }
            }
            // per-seed fabric noise, geometry-independent
            let noise: f64 = rng.gen_range(-0.05..0.05);
            for ci in 0..3 {
                data[[ci, y, x]] = F::cast(clamp_unit(color[ci] + noise));
            }
        }
    }
    ImageTensor::new(data).expect("cloth render in range")
}

/// The person's own cloth, derived deterministically from the person seed.
pub fn own_cloth_spec(person: &PersonSpec) -> ClothSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(person.seed ^ 0x0EE7);
    random_cloth_spec(&mut rng)
}

pub fn random_cloth_spec(rng: &mut ChaCha8Rng) -> ClothSpec {
    let palette: [[f64; 3]; 6] = [
        [0.9, -0.7, -0.7],
        [-0.7, 0.6, -0.7],
        [-0.7, -0.7, 0.9],
        [0.8, 0.8, -0.8],
        [0.7, -0.6, 0.7],
        [-0.8, 0.7, 0.8],
    ];
    let base_color = palette[rng.gen_range(0..palette.len())];
    let pattern = match rng.gen_range(0..3) {
        0 => Pattern::Solid,
        1 => Pattern::Stripes,
        _ => Pattern::LogoPatch,
    };
    let sleeve_length = if rng.gen_bool(0.5) {
        SleeveLength::Short
    } else {
        SleeveLength::Long
    };
    ClothSpec {
        seed: rng.gen::<u64>() >> 1, // keep within toml's i64 range
        base_color,
        pattern,
        sleeve_length,
    }
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Replaces the pixels of `cloth_region` with `cloth` sampled through the
/// inverse torso geometry; all other pixels pass through untouched. This is
/// both the worn-cloth rasterizer inside [`render_person`] and the oracle
/// teacher's compositing routine, so teacher composites of a person's own
/// cloth are bit-identical to the render.
fn composite_cloth<F: Scalar>(
    base: &Array3<F>,
    cloth_region: &Array2<F>,
    geometry: &TorsoGeometry,
    cloth: &Array3<F>,
) -> Array3<F> {
    let inv = geometry.inverse();
    let (_, h, w) = base.dim();
    let mut out = base.clone();
    for y in 0..h {
        for x in 0..w {
            if cloth_region[[y, x]] == F::one() {
                let (qx, qy) = inv.apply(x as f64, y as f64);
                let color = sample_bilinear(cloth, qx, qy);
                for ci in 0..3 {
                    out[[ci, y, x]] = color[ci];
                }
            }
        }
    }
    out
}

/// Output of [`render_person`]: the image, the exact worn-cloth mask, and
/// the affine from the canonical cloth frame to the image frame.
#[derive(Debug, Clone)]
pub struct PersonRender<F: Scalar> {
    pub image: ImageTensor<F>,
    /// `[H, W]` binary.
    pub cloth_region: Array2<F>,
    pub torso_geometry: TorsoGeometry,
}

/// Renders a stick-figure person wearing their own procedurally chosen
/// cloth. Hard edges throughout, so the cloth mask is exact binary.
pub fn render_person<F: Scalar>(spec: &PersonSpec, h: usize, w: usize) -> PersonRender<F> {
    spec.validate().expect("valid person spec");
    let (hf, wf) = (h as f64, w as f64);
    let mut body = Array3::zeros((3, h, w));
    for ci in 0..3 {
        body.index_axis_mut(ndarray::Axis(0), ci)
            .fill(F::cast(spec.background_tone[ci]));
    }

    let torso_cx = 0.5 * wf;
    let torso_cy = 0.45 * hf;
    let scale = spec.body_scale;

    // skeleton strokes: head disc, neck, arms from the shoulders at the
    // spec'd angles, legs below the torso
    let head_cy = torso_cy - 0.28 * hf * scale;
    let head_r = 0.07 * hf * scale;
    let shoulder_y = torso_cy - 0.17 * hf * scale;
    let shoulder_dx = 0.17 * wf * scale;
    let arm_len = 0.22 * hf * scale;
    let hip_y = torso_cy + 0.17 * hf * scale;
    let leg_len = 0.30 * hf * scale;
    let stroke = 0.018 * hf * scale;

    let mut segments: Vec<(f64, f64, f64, f64)> = Vec::new();
    // neck
    segments.push((torso_cx, head_cy + head_r, torso_cx, shoulder_y));
    // arms: angle measured from straight-down, positive swings outward
    for (i, &ang) in spec.arm_angles.iter().enumerate() {
        let side = if i == 0 { -1.0 } else { 1.0 };
        let sx = torso_cx + side * shoulder_dx;
        let r = ang.to_radians();
        let ex = sx + side * arm_len * r.sin();
        let ey = shoulder_y + arm_len * r.cos();
        segments.push((sx, sy_clamp(shoulder_y, hf), ex.clamp(0.0, wf - 1.0), ey.clamp(0.0, hf - 1.0)));
    }
    // legs
    for side in [-1.0, 1.0] {
        let sx = torso_cx + side * 0.07 * wf * scale;
        segments.push((sx, hip_y, sx + side * 0.02 * wf, (hip_y + leg_len).min(hf - 1.0)));
    }

    let skin: Vec<F> = spec.skin_tone.iter().map(|&v| F::cast(v)).collect();
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let head = ((xf - torso_cx).powi(2) + (yf - head_cy).powi(2)).sqrt() <= head_r;
            let on_stroke = segments
                .iter()
                .any(|&(ax, ay, bx, by)| dist_to_segment(xf, yf, ax, ay, bx, by) <= stroke);
            if head || on_stroke {
                for ci in 0..3 {
                    body[[ci, y, x]] = skin[ci];
                }
            }
        }
    }

    // worn cloth through the ground-truth affine
    let geometry = TorsoGeometry::new(
        spec.torso_lean,
        scale,
        (0.5 * wf, 0.43 * hf),
        (torso_cx, torso_cy),
    );
    let own = own_cloth_spec(spec);
    let cloth_img = render_cloth::<F>(&own, h, w);
    let rects = silhouette(h, w, own.sleeve_length);
    let inv = geometry.inverse();
    let mut cloth_region = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (qx, qy) = inv.apply(x as f64, y as f64);
            // require all four bilinear taps inside the silhouette so the
            // composite never samples the canonical background
            let (q0x, q0y) = (qx.floor(), qy.floor());
            let all_in = [
                (q0x, q0y),
                (q0x + 1.0, q0y),
                (q0x, q0y + 1.0),
                (q0x + 1.0, q0y + 1.0),
            ]
            .iter()
            .all(|&(tx, ty)| in_silhouette(&rects, tx, ty));
            if all_in {
                cloth_region[[y, x]] = F::one();
            }
        }
    }
    let composited = composite_cloth(&body, &cloth_region, &geometry, cloth_img.data());
    PersonRender {
        image: ImageTensor::new(composited).expect("person render in range"),
        cloth_region,
        torso_geometry: geometry,
    }
}

fn sy_clamp(v: f64, hi: f64) -> f64 {
    v.clamp(0.0, hi - 1.0)
}

/// Exact-compositing stand-in for a pretrained parser-based teacher:
/// returns the person with their worn cloth replaced by `cloth` warped
/// through the ground-truth geometry. Non-cloth pixels are bit-identical
/// to the input person.
pub fn oracle_teacher<F: Scalar>(
    person: &ImageTensor<F>,
    cloth_region: &Array2<F>,
    torso_geometry: &TorsoGeometry,
    cloth: &ImageTensor<F>,
) -> Result<ImageTensor<F>> {
    if person.data().dim() != cloth.data().dim() || cloth_region.dim() != (person.height(), person.width()) {
        return Err(RmgnError::shape(
            "person, cloth, and mask with matching dims",
            format!(
                "person {:?}, cloth {:?}, mask {:?}",
                person.data().dim(),
                cloth.data().dim(),
                cloth_region.dim()
            ),
        ));
    }
    let out = composite_cloth(person.data(), cloth_region, torso_geometry, cloth.data());
    ImageTensor::new(out)
}

/// Ground-truth deformed cloth: person pixels inside the worn-cloth region,
/// zeros elsewhere; validity equals the region mask.
pub fn gt_warped_cloth<F: Scalar>(
    person: &ImageTensor<F>,
    cloth_region: &Array2<F>,
) -> WarpedCloth<F> {
    let (c, h, w) = person.data().dim();
    let mut data = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[[ci, y, x]] = person.data()[[ci, y, x]] * cloth_region[[y, x]];
            }
        }
    }
    WarpedCloth {
        image: ImageTensor::new(data).expect("crop in range"),
        validity: cloth_region.clone(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetItem {
    pub person: PersonSpec,
    pub clothes: Vec<ClothSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub items: Vec<DatasetItem>,
}

/// Per-item seed derived from the dataset seed and the item index, so
/// generation order never matters.
fn item_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 over (seed, index)
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic, seed-keyed dataset of person specs with candidate fake
/// clothes. Postures cycle through canonical, one-hand-on-hip, and
/// raised-arm classes.
pub fn generate_dataset(n: usize, seed: u64) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(RmgnError::InvalidValue("dataset size must be >= 1".into()));
    }
    let skin_palette: [[f64; 3]; 3] = [
        [0.75, 0.45, 0.25],
        [0.55, 0.20, -0.05],
        [0.25, -0.10, -0.35],
    ];
    let bg_palette: [[f64; 3]; 3] = [
        [0.92, 0.92, 0.92],
        [0.80, 0.85, 0.92],
        [0.90, 0.85, 0.78],
    ];
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, i));
        let arm_angles = match i % 3 {
            0 => [rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0)],
            1 => {
                // one hand on hip
                let hip = rng.gen_range(40.0..60.0);
                if rng.gen_bool(0.5) {
                    [hip, rng.gen_range(-10.0..10.0)]
                } else {
                    [rng.gen_range(-10.0..10.0), hip]
                }
            }
            _ => {
                // one raised arm
                let raised = rng.gen_range(75.0..90.0);
                if rng.gen_bool(0.5) {
                    [raised, rng.gen_range(-10.0..10.0)]
                } else {
                    [rng.gen_range(-10.0..10.0), raised]
                }
            }
        };
        let person = PersonSpec {
            seed: rng.gen::<u64>() >> 1, // keep within toml's i64 range
            arm_angles,
            torso_lean: rng.gen_range(-12.0..12.0),
            skin_tone: skin_palette[rng.gen_range(0..skin_palette.len())],
            background_tone: bg_palette[rng.gen_range(0..bg_palette.len())],
            body_scale: rng.gen_range(0.85..1.15),
        };
        let clothes = (0..4).map(|_| random_cloth_spec(&mut rng)).collect();
        items.push(DatasetItem { person, clothes });
    }
    Ok(DatasetManifest { seed, items })
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| RmgnError::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| RmgnError::io(path.display().to_string(), e))
}

pub fn load_manifest(path: impl AsRef<std::path::Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| RmgnError::io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| RmgnError::Config(format!("{}: {e}", path.display())))
}
