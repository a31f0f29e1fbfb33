//! Core value types shared by every other module: images in `[-1, 1]`
//! channel-major layout, warped cloth with sampling validity, dense flow
//! fields, regional masks, fake triplets, and loss weights.

use crate::error::{Result, RmgnError};
use crate::scalar::Scalar;
use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3};
use std::path::Path;

/// Real-valued `[C, H, W]` image with entries in `[-1, 1]`.
///
/// Houses reference persons, clothes, generator outputs, and teacher
/// composites alike. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F: Scalar> {
    data: Array3<F>,
}

impl<F: Scalar> ImageTensor<F> {
    /// Validates channel count, finiteness, and the `[-1, 1]` range.
    pub fn new(data: Array3<F>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(RmgnError::shape("C in {1, 3}", format!("C = {c}")));
        }
        if h == 0 || w == 0 {
            return Err(RmgnError::shape("H, W > 0", format!("{h}x{w}")));
        }
        let one = F::one();
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(RmgnError::InvalidValue("non-finite image entry".into()));
            }
            if v > one || v < -one {
                return Err(RmgnError::InvalidValue(format!(
                    "image entry {v} outside [-1, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }
}

/// Deformed cloth plus the fraction of in-bounds bilinear taps per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedCloth<F: Scalar> {
    pub image: ImageTensor<F>,
    /// `[H, W]` in `[0, 1]`; exactly 1 where all four source taps landed
    /// in bounds.
    pub validity: Array2<F>,
}

/// Dense per-pixel offset field at one pyramid scale, units of pixels at
/// that scale. Layout `[2, h, w]` with channel 0 = x offset, 1 = y offset.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<F: Scalar> {
    pub offsets: Array3<F>,
    /// 1-based scale index, coarse to fine.
    pub scale_index: usize,
}

impl<F: Scalar> FlowField<F> {
    pub fn new(offsets: Array3<F>, scale_index: usize) -> Result<Self> {
        let (c, _, _) = offsets.dim();
        if c != 2 {
            return Err(RmgnError::shape("[2, h, w] flow", format!("C = {c}")));
        }
        if offsets.iter().any(|v| !v.is_finite()) {
            return Err(RmgnError::InvalidValue("non-finite flow entry".into()));
        }
        Ok(Self {
            offsets,
            scale_index,
        })
    }

    pub fn zeros(h: usize, w: usize, scale_index: usize) -> Self {
        Self {
            offsets: Array3::zeros((2, h, w)),
            scale_index,
        }
    }
}

/// Learned fusion selector `[1, h, w]`, every entry strictly in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalMask<F: Scalar> {
    values: Array3<F>,
}

impl<F: Scalar> RegionalMask<F> {
    pub fn new(values: Array3<F>) -> Result<Self> {
        let (c, _, _) = values.dim();
        if c != 1 {
            return Err(RmgnError::shape("[1, h, w] mask", format!("C = {c}")));
        }
        for &v in values.iter() {
            if !(v > F::zero() && v < F::one()) {
                return Err(RmgnError::InvalidValue(format!(
                    "mask entry {v} not strictly in (0, 1)"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<F> {
        &self.values
    }
}

/// Supervision unit of the cyclic parser-free training: a teacher-composited
/// fake person, the target cloth, and the real person as ground truth.
#[derive(Debug, Clone)]
pub struct FakeTriplet<F: Scalar> {
    pub fake_person: ImageTensor<F>,
    pub target_cloth: ImageTensor<F>,
    pub real_person: ImageTensor<F>,
    /// `[H, W]` binary mask of the worn-cloth pixels (synthetic-data extra).
    pub gt_cloth_mask: Array2<F>,
}

impl<F: Scalar> FakeTriplet<F> {
    pub fn new(
        fake_person: ImageTensor<F>,
        target_cloth: ImageTensor<F>,
        real_person: ImageTensor<F>,
        gt_cloth_mask: Array2<F>,
    ) -> Result<Self> {
        if !fake_person.same_size(&real_person) || !fake_person.same_size(&target_cloth) {
            return Err(RmgnError::shape(
                "matching H, W across triplet",
                "mismatched images",
            ));
        }
        if gt_cloth_mask
            .iter()
            .any(|&v| v != F::zero() && v != F::one())
        {
            return Err(RmgnError::InvalidValue(
                "gt_cloth_mask must be binary".into(),
            ));
        }
        Ok(Self {
            fake_person,
            target_cloth,
            real_person,
            gt_cloth_mask,
        })
    }
}

/// Weights of the warp and generator loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<F: Scalar> {
    pub lambda_f: F,
    pub lambda_sec: F,
    pub lambda_d: F,
    pub lambda_p: F,
}

impl<F: Scalar> LossWeights<F> {
    pub fn new(lambda_f: F, lambda_sec: F, lambda_d: F, lambda_p: F) -> Result<Self> {
        for v in [lambda_f, lambda_sec, lambda_d, lambda_p] {
            if !(v.is_finite() && v >= F::zero()) {
                return Err(RmgnError::InvalidValue(format!(
                    "loss weight {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(Self {
            lambda_f,
            lambda_sec,
            lambda_d,
            lambda_p,
        })
    }
}

impl<F: Scalar> Default for LossWeights<F> {
    fn default() -> Self {
        Self {
            lambda_f: F::cast(1.0),
            lambda_sec: F::cast(0.01),
            lambda_d: F::cast(0.25),
            lambda_p: F::cast(0.2),
        }
    }
}

fn byte_to_unit<F: Scalar>(b: u8) -> F {
    // linear map [0, 255] -> [-1, 1]
    F::cast(2.0 * b as f64 / 255.0 - 1.0)
}

fn unit_to_byte<F: Scalar>(v: F) -> u8 {
    let x = (v.to_f64_() + 1.0) / 2.0 * 255.0;
    x.round().clamp(0.0, 255.0) as u8
}

/// Loads an 8-bit RGB or grayscale PNG, mapping `[0, 255]` to `[-1, 1]`.
pub fn load_image<F: Scalar>(path: impl AsRef<Path>) -> Result<ImageTensor<F>> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| RmgnError::io(path.display().to_string(), e))?;
    let img = reader.decode().map_err(|e| RmgnError::Decode {
        path: path.display().to_string(),
        source: e,
    })?;
    let tensor = match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let mut data = Array3::zeros((1, h, w));
            for (x, y, p) in g.enumerate_pixels() {
                data[[0, y as usize, x as usize]] = byte_to_unit(p.0[0]);
            }
            data
        }
        DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut data = Array3::zeros((3, h, w));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[[c, y as usize, x as usize]] = byte_to_unit(p.0[c]);
                }
            }
            data
        }
        other => {
            return Err(RmgnError::InvalidValue(format!(
                "unsupported pixel format {:?} in {}; expected 8-bit RGB or grayscale",
                other.color(),
                path.display()
            )))
        }
    };
    ImageTensor::new(tensor)
}

/// Writes the tensor back to an 8-bit PNG; inverse of [`load_image`] up to
/// `1/255` quantization per channel.
pub fn save_image<F: Scalar>(t: &ImageTensor<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = t.data().dim();
    let res = if c == 1 {
        let mut img = GrayImage::new(w as u32, h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            p.0[0] = unit_to_byte(t.data()[[0, y as usize, x as usize]]);
        }
        img.save(path)
    } else {
        let mut img = RgbImage::new(w as u32, h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            for ch in 0..3 {
                p.0[ch] = unit_to_byte(t.data()[[ch, y as usize, x as usize]]);
            }
        }
        img.save(path)
    };
    res.map_err(|e| RmgnError::Encode {
        path: path.display().to_string(),
        source: e,
    })
}

/// Exports a `[1, h, w]` map in `[0, 1]` as an 8-bit grayscale PNG
/// (0 -> 0.0, 255 -> 1.0).
pub fn save_mask<F: Scalar>(values: &Array3<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (_, h, w) = values.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let v = values[[0, y as usize, x as usize]].to_f64_();
        p.0[0] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    img.save(path).map_err(|e| RmgnError::Encode {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads a grayscale PNG written by [`save_mask`] back into `[0, 1]`.
pub fn load_mask<F: Scalar>(path: impl AsRef<Path>) -> Result<Array3<F>> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| RmgnError::io(path.display().to_string(), e))?;
    let img = reader
        .decode()
        .map_err(|e| RmgnError::Decode {
            path: path.display().to_string(),
            source: e,
        })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut values = Array3::zeros((1, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        values[[0, y as usize, x as usize]] = F::cast(p.0[0] as f64 / 255.0);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    #[test]
    fn black_png_loads_as_minus_one() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("black.png");
        let img = RgbImage::new(4, 4);
        img.save(&p).unwrap();
        let t: ImageTensor<f64> = load_image(&p).unwrap();
        assert!(t.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn white_png_loads_as_plus_one() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("white.png");
        let img = RgbImage::from_pixel(4, 4, image::Rgb([255, 255, 255]));
        img.save(&p).unwrap();
        let t: ImageTensor<f64> = load_image(&p).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mid_pixel_value() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("mid.png");
        let img = GrayImage::from_pixel(2, 2, image::Luma([128]));
        img.save(&p).unwrap();
        let t: ImageTensor<f64> = load_image(&p).unwrap();
        let expected = 2.0 * 128.0 / 255.0 - 1.0;
        assert!((t.data()[[0, 0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn round_trip_quantization_bound_and_idempotence() {
        let dir = tempdir().unwrap();
        let mut data = Array3::<f64>::zeros((3, 4, 4));
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i as f64) * 0.37).sin();
        }
        let t = ImageTensor::new(data).unwrap();
        let p1 = dir.path().join("a.png");
        save_image(&t, &p1).unwrap();
        let t1: ImageTensor<f64> = load_image(&p1).unwrap();
        let max_diff = t
            .data()
            .iter()
            .zip(t1.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1.0 / 255.0 + 1e-9, "max diff {max_diff}");

        // second round trip is bit-identical to the first
        let p2 = dir.path().join("b.png");
        save_image(&t1, &p2).unwrap();
        let t2: ImageTensor<f64> = load_image(&p2).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn zeros_tensor_saves_as_mid_gray() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("gray.png");
        let t = ImageTensor::new(Array3::<f64>::zeros((1, 2, 2))).unwrap();
        save_image(&t, &p).unwrap();
        let img = image::open(&p).unwrap().into_luma8();
        let v = img.get_pixel(0, 0).0[0];
        assert!(v == 127 || v == 128, "got {v}");
    }

    #[test]
    fn out_of_range_tensor_rejected() {
        let mut data = Array3::<f64>::zeros((1, 2, 2));
        data[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn nan_rejected_everywhere() {
        let mut data = Array3::<f64>::zeros((3, 2, 2));
        data[[0, 1, 1]] = f64::NAN;
        assert!(ImageTensor::new(data).is_err());

        let mut flow = Array3::<f64>::zeros((2, 2, 2));
        flow[[1, 0, 0]] = f64::INFINITY;
        assert!(FlowField::new(flow, 1).is_err());
    }

    #[test]
    fn mask_range_strict() {
        let values = Array3::<f64>::from_elem((1, 2, 2), 0.5);
        assert!(RegionalMask::new(values).is_ok());
        let values = Array3::<f64>::from_elem((1, 2, 2), 1.0);
        assert!(RegionalMask::new(values).is_err());
        let values = Array3::<f64>::from_elem((1, 2, 2), 0.0);
        assert!(RegionalMask::new(values).is_err());
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(load_image::<f64>("/nonexistent/nope.png").is_err());
    }

    #[test]
    fn negative_loss_weight_rejected() {
        assert!(LossWeights::new(1.0, -0.1, 0.0, 0.0).is_err());
    }
}
