//! Synthetic image families with per-client domain shift.
//!
//! A bank of smooth class prototypes is generated once from the dataset seed.
//! Every client renders its examples from the same bank through its own
//! [`ShiftParams`]: a rotation, a per-channel affine intensity change and
//! additive Gaussian noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ClientDataset, DataSource};
use crate::error::{FamError, Result};
use crate::rng::{derive_seed, rng_for, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftParams {
    pub rotation_deg: f64,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise: f64,
}

impl ShiftParams {
    pub fn identity(channels: usize) -> Self {
        ShiftParams {
            rotation_deg: 0.0,
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(FamError::Config("intensity scale must be positive".into()));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(FamError::Config("noise scale must be nonnegative".into()));
        }
        if self.scale.len() != self.offset.len() {
            return Err(FamError::Config("scale and offset need one entry per channel".into()));
        }
        Ok(())
    }

    /// Draws a client shift. `spread = 0` gives the identity shift with
    /// `base_noise`; larger spreads widen every component proportionally.
    pub fn draw(spread: f64, channels: usize, base_noise: f64, max_rotation_deg: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut shift = ShiftParams::identity(channels);
        shift.noise = base_noise;
        if spread <= 0.0 {
            return shift;
        }
        shift.rotation_deg = rng.gen_range(-1.0..1.0) * spread * max_rotation_deg;
        for c in 0..channels {
            shift.scale[c] = (rng.gen_range(-1.0..1.0) * spread * 0.5f64).exp();
            shift.offset[c] = rng.gen_range(-1.0..1.0) * spread * 0.3;
        }
        shift.noise = base_noise * (1.0 + spread * rng.gen_range(0.0..1.0));
        shift
    }
}

/// Generation parameters of a synthetic client population.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    pub family: String,
    pub classes: usize,
    pub examples_per_class: usize,
    pub image_shape: Vec<usize>,
    pub shift_spread: f64,
    pub seed: u64,
    /// Amplitude of the per-example smooth deformation.
    pub intra_class: f64,
    pub base_noise: f64,
    pub max_rotation_deg: f64,
}

impl SyntheticParams {
    /// Two classes ("healthy" / "sick") on 1×12×12 images.
    pub fn mri_like(seed: u64) -> Self {
        SyntheticParams {
            family: "mri-like".into(),
            classes: 2,
            examples_per_class: 60,
            image_shape: vec![1, 12, 12],
            shift_spread: 1.0,
            seed,
            intra_class: 1.0,
            base_noise: 0.5,
            max_rotation_deg: 180.0,
        }
    }

    /// Ten classes on 1×12×12 images, for 5-way episodes.
    pub fn cifar_like(seed: u64) -> Self {
        SyntheticParams {
            family: "cifar-like".into(),
            classes: 10,
            ..Self::mri_like(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "mri-like" => Ok(Self::mri_like(seed)),
            "cifar-like" => Ok(Self::cifar_like(seed)),
            other => Err(FamError::Config(format!("unknown synthetic family `{other}`"))),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.classes == 2 && self.family == "mri-like" {
            vec!["healthy".into(), "sick".into()]
        } else {
            (0..self.classes).map(|c| format!("class{c:02}")).collect()
        }
    }
}

/// Class prototypes shared by all clients of a population.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBank {
    pub shape: Vec<usize>,
    pub prototypes: Vec<Tensor>,
    pub intra_class: f64,
}

impl SyntheticBank {
    pub fn generate(classes: usize, shape: &[usize], intra_class: f64, seed: u64) -> Result<Self> {
        if classes == 0 || shape.len() != 3 || shape.contains(&0) {
            return Err(FamError::Config(format!(
                "synthetic bank needs classes > 0 and a [C, H, W] shape, got {classes} and {shape:?}"
            )));
        }
        let mut rng = rng_for(seed, &[tag::BANK]);
        let prototypes = (0..classes)
            .map(|_| {
                let mut field = smooth_field(shape, 4, &mut rng);
                normalize_unit(&mut field, shape);
                Tensor::from_vec(shape, field)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticBank {
            shape: shape.to_vec(),
            prototypes,
            intra_class,
        })
    }

    /// Renders one example of `class` under `shift`; all randomness comes from
    /// `example_seed`.
    pub fn render(&self, class: usize, example_seed: u64, shift: &ShiftParams) -> Tensor {
        let mut rng = rng_for(example_seed, &[tag::EXAMPLE]);
        let proto = &self.prototypes[class];
        let mut img: Vec<f64> = proto.data().to_vec();
        if self.intra_class > 0.0 {
            let field = smooth_field(&self.shape, 2, &mut rng);
            for (v, d) in img.iter_mut().zip(field) {
                *v += self.intra_class * d;
            }
        }
        let mut img = rotate(&img, &self.shape, shift.rotation_deg);
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        for ch in 0..c {
            for v in &mut img[ch * h * w..(ch + 1) * h * w] {
                *v = *v * shift.scale[ch] + shift.offset[ch];
            }
        }
        if shift.noise > 0.0 {
            for v in &mut img {
                let z: f64 = rng.sample(StandardNormal);
                *v += shift.noise * z;
            }
        }
        Tensor::from_vec(&self.shape, img).expect("bank shape")
    }
}

/// Sum of `blobs` random Gaussian bumps per channel with signed amplitudes.
fn smooth_field(shape: &[usize], blobs: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let extent = h.max(w) as f64;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..blobs {
            let amp: f64 = rng.gen_range(-1.0..1.0);
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let sigma = rng.gen_range(0.12..0.3) * extent;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    out[ch * h * w + y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    out
}

fn normalize_unit(field: &mut [f64], shape: &[usize]) {
    let plane = shape[1] * shape[2];
    for ch in field.chunks_mut(plane) {
        let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in ch.iter_mut() {
            *v = (*v - lo) / span;
        }
    }
}

/// Counter-clockwise rotation about the image center with nearest-neighbour
/// sampling; pixels mapped from outside the frame are 0.
fn rotate(img: &[f64], shape: &[usize], degrees: f64) -> Vec<f64> {
    if degrees == 0.0 {
        return img.to_vec();
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (s, co) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (cx + co * dx + s * dy).round();
            let sy = (cy - s * dx + co * dy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for ch in 0..c {
                out[ch * h * w + y * w + x] = img[ch * h * w + sy * w + sx];
            }
        }
    }
    out
}

/// Renders one dataset per shift from a shared bank.
pub fn make_clients_with_shifts(
    bank: &SyntheticBank,
    family: &str,
    class_names: &[String],
    shifts: &[ShiftParams],
    examples_per_class: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if examples_per_class == 0 {
        return Err(FamError::Config("examples_per_class must be positive".into()));
    }
    shifts.iter().enumerate().map(|(id, shift)| {
        shift.validate()?;
        if shift.scale.len() != bank.shape[0] {
            return Err(FamError::Config("shift channel count differs from the bank".into()));
        }
        let examples = (0..bank.prototypes.len())
            .map(|c| {
                (0..examples_per_class)
                    .map(|j| {
                        let s = derive_seed(seed, &[tag::EXAMPLE, id as u64, c as u64, j as u64]);
                        bank.render(c, s, shift)
                    })
                    .collect()
            })
            .collect();
        Ok(ClientDataset {
            client_id: id,
            source: DataSource::Synthetic {
                family: family.to_string(),
                shift: shift.clone(),
                seed,
            },
            class_names: class_names.to_vec(),
            examples,
            input_shape: bank.shape.clone(),
        })
    })
    .collect()
}

/// Builds `n_clients` datasets sharing one prototype bank, each with its own
/// shift drawn from `params.shift_spread`.
pub fn make_synthetic_clients(params: &SyntheticParams, n_clients: usize) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 || params.classes == 0 || params.examples_per_class == 0 {
        return Err(FamError::Config("synthetic client counts must be positive".into()));
    }
    let bank = SyntheticBank::generate(params.classes, &params.image_shape, params.intra_class, params.seed)?;
    let channels = params.image_shape[0];
    let shifts: Vec<ShiftParams> = (0..n_clients)
        .map(|i| {
            let mut rng = rng_for(params.seed, &[tag::SHIFT, i as u64]);
            ShiftParams::draw(params.shift_spread, channels, params.base_noise, params.max_rotation_deg, &mut rng)
        })
        .collect();
    make_clients_with_shifts(
        &bank,
        &params.family,
        &params.class_names(),
        &shifts,
        params.examples_per_class,
        params.seed,
    )
}
