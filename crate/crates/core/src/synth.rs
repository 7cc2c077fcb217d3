//! Procedural scenes on the sphere: a clean pinhole source domain and a
//! style-shifted equirectangular target domain sharing one label space.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::pseudo::PseudoLabel;
use crate::sphere::{angular_distance, col_lon, gnomonic_view, row_lat, ErpKind, ErpTensor};
use crate::tensor::Tensor;

pub const SKY: u16 = 0;
pub const GROUND: u16 = 1;
pub const MIDDLE: u16 = 2;

/// Base colour of each of the eight default classes.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.55, 0.75, 0.95],
    [0.35, 0.35, 0.38],
    [0.70, 0.55, 0.45],
    [0.20, 0.55, 0.20],
    [0.15, 0.20, 0.60],
    [0.85, 0.20, 0.25],
    [0.90, 0.85, 0.30],
    [0.60, 0.30, 0.70],
];

/// A disc on the sphere painted with one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Cap {
    pub class: u16,
    pub lat: f64,
    pub lon: f64,
    pub radius: f64,
}

/// Photometric transform: per-channel gain and bias, gamma, additive noise.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleParams {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
    pub gamma: f32,
    pub noise: f32,
    pub noise_seed: u64,
}

impl StyleParams {
    pub fn identity() -> Self {
        Self {
            gain: [1.0; 3],
            bias: [0.0; 3],
            gamma: 1.0,
            noise: 0.0,
            noise_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gain == [1.0; 3] && self.bias == [0.0; 3] && self.gamma == 1.0 && self.noise == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.iter().any(|g| !(0.6..=1.4).contains(g)) {
            return Err(invalid(format!("gains {:?} outside [0.6, 1.4]", self.gain)));
        }
        if self.bias.iter().any(|b| !(-0.3..=0.3).contains(b)) {
            return Err(invalid(format!("biases {:?} outside [-0.3, 0.3]", self.bias)));
        }
        if !(0.7..=1.3).contains(&self.gamma) {
            return Err(invalid(format!("gamma {} outside [0.7, 1.3]", self.gamma)));
        }
        if !(0.0..=0.05).contains(&self.noise) {
            return Err(invalid(format!("noise amplitude {} outside [0, 0.05]", self.noise)));
        }
        Ok(())
    }

    /// Target-domain style: a fixed camera shift plus small per-scene jitter.
    pub fn target(seed: u64, jitter: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a26_e7f1);
        let mut j = |s: f32| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
        let gain = [1.3 + j(jitter), 0.95 + j(jitter), 0.7 + j(jitter)];
        let bias = [0.05 + j(jitter), -0.05 + j(jitter), 0.12 + j(jitter)];
        let gamma = 0.8 + j(jitter);
        Self {
            gain: gain.map(|g| g.clamp(0.6, 1.4)),
            bias: bias.map(|b| b.clamp(-0.3, 0.3)),
            gamma: gamma.clamp(0.7, 1.3),
            noise: 0.03,
            noise_seed: seed,
        }
    }
}

/// `clamp(gain x + bias)`, then `x^gamma`, then noise, clamped to `[0, 1]`.
pub fn apply_domain_shift(image: &Tensor, style: &StyleParams) -> Result<Tensor> {
    style.validate()?;
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(invalid(format!("style shift expects (3, H, W), got {:?}", image.shape())));
    }
    if style.is_identity() {
        return Ok(image.clone());
    }
    let plane = image.dim(1) * image.dim(2);
    let mut rng = ChaCha8Rng::seed_from_u64(style.noise_seed);
    let normal = Normal::new(0.0f32, style.noise.max(f32::MIN_POSITIVE)).expect("valid std");
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i / plane;
        let mut x = (style.gain[ch] * *v + style.bias[ch]).clamp(0.0, 1.0);
        x = x.powf(style.gamma);
        if style.noise > 0.0 {
            x += normal.sample(&mut rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Everything needed to render one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub classes: usize,
    pub palette: Vec<[f32; 3]>,
    /// Latitude above which the sky band starts, radians.
    pub sky_lat: f64,
    /// Latitude below which the ground band starts, radians.
    pub ground_lat: f64,
    /// Amplitude and phase of the horizon undulation.
    pub wave: (f64, f64),
    pub caps: Vec<Cap>,
    pub style: StyleParams,
}

impl SceneSpec {
    /// Random layout with clean style.
    pub fn random(seed: u64, classes: usize) -> Result<Self> {
        if classes < 4 || classes > PALETTE.len() {
            return Err(invalid(format!("scene generator supports 4..=8 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_caps = rng.random_range(4..=12);
        let caps = (0..n_caps)
            .map(|_| Cap {
                class: rng.random_range(3..classes as u16),
                lat: rng.random_range(-0.6..0.6f64),
                lon: rng.random_range(-PI..PI),
                radius: rng.random_range(8.0f64..25.0).to_radians(),
            })
            .collect();
        let jitter = |rng: &mut ChaCha8Rng, c: [f32; 3]| c.map(|v| (v + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0));
        let palette = PALETTE[..classes].iter().map(|&c| jitter(&mut rng, c)).collect();
        Ok(Self {
            seed,
            classes,
            palette,
            sky_lat: rng.random_range(15.0f64..35.0).to_radians(),
            ground_lat: -rng.random_range(15.0f64..35.0).to_radians(),
            wave: (rng.random_range(0.0f64..8.0).to_radians(), rng.random_range(0.0..2.0 * PI)),
            caps,
            style: StyleParams::identity(),
        })
    }

    pub fn with_style(mut self, style: StyleParams) -> Self {
        self.style = style;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.palette.len() != self.classes || self.classes < 3 {
            return Err(invalid("palette must hold one colour per class, with at least three classes"));
        }
        if self.sky_lat <= self.ground_lat + 2.0 * self.wave.0 {
            return Err(invalid("sky and ground bands leave no middle band"));
        }
        if let Some(c) = self.caps.iter().find(|c| c.class as usize >= self.classes) {
            return Err(invalid(format!("cap class {} not below the class count {}", c.class, self.classes)));
        }
        self.style.validate()
    }

    /// Class at a direction.
    pub fn class_at(&self, lat: f64, lon: f64) -> u16 {
        for cap in self.caps.iter().rev() {
            if angular_distance(lat, lon, cap.lat, cap.lon) < cap.radius {
                return cap.class;
            }
        }
        let wave = self.wave.0 * (3.0 * lon + self.wave.1).sin();
        if lat > self.sky_lat + wave {
            SKY
        } else if lat < self.ground_lat + wave {
            GROUND
        } else {
            MIDDLE
        }
    }

    /// Clean colour at a direction: palette colour modulated by a
    /// class-specific texture.
    pub fn color_at(&self, lat: f64, lon: f64) -> (u16, [f32; 3]) {
        let class = self.class_at(lat, lon);
        let base = self.palette[class as usize];
        let freq = 4.0 + 3.0 * class as f64;
        let phase = (self.seed % 97) as f64 * 0.1;
        let t = match class % 3 {
            0 => (freq * lon + phase).sin(),
            1 => (freq * lat + phase).sin(),
            _ => (freq * (lat + lon) + phase).sin() * (freq * (lat - lon)).cos(),
        };
        let amp = 0.08 + 0.01 * class as f64;
        let color = base.map(|c| (c as f64 * (1.0 + amp * t)).clamp(0.0, 1.0) as f32);
        (class, color)
    }
}

fn render_clean(spec: &SceneSpec, h: usize, w: usize) -> (Tensor, PseudoLabel) {
    let plane = h * w;
    let mut img = vec![0f32; 3 * plane];
    let mut labels = vec![0u16; plane];
    for i in 0..h {
        let lat = row_lat(i, h);
        for j in 0..w {
            let (class, color) = spec.color_at(lat, col_lon(j, w));
            let p = i * w + j;
            labels[p] = class;
            for ch in 0..3 {
                img[ch * plane + p] = color[ch];
            }
        }
    }
    (
        Tensor::new(vec![3, h, w], img).expect("image buffer sized to its shape"),
        PseudoLabel::new(h, w, spec.classes, labels).expect("labels drawn from the palette"),
    )
}

/// Renders an `h x 2h` panorama with the scene's style and its clean labels.
pub fn gen_panorama(spec: &SceneSpec, h: usize, w: usize) -> Result<(ErpTensor, PseudoLabel)> {
    if w != 2 * h || h == 0 {
        return Err(invalid(format!("panorama must be H x 2H, got {h}x{w}")));
    }
    spec.validate()?;
    let (img, labels) = render_clean(spec, h, w);
    let mut distinct = labels.data.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(invalid(format!("scene {} renders fewer than three classes", spec.seed)));
    }
    let img = apply_domain_shift(&img, &spec.style)?;
    Ok((ErpTensor::new(img, ErpKind::Image)?, labels))
}

/// Pinhole crops of the clean panorama at random view directions.
pub fn gen_pinhole_source(
    spec: &SceneSpec,
    n_views: usize,
    fov_deg: f64,
    crop: usize,
    seed: u64,
) -> Result<Vec<(Tensor, PseudoLabel)>> {
    let clean = spec.clone().with_style(StyleParams::identity());
    // match the panorama's angular resolution to the crop's
    let mut h = ((crop as f64 * 180.0 / fov_deg).ceil() as usize).max(8);
    h += h % 2;
    let (pano, labels) = gen_panorama(&clean, h, 2 * h)?;
    let label_erp = labels.to_tensor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_views)
        .map(|_| {
            let lat = rng.random_range(-20.0f64..20.0).to_radians();
            let lon = rng.random_range(-PI..PI);
            pinhole_crop(pano.tensor(), &label_erp, spec.classes, lat, lon, fov_deg, crop)
        })
        .collect()
}

/// Gnomonic crop of an image and its label map about `(lat, lon)`.
pub fn pinhole_crop(
    image: &Tensor,
    labels: &Tensor,
    classes: usize,
    lat: f64,
    lon: f64,
    fov_deg: f64,
    crop: usize,
) -> Result<(Tensor, PseudoLabel)> {
    let img = gnomonic_view(image, lat, lon, fov_deg, crop, crop, false)?;
    let lab = gnomonic_view(labels, lat, lon, fov_deg, crop, crop, true)?;
    let data = lab.data().iter().map(|&v| v as u16).collect();
    Ok((img, PseudoLabel::new(crop, crop, classes, data)?))
}

/// One unlabeled-for-training target panorama with its held-out labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSample {
    pub image: Tensor,
    pub clean: Tensor,
    pub labels: PseudoLabel,
}

/// Sizes and counts of a synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub source_scenes: usize,
    pub views_per_scene: usize,
    pub crop: usize,
    pub pinhole_fov_deg: f64,
    pub target_train: usize,
    pub target_test: usize,
    pub target_h: usize,
    pub style_jitter: f32,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            source_scenes: 200,
            views_per_scene: 1,
            crop: 128,
            pinhole_fov_deg: 70.0,
            target_train: 100,
            target_test: 20,
            target_h: 256,
            style_jitter: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source: Vec<(Tensor, PseudoLabel)>,
    pub source_holdout: Vec<(Tensor, PseudoLabel)>,
    pub target_train: Vec<TargetSample>,
    pub target_test: Vec<TargetSample>,
}

fn target_sample(cfg: &BenchmarkConfig, scene_seed: u64) -> Result<TargetSample> {
    let spec = SceneSpec::random(scene_seed, cfg.classes)?;
    let (clean, labels) = gen_panorama(&spec, cfg.target_h, 2 * cfg.target_h)?;
    let image = apply_domain_shift(clean.tensor(), &StyleParams::target(scene_seed, cfg.style_jitter))?;
    Ok(TargetSample {
        image,
        clean: clean.into_tensor(),
        labels,
    })
}

/// Generates source crops (with a 10% hold-out) and target panoramas.
pub fn gen_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    let mut source = Vec::new();
    for s in 0..cfg.source_scenes {
        let scene_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(s as u64);
        let spec = SceneSpec::random(scene_seed, cfg.classes)?;
        source.extend(gen_pinhole_source(
            &spec,
            cfg.views_per_scene,
            cfg.pinhole_fov_deg,
            cfg.crop,
            scene_seed ^ 0xc0ffee,
        )?);
    }
    let holdout = (source.len() / 10).max(1).min(source.len());
    let source_holdout = source.split_off(source.len() - holdout);
    let base = cfg.seed.wrapping_mul(1_000_003).wrapping_add(10_000_000);
    let target_train = (0..cfg.target_train)
        .map(|i| target_sample(cfg, base + i as u64))
        .collect::<Result<_>>()?;
    let target_test = (0..cfg.target_test)
        .map(|i| target_sample(cfg, base + 5_000_000 + i as u64))
        .collect::<Result<_>>()?;
    Ok(Benchmark {
        source,
        source_holdout,
        target_train,
        target_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_style_is_noop() {
        let img = Tensor::from_fn(&[3, 4, 8], |i| (i % 10) as f32 / 10.0);
        assert_eq!(apply_domain_shift(&img, &StyleParams::identity()).unwrap(), img);
        let mut bad = StyleParams::identity();
        bad.gain[1] = 2.0;
        assert!(apply_domain_shift(&img, &bad).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::random(3, 8).unwrap().with_style(StyleParams::target(3, 0.05));
        let a = gen_panorama(&spec, 16, 32).unwrap();
        let b = gen_panorama(&spec, 16, 32).unwrap();
        assert_eq!(a, b);
        assert!(a.1.data.iter().all(|&l| l < 8));
    }

    #[test]
    fn degenerate_scene_rejected() {
        let mut spec = SceneSpec::random(1, 8).unwrap();
        spec.sky_lat = -0.5;
        spec.ground_lat = 0.5;
        assert!(gen_panorama(&spec, 16, 32).is_err());
        assert!(gen_panorama(&SceneSpec::random(1, 8).unwrap(), 16, 30).is_err());
    }
}
