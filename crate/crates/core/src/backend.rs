//! Generation backends. A backend turns a latent into per-token attention at
//! a timestep and proposes the next latent; it must also supply the exact
//! vector-Jacobian product of that map.
//!
//! [`BlobWorld`] is the shipped synthetic backend: each token is an
//! isotropic Gaussian blob described by four latent slots
//! `(center-x, center-y, log-scale, amplitude-logit)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, encode_pgm, AttentionMap, AttentionStack};
use crate::losses::sigmoid;

#[derive(Debug, Error, PartialEq)]
pub enum BackendError {
    #[error("token count must be at least 1")]
    NoTokens,
    #[error("latent has non-finite value at slot {0}")]
    NonFinite(usize),
    #[error("latent length {0} is not a multiple of {1}")]
    Dimension(usize, usize),
    #[error("timestep {t} outside 0..={max}")]
    Timestep { t: usize, max: usize },
}

/// Flat latent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent(pub Vec<f64>);

impl Latent {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self - step * grad`
    pub fn descend(&self, grad: &[f64], step: f64) -> Latent {
        Latent(self.0.iter().zip(grad).map(|(z, g)| z - step * g).collect())
    }

    /// Hex digest of the exact bit pattern.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.0 {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_latent: Latent,
    pub attention: AttentionStack,
}

/// Cotangent of a scalar with respect to a [`StepResult`].
#[derive(Debug, Clone, Default)]
pub struct StepCotangent {
    pub next_latent: Option<Vec<f64>>,
    /// One vector per token map; empty means zero.
    pub attention: Vec<Vec<f64>>,
}

pub trait Backend: Sync {
    fn steps(&self) -> usize;
    fn resolution(&self) -> usize;
    fn init_latent(&self, seed: u64, token_count: usize) -> Result<Latent, BackendError>;
    /// Attention at timestep `t` (0 ≤ t ≤ T) for latent `z`.
    fn attention(&self, z: &Latent, t: usize) -> Result<AttentionStack, BackendError>;
    /// One denoising step (1 ≤ t ≤ T).
    fn step(&self, z: &Latent, t: usize) -> Result<StepResult, BackendError>;
    fn vjp(&self, z: &Latent, t: usize, cotangent: &StepCotangent) -> Result<Vec<f64>, BackendError>;

    /// Gradient through `attention(z, t)` only.
    fn attention_vjp(&self, z: &Latent, t: usize, cotangent: &[Vec<f64>]) -> Result<Vec<f64>, BackendError> {
        self.vjp(
            z,
            t,
            &StepCotangent {
                next_latent: None,
                attention: cotangent.to_vec(),
            },
        )
    }
}

/// How each blob map is rescaled to [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Normalization {
    /// Exact `(x - min) / (max - min)`.
    Exact,
    /// `(x - min) / sqrt((M - min)² + floor²)` where `M` is a log-sum-exp
    /// smooth maximum at `temperature`. The floor keeps weak tokens dim.
    Smooth { temperature: f64, presence_floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobWorldConfig {
    pub resolution: usize,
    pub steps: usize,
    pub normalization: Normalization,
    /// Pixels per latent unit for the center slots, near the grid center.
    pub position_scale: f64,
    /// Centers saturate (tanh) this far inside the outer pixel centers.
    pub edge_margin: f64,
    /// Log-scale per latent unit, near zero.
    pub log_scale_gain: f64,
    /// Log-scale saturates (tanh) at ± this.
    pub scale_range: f64,
    /// Blob standard deviation (pixels, at t = T) for a zero log-scale slot.
    pub base_sigma: f64,
    /// Logit per latent unit for the amplitude slot.
    pub amplitude_gain: f64,
    /// Multiplicative pull of the amplitude slot per step.
    pub commitment: f64,
    /// Initial noise: centers drawn uniformly this far inside the border.
    pub init_margin: f64,
    pub init_log_scale_std: f64,
    pub init_amplitude_mean: f64,
    pub init_amplitude_std: f64,
}

impl Default for BlobWorldConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            steps: 50,
            normalization: Normalization::Smooth {
                temperature: 0.01,
                presence_floor: 0.25,
            },
            position_scale: 1.0,
            edge_margin: 0.5,
            log_scale_gain: 0.01,
            scale_range: 0.2,
            base_sigma: 1.5,
            amplitude_gain: 1.0,
            commitment: 1.02,
            init_margin: 2.0,
            init_log_scale_std: 0.15,
            init_amplitude_mean: 1.0,
            init_amplitude_std: 1.5,
        }
    }
}

impl BlobWorldConfig {
    /// Lists every out-of-range field.
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.resolution < 2 {
            problems.push("resolution must be at least 2".to_string());
        }
        if self.steps < 1 {
            problems.push("steps must be at least 1".to_string());
        }
        if let Normalization::Smooth {
            temperature,
            presence_floor,
        } = self.normalization
        {
            if !pos(temperature) || !(presence_floor.is_finite() && presence_floor >= 0.0) {
                problems.push("smooth normalization needs temperature > 0 and presence_floor >= 0".to_string());
            }
        }
        for (name, v) in [
            ("position_scale", self.position_scale),
            ("log_scale_gain", self.log_scale_gain),
            ("scale_range", self.scale_range),
            ("base_sigma", self.base_sigma),
            ("amplitude_gain", self.amplitude_gain),
            ("commitment", self.commitment),
        ] {
            if !pos(v) {
                problems.push(format!("{name} must be positive"));
            }
        }
        let half = (self.resolution as f64 - 1.0) / 2.0;
        if !(self.edge_margin.is_finite() && self.edge_margin >= 0.0 && self.edge_margin < half) {
            problems.push(format!("edge_margin must lie in [0, {half})"));
        }
        if !(self.init_margin.is_finite() && self.init_margin >= 0.0 && self.init_margin <= half) {
            problems.push(format!("init_margin must lie in [0, {half}]"));
        }
        for (name, v) in [
            ("init_log_scale_std", self.init_log_scale_std),
            ("init_amplitude_std", self.init_amplitude_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.init_amplitude_mean.is_finite() {
            problems.push("init_amplitude_mean must be finite".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

/// Exact blob parameters of one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    /// Standard deviation in pixels at t = T.
    pub scale: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub tokens: Vec<Blob>,
}

#[derive(Debug, Clone, Default)]
pub struct BlobWorld {
    pub config: BlobWorldConfig,
}

pub const SLOTS_PER_TOKEN: usize = 4;

/// Forward intermediates of one token map, kept for the adjoint.
struct BlobForward {
    raw: Vec<f64>,
    gauss: Vec<f64>,
    out: Vec<f64>,
    amplitude: f64,
    cx: f64,
    cy: f64,
    sigma: f64,
    min_at: usize,
    min: f64,
    max: f64,
    denom: f64,
    softmax: Vec<f64>,
}

impl BlobWorld {
    pub fn new(config: BlobWorldConfig) -> Self {
        Self { config }
    }

    fn center(&self) -> f64 {
        (self.config.resolution as f64 - 1.0) / 2.0
    }

    fn time_factor(&self, t: usize) -> f64 {
        0.5 + 0.5 * t as f64 / self.config.steps as f64
    }

    pub fn token_count(&self, z: &Latent) -> Result<usize, BackendError> {
        if !z.len().is_multiple_of(SLOTS_PER_TOKEN) {
            return Err(BackendError::Dimension(z.len(), SLOTS_PER_TOKEN));
        }
        Ok(z.len() / SLOTS_PER_TOKEN)
    }

    fn check(&self, z: &Latent, t: usize) -> Result<usize, BackendError> {
        if t > self.config.steps {
            return Err(BackendError::Timestep {
                t,
                max: self.config.steps,
            });
        }
        if let Some(i) = z.0.iter().position(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite(i));
        }
        self.token_count(z)
    }

    fn reach(&self) -> f64 {
        (self.center() - self.config.edge_margin).max(f64::MIN_POSITIVE)
    }

    /// `bound * tanh(gain * u / bound)` and its derivative in `u`.
    fn squash(u: f64, gain: f64, bound: f64) -> (f64, f64) {
        let th = (gain * u / bound).tanh();
        (bound * th, gain * (1.0 - th * th))
    }

    fn unsquash(v: f64, gain: f64, bound: f64) -> f64 {
        let r = (v / bound).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
        bound * r.atanh() / gain
    }

    pub fn decode_blob(&self, slots: &[f64]) -> Blob {
        let c = &self.config;
        let reach = self.reach();
        Blob {
            x: self.center() + Self::squash(slots[0], c.position_scale, reach).0,
            y: self.center() + Self::squash(slots[1], c.position_scale, reach).0,
            scale: c.base_sigma * Self::squash(slots[2], c.log_scale_gain, c.scale_range).0.exp(),
            amplitude: sigmoid(c.amplitude_gain * slots[3]),
        }
    }

    /// Inverse of [`decode_blob`](Self::decode_blob); values past the
    /// saturation bounds are clamped just inside them.
    pub fn encode_blob(&self, blob: &Blob) -> [f64; 4] {
        let c = &self.config;
        let reach = self.reach();
        let a = blob.amplitude.clamp(1e-12, 1.0 - 1e-12);
        [
            Self::unsquash(blob.x - self.center(), c.position_scale, reach),
            Self::unsquash(blob.y - self.center(), c.position_scale, reach),
            Self::unsquash((blob.scale / c.base_sigma).ln(), c.log_scale_gain, c.scale_range),
            (a / (1.0 - a)).ln() / c.amplitude_gain,
        ]
    }

    pub fn encode(&self, truth: &SceneTruth) -> Latent {
        Latent(truth.tokens.iter().flat_map(|b| self.encode_blob(b)).collect())
    }

    /// Exact blob parameters of every token.
    pub fn ground_truth(&self, z: &Latent) -> Result<SceneTruth, BackendError> {
        self.token_count(z)?;
        Ok(SceneTruth {
            tokens: z.0.chunks(SLOTS_PER_TOKEN).map(|s| self.decode_blob(s)).collect(),
        })
    }

    /// Overrides the amplitude of the given tokens.
    pub fn set_amplitude(&self, z: &mut Latent, token: usize, amplitude: f64) {
        let a = amplitude.clamp(1e-12, 1.0 - 1e-12);
        z.0[token * SLOTS_PER_TOKEN + 3] = (a / (1.0 - a)).ln() / self.config.amplitude_gain;
    }

    fn forward_token(&self, slots: &[f64], t: usize) -> BlobForward {
        let n = self.config.resolution;
        let blob = self.decode_blob(slots);
        let sigma = blob.scale * self.time_factor(t);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut gauss = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let d2 = (c as f64 - blob.x).powi(2) + (r as f64 - blob.y).powi(2);
                gauss.push((-d2 * inv).exp());
            }
        }
        let raw: Vec<f64> = gauss.iter().map(|g| blob.amplitude * g).collect();
        let (min_at, min) = raw
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (p, &v)| if v < best.1 { (p, v) } else { best });
        let (max, denom, softmax) = match self.config.normalization {
            Normalization::Exact => {
                let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (max, max - min, Vec::new())
            }
            Normalization::Smooth {
                temperature,
                presence_floor,
            } => {
                let peak = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = raw.iter().map(|v| ((v - peak) / temperature).exp()).collect();
                let total = attention::compensated_sum(weights.iter().copied());
                let max = peak + temperature * total.ln();
                let softmax = weights.iter().map(|w| w / total).collect();
                let span = max - min;
                (max, (span * span + presence_floor * presence_floor).sqrt(), softmax)
            }
        };
        let out = if denom > 0.0 {
            raw.iter().map(|v| (v - min) / denom).collect()
        } else {
            vec![0.0; raw.len()]
        };
        BlobForward {
            raw,
            gauss,
            out,
            amplitude: blob.amplitude,
            cx: blob.x,
            cy: blob.y,
            sigma,
            min_at,
            min,
            max,
            denom,
            softmax,
        }
    }

    fn backward_token(&self, slots: &[f64], fw: &BlobForward, cot: &[f64], grad: &mut [f64]) {
        if fw.denom <= 0.0 {
            return;
        }
        let n = self.config.resolution;
        let mut raw_bar: Vec<f64> = cot.iter().map(|c| c / fw.denom).collect();
        let sum_cot: f64 = cot.iter().sum();
        let mut min_bar = -sum_cot / fw.denom;
        let denom_bar: f64 = -cot
            .iter()
            .zip(&fw.raw)
            .map(|(c, v)| c * (v - fw.min))
            .sum::<f64>()
            / (fw.denom * fw.denom);
        match self.config.normalization {
            Normalization::Exact => {
                let max_at = fw
                    .raw
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (p, &v)| if v > best.1 { (p, v) } else { best })
                    .0;
                raw_bar[max_at] += denom_bar;
                min_bar -= denom_bar;
            }
            Normalization::Smooth { .. } => {
                let span = fw.max - fw.min;
                let span_bar = denom_bar * span / fw.denom;
                for (rb, w) in raw_bar.iter_mut().zip(&fw.softmax) {
                    *rb += span_bar * w;
                }
                min_bar -= span_bar;
            }
        }
        raw_bar[fw.min_at] += min_bar;

        let c = &self.config;
        let s2 = fw.sigma * fw.sigma;
        let (mut amp_bar, mut cx_bar, mut cy_bar, mut ls_bar) = (0.0, 0.0, 0.0, 0.0);
        for (p, (&rb, &g)) in raw_bar.iter().zip(&fw.gauss).enumerate() {
            if rb == 0.0 {
                continue;
            }
            let (r, col) = ((p / n) as f64, (p % n) as f64);
            let dx = col - fw.cx;
            let dy = r - fw.cy;
            amp_bar += rb * g;
            let gbar = rb * fw.amplitude * g;
            cx_bar += gbar * dx / s2;
            cy_bar += gbar * dy / s2;
            ls_bar += gbar * (dx * dx + dy * dy) / s2;
        }
        let reach = self.reach();
        grad[0] += Self::squash(slots[0], c.position_scale, reach).1 * cx_bar;
        grad[1] += Self::squash(slots[1], c.position_scale, reach).1 * cy_bar;
        grad[2] += Self::squash(slots[2], c.log_scale_gain, c.scale_range).1 * ls_bar;
        grad[3] += c.amplitude_gain * amp_bar * fw.amplitude * (1.0 - fw.amplitude);
    }

    /// Composite image: pixelwise max over token maps, upscaled, as PGM.
    pub fn render(&self, z: &Latent, upscale: usize) -> Result<Vec<u8>, BackendError> {
        let tokens = self.check(z, 0)?;
        let n = self.config.resolution;
        let mut composite = vec![0.0f64; n * n];
        for k in 0..tokens {
            let fw = self.forward_token(&z.0[k * SLOTS_PER_TOKEN..(k + 1) * SLOTS_PER_TOKEN], 0);
            for (c, v) in composite.iter_mut().zip(&fw.raw) {
                *c = c.max(*v);
            }
        }
        let map = crate::attention::upscale(&AttentionMap::from_vec(n, n, composite), upscale);
        Ok(encode_pgm(map.width(), map.height(), map.values()))
    }

    fn commit(&self, z: &Latent) -> Latent {
        let mut next = z.clone();
        for slots in next.0.chunks_mut(SLOTS_PER_TOKEN) {
            slots[3] *= self.config.commitment;
        }
        next
    }
}

impl Backend for BlobWorld {
    fn steps(&self) -> usize {
        self.config.steps
    }

    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn init_latent(&self, seed: u64, token_count: usize) -> Result<Latent, BackendError> {
        if token_count == 0 {
            return Err(BackendError::NoTokens);
        }
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = c.init_margin;
        let hi = c.resolution as f64 - 1.0 - c.init_margin;
        let log_scale = Normal::new(0.0, c.init_log_scale_std).expect("finite std");
        let amp = Normal::new(c.init_amplitude_mean, c.init_amplitude_std).expect("finite std");
        let mut out = Vec::with_capacity(token_count * SLOTS_PER_TOKEN);
        for _ in 0..token_count {
            let blob = Blob {
                x: rng.random_range(lo..=hi),
                y: rng.random_range(lo..=hi),
                scale: c.base_sigma * log_scale.sample(&mut rng).exp(),
                amplitude: sigmoid(amp.sample(&mut rng)),
            };
            out.extend(self.encode_blob(&blob));
        }
        Ok(Latent(out))
    }

    fn attention(&self, z: &Latent, t: usize) -> Result<AttentionStack, BackendError> {
        let tokens = self.check(z, t)?;
        let n = self.config.resolution;
        let maps = (0..tokens)
            .map(|k| {
                let fw = self.forward_token(&z.0[k * SLOTS_PER_TOKEN..(k + 1) * SLOTS_PER_TOKEN], t);
                AttentionMap::from_vec(n, n, fw.out)
            })
            .collect();
        Ok(AttentionStack::new(t, maps))
    }

    fn step(&self, z: &Latent, t: usize) -> Result<StepResult, BackendError> {
        if t == 0 {
            return Err(BackendError::Timestep {
                t,
                max: self.config.steps,
            });
        }
        Ok(StepResult {
            attention: self.attention(z, t)?,
            next_latent: self.commit(z),
        })
    }

    fn vjp(&self, z: &Latent, t: usize, cotangent: &StepCotangent) -> Result<Vec<f64>, BackendError> {
        let tokens = self.check(z, t)?;
        let mut grad = vec![0.0; z.len()];
        if let Some(next) = &cotangent.next_latent {
            for (k, (g, c)) in grad.iter_mut().zip(next).enumerate() {
                *g += if k % SLOTS_PER_TOKEN == 3 {
                    self.config.commitment * c
                } else {
                    *c
                };
            }
        }
        for k in 0..tokens {
            let Some(cot) = cotangent.attention.get(k) else {
                break;
            };
            if cot.is_empty() || cot.iter().all(|c| *c == 0.0) {
                continue;
            }
            let range = k * SLOTS_PER_TOKEN..(k + 1) * SLOTS_PER_TOKEN;
            let fw = self.forward_token(&z.0[range.clone()], t);
            self.backward_token(&z.0[range.clone()], &fw, cot, &mut grad[range]);
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> BlobWorld {
        BlobWorld::default()
    }

    #[test]
    fn init_is_deterministic() {
        let w = world();
        assert_eq!(w.init_latent(7, 3).unwrap(), w.init_latent(7, 3).unwrap());
        assert_ne!(w.init_latent(7, 3).unwrap(), w.init_latent(8, 3).unwrap());
        assert_eq!(w.init_latent(7, 0), Err(BackendError::NoTokens));
    }

    #[test]
    fn point_blob_peaks_at_center() {
        let w = world();
        let z = w.encode(&SceneTruth {
            tokens: vec![Blob {
                x: 8.0,
                y: 8.0,
                scale: 1.0,
                amplitude: 0.9,
            }],
        });
        let a = w.step(&z, 10).unwrap().attention;
        assert_eq!(a.maps[0].argmax(), (8, 8));
    }

    #[test]
    fn vanishing_amplitude_has_no_mass() {
        let w = world();
        let mut z = w.init_latent(1, 1).unwrap();
        w.set_amplitude(&mut z, 0, 1e-9);
        let fw = w.forward_token(z.as_slice(), 25);
        assert!(fw.raw.iter().sum::<f64>() < 1e-7);
    }

    #[test]
    fn sharpening_ratio() {
        let w = world();
        let t_max = w.config.steps;
        let ratio = w.time_factor(t_max) / w.time_factor(1);
        let expected = (0.5 + 0.5) / (0.5 + 0.5 / t_max as f64);
        assert!((ratio - expected).abs() < 1e-15);
    }

    #[test]
    fn truth_round_trip() {
        let w = world();
        let truth = SceneTruth {
            tokens: vec![
                Blob {
                    x: 3.25,
                    y: 11.0,
                    scale: 1.3,
                    amplitude: 0.75,
                },
                Blob {
                    x: 9.0,
                    y: 2.5,
                    scale: 1.7,
                    amplitude: 0.2,
                },
            ],
        };
        let back = w.ground_truth(&w.encode(&truth)).unwrap();
        for (a, b) in truth.tokens.iter().zip(&back.tokens) {
            assert!((a.x - b.x).abs() < 1e-12);
            assert!((a.y - b.y).abs() < 1e-12);
            assert!((a.scale - b.scale).abs() < 1e-12);
            assert!((a.amplitude - b.amplitude).abs() < 1e-12);
        }
        let mut half = w.encode(&truth);
        half.0[3] = 0.0;
        assert_eq!(w.ground_truth(&half).unwrap().tokens[0].amplitude, 0.5);
        assert_eq!(
            w.ground_truth(&Latent(vec![0.0; 5])),
            Err(BackendError::Dimension(5, 4))
        );
    }

    #[test]
    fn non_finite_is_rejected() {
        let w = world();
        let mut z = w.init_latent(1, 2).unwrap();
        z.0[5] = f64::NAN;
        assert_eq!(w.step(&z, 3), Err(BackendError::NonFinite(5)));
        assert!(w.render(&z, 2).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let w = world();
        let z = w.init_latent(3, 2).unwrap();
        let g = w
            .vjp(
                &z,
                20,
                &StepCotangent {
                    next_latent: Some(vec![0.0; 8]),
                    attention: vec![vec![0.0; 256]; 2],
                },
            )
            .unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_token_cotangent_is_separable() {
        let w = world();
        let z = w.init_latent(4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cot: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = w.attention_vjp(&z, 30, &[vec![], cot, vec![]]).unwrap();
        for (k, v) in g.iter().enumerate() {
            if (4..8).contains(&k) {
                assert!(v.abs() > 0.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    fn contract(w: &BlobWorld, z: &Latent, t: usize, cot: &[Vec<f64>], next: &[f64]) -> f64 {
        let r = w.step(z, t).unwrap();
        let a: f64 = r
            .attention
            .maps
            .iter()
            .zip(cot)
            .map(|(m, c)| m.values().iter().zip(c).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        a + r.next_latent.0.iter().zip(next).map(|(x, y)| x * y).sum::<f64>()
    }

    #[test]
    fn vjp_matches_central_differences() {
        for norm in [
            Normalization::Exact,
            BlobWorldConfig::default().normalization,
        ] {
            let w = BlobWorld::new(BlobWorldConfig {
                normalization: norm,
                ..Default::default()
            });
            for seed in 0..5 {
                let z = w.init_latent(seed, 3).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let cot: Vec<Vec<f64>> = (0..3)
                    .map(|_| (0..256).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                let next: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g = w
                    .vjp(
                        &z,
                        17,
                        &StepCotangent {
                            next_latent: Some(next.clone()),
                            attention: cot.clone(),
                        },
                    )
                    .unwrap();
                let h = 1e-4;
                for (i, &gi) in g.iter().enumerate() {
                    let mut zp = z.clone();
                    zp.0[i] += h;
                    let mut zm = z.clone();
                    zm.0[i] -= h;
                    let d = (contract(&w, &zp, 17, &cot, &next) - contract(&w, &zm, 17, &cot, &next)) / (2.0 * h);
                    let rel = (gi - d).abs() / gi.abs().max(d.abs()).max(1e-8);
                    assert!(rel < 1e-4, "{norm:?} seed {seed} slot {i}: {gi} vs {d}");
                }
            }
        }
    }

    #[test]
    fn render_examples() {
        let w = world();
        let blob = |x, y, amplitude| Blob {
            x,
            y,
            scale: 1.0,
            amplitude,
        };
        let one = w.render(&w.encode(&SceneTruth { tokens: vec![blob(5.0, 5.0, 0.99)] }), 1).unwrap();
        let header = b"P5\n16 16\n255\n".len();
        let bright = one[header..].iter().filter(|&&v| v > 128).count();
        assert!((1..20).contains(&bright));

        let dark = w.render(&w.encode(&SceneTruth { tokens: vec![blob(5.0, 5.0, 1e-6)] }), 1).unwrap();
        assert!(dark[header..].iter().all(|&v| v == 0));

        let two = w
            .render(
                &w.encode(&SceneTruth {
                    tokens: vec![blob(3.0, 8.0, 0.99), blob(12.0, 8.0, 0.99)],
                }),
                1,
            )
            .unwrap();
        let row: Vec<u8> = two[header + 8 * 16..header + 9 * 16].to_vec();
        let maxima: Vec<usize> = (1..15)
            .filter(|&c| row[c] > row[c - 1] && row[c] >= row[c + 1])
            .collect();
        assert_eq!(maxima, vec![3, 12]);
    }

    #[test]
    fn config_validation() {
        assert_eq!(BlobWorldConfig::default().validate(), Ok(()));
        let bad = BlobWorldConfig {
            resolution: 1,
            base_sigma: 0.0,
            normalization: Normalization::Smooth {
                temperature: 0.0,
                presence_floor: 0.25,
            },
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err();
        assert!(msg.contains("resolution") && msg.contains("base_sigma") && msg.contains("temperature"), "{msg}");
        let margin = BlobWorldConfig {
            edge_margin: 7.5,
            ..Default::default()
        };
        assert!(margin.validate().unwrap_err().contains("edge_margin"));
    }
}
