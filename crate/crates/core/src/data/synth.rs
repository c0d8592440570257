//! Synthetic polyp-like images: a smooth noisy background with one to three
//! filled, textured ellipses whose union forms the mask.

use std::f64::consts::PI;
use std::path::Path;

use super::pnm::Pnm;
use super::SamplePair;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{par_map, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    /// (h, w).
    pub size: (usize, usize),
    /// Inclusive range of ellipses per image.
    pub blobs: (usize, usize),
    /// Semi-axis range as a fraction of `min(h, w)`.
    pub radius: (f64, f64),
    /// Standard deviation of the smoothed background noise.
    pub noise: f64,
    /// Box-blur radius applied to the background noise, in pixels.
    pub smoothing: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 200,
            size: (64, 64),
            blobs: (1, 3),
            radius: (0.08, 0.3),
            noise: 0.05,
            smoothing: 2,
            seed: 42,
        }
    }
}

/// One ellipse: centre in pixel coordinates, semi-axes in pixels, rotation in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    /// Half-widths of the axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let ey = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (ex, ey)
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        if self.count == 0 || h == 0 || w == 0 {
            return bad("count and size must be positive");
        }
        if self.blobs.0 == 0 || self.blobs.0 > self.blobs.1 {
            return bad("blob range must satisfy 1 <= lo <= hi");
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad("radius range must satisfy 0 < lo <= hi <= 0.5");
        }
        if lo * (h.min(w) as f64) < 1.0 {
            return bad("smallest radius is below one pixel, masks could be empty");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }

    /// Identifier of sample `i`.
    pub fn id(&self, i: usize) -> String {
        let digits = self.count.saturating_sub(1).to_string().len().max(4);
        format!("synth_{i:0digits$}")
    }

    /// The ellipses of sample `i`.
    pub fn ellipses(&self, i: usize) -> Vec<Ellipse> {
        self.layout(&mut Rng::with_stream(self.seed, i as u64))
    }

    fn layout(&self, rng: &mut Rng) -> Vec<Ellipse> {
        let (h, w) = self.size;
        let m = h.min(w) as f64;
        let n = rng.int_in(self.blobs.0, self.blobs.1);
        (0..n)
            .map(|_| {
                let a = rng.uniform_in(self.radius.0, self.radius.1) * m;
                let b = rng.uniform_in(self.radius.0, self.radius.1) * m;
                let theta = rng.uniform_in(0.0, PI);
                let mut e = Ellipse {
                    cx: 0.0,
                    cy: 0.0,
                    a,
                    b,
                    theta,
                };
                let (ex, ey) = e.half_extents();
                e.cx = rng.uniform_in(ex, w as f64 - ex);
                e.cy = rng.uniform_in(ey, h as f64 - ey);
                e
            })
            .collect()
    }

    /// Generates sample `i` in memory; independent of every other sample.
    pub fn sample(&self, i: usize) -> SamplePair {
        let (h, w) = self.size;
        let mut rng = Rng::with_stream(self.seed, i as u64);
        let ellipses = self.layout(&mut rng);

        let base = [rng.uniform_in(0.45, 0.65), rng.uniform_in(0.2, 0.35), rng.uniform_in(0.2, 0.35)];
        let blob = [
            (base[0] + rng.uniform_in(0.2, 0.3)).min(0.95),
            base[1] + rng.uniform_in(0.15, 0.25),
            base[2] + rng.uniform_in(0.0, 0.1),
        ];
        let freq = rng.uniform_in(0.3, 0.8);
        let phase = rng.uniform_in(0.0, 2.0 * PI);
        let amp = self.noise * (2 * self.smoothing + 1) as f64;
        let noise: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let raw: Vec<f64> = (0..h * w).map(|_| rng.normal() * amp).collect();
                box_blur(&raw, h, w, self.smoothing)
            })
            .collect();

        let mut mask = vec![0f32; h * w];
        let mut image = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = ellipses.iter().any(|e| e.contains(px, py));
                let k = y * w + x;
                let texture = 0.04 * ((px * freq + phase).sin() * (py * freq).cos());
                for j in 0..3 {
                    let v = if inside { blob[j] + texture } else { base[j] } + noise[j][k];
                    image[j * h * w + k] = v.clamp(0.0, 1.0) as f32;
                }
                mask[k] = if inside { 1.0 } else { 0.0 };
            }
        }
        let image = Tensor::new(Shape::new(1, 3, h, w), image).expect("sized buffer");
        // Quantise so the in-memory sample equals what a file round trip yields.
        let image = Pnm::from_tensor(&image).to_tensor();
        SamplePair {
            id: self.id(i),
            image,
            mask: Tensor::new(Shape::new(1, 1, h, w), mask).expect("sized buffer"),
        }
    }

    /// All samples in id order.
    pub fn samples(&self) -> Vec<SamplePair> {
        let idx: Vec<usize> = (0..self.count).collect();
        par_map(&idx, |&i| self.sample(i))
    }
}

/// Separable box blur with edge clamping.
fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let norm = (2 * r + 1) as f64;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| src[y * w + clamp(x as isize + d, w)])
                .sum();
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-(r as isize)..=r as isize)
                .map(|d| tmp[clamp(y as isize + d, h) * w + x])
                .sum();
            out[y * w + x] = s / norm;
        }
    }
    out
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and `manifest.txt` under
/// `out_dir`, returning the ids in manifest order.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Vec<String>> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let idx: Vec<usize> = (0..cfg.count).collect();
    let written = par_map(&idx, |&i| -> Result<String> {
        let s = cfg.sample(i);
        Pnm::from_tensor(&s.image).write(out.join("images").join(format!("{}.ppm", s.id)))?;
        Pnm::from_tensor(&s.mask).write(out.join("masks").join(format!("{}.pgm", s.id)))?;
        Ok(s.id)
    });
    let ids = written.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = out.join("manifest.txt");
    let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipses_lie_inside_the_image() {
        let cfg = SynthConfig::default();
        for i in 0..50 {
            for e in cfg.ellipses(i) {
                let (ex, ey) = e.half_extents();
                assert!(e.cx - ex >= 0.0 && e.cx + ex <= 64.0);
                assert!(e.cy - ey >= 0.0 && e.cy + ey <= 64.0);
            }
        }
    }

    #[test]
    fn samples_are_order_independent() {
        let cfg = SynthConfig {
            count: 5,
            ..SynthConfig::default()
        };
        let all = cfg.samples();
        let third = cfg.sample(3);
        assert!(all[3].image.bits_eq(&third.image));
        assert!(all[3].mask.bits_eq(&third.mask));
        assert_eq!(third.id, "synth_0003");
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut cfg = SynthConfig {
            radius: (0.0, 0.3),
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.radius = (0.01, 0.3);
        assert!(cfg.validate().is_err());
        cfg.radius = (0.08, 0.6);
        assert!(cfg.validate().is_err());
    }
}
