//! Paired image/mask augmentation: flips, rotation and coarse dropout.

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    pub dropout: bool,
    /// Probability of applying each enabled transform.
    pub prob: f64,
    pub max_angle_deg: f64,
    pub max_holes: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            vflip: true,
            rotate: true,
            dropout: true,
            prob: 0.5,
            max_angle_deg: 30.0,
            max_holes: 8,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hflip: false,
            vflip: false,
            rotate: false,
            dropout: false,
            ..Self::default()
        }
    }

    pub fn any(&self) -> bool {
        self.hflip || self.vflip || self.rotate || self.dropout
    }
}

pub fn hflip(t: &Tensor) -> Tensor {
    let w = t.shape().w;
    Tensor::from_fn(t.shape(), |i, j, y, x| t.get(i, j, y, w - 1 - x))
}

pub fn vflip(t: &Tensor) -> Tensor {
    let h = t.shape().h;
    Tensor::from_fn(t.shape(), |i, j, y, x| t.get(i, j, h - 1 - y, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Rotation by `angle` radians about the image centre; samples falling
/// outside the source read zero.
pub fn rotate(t: &Tensor, angle: f64, interp: Interp) -> Tensor {
    let s = t.shape();
    let (cx, cy) = ((s.w as f64 - 1.0) / 2.0, (s.h as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let read = |i: usize, j: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
            0.0
        } else {
            f64::from(t.get(i, j, y as usize, x as usize))
        }
    };
    Tensor::from_fn(s, |i, j, y, x| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let v = match interp {
            Interp::Nearest => read(i, j, sy.round() as isize, sx.round() as isize),
            Interp::Bilinear => {
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let top = read(i, j, y0, x0) * (1.0 - fx) + read(i, j, y0, x0 + 1) * fx;
                let bottom = read(i, j, y0 + 1, x0) * (1.0 - fx) + read(i, j, y0 + 1, x0 + 1) * fx;
                top * (1.0 - fy) + bottom * fy
            }
        };
        v as f32
    })
}

/// Axis-aligned hole: top, left, height, width.
pub type Hole = (usize, usize, usize, usize);

/// Draws 1..=`max_holes` rectangles no larger than (h/8) × (w/8).
pub fn draw_holes(h: usize, w: usize, max_holes: usize, rng: &mut Rng) -> Vec<Hole> {
    let (mh, mw) = ((h / 8).max(1), (w / 8).max(1));
    let n = rng.int_in(1, max_holes.max(1));
    (0..n)
        .map(|_| {
            let hh = rng.int_in(1, mh);
            let ww = rng.int_in(1, mw);
            (rng.int_in(0, h - hh), rng.int_in(0, w - ww), hh, ww)
        })
        .collect()
}

pub fn coarse_dropout(t: &Tensor, holes: &[Hole]) -> Tensor {
    let inside = |y: usize, x: usize| {
        holes
            .iter()
            .any(|&(top, left, hh, ww)| (top..top + hh).contains(&y) && (left..left + ww).contains(&x))
    };
    Tensor::from_fn(t.shape(), |i, j, y, x| if inside(y, x) { 0.0 } else { t.get(i, j, y, x) })
}

/// Applies each enabled transform independently with probability `cfg.prob`.
/// Geometric transforms act on both tensors; dropout touches the image only.
pub fn augment(image: &Tensor, mask: &Tensor, rng: &mut Rng, cfg: &AugmentConfig) -> (Tensor, Tensor) {
    let (mut img, mut msk) = (image.clone(), mask.clone());
    if cfg.hflip && rng.coin(cfg.prob) {
        img = hflip(&img);
        msk = hflip(&msk);
    }
    if cfg.vflip && rng.coin(cfg.prob) {
        img = vflip(&img);
        msk = vflip(&msk);
    }
    if cfg.rotate && rng.coin(cfg.prob) {
        let angle = rng.uniform_in(-cfg.max_angle_deg, cfg.max_angle_deg).to_radians();
        img = rotate(&img, angle, Interp::Bilinear);
        msk = rotate(&msk, angle, Interp::Nearest);
    }
    if cfg.dropout && rng.coin(cfg.prob) {
        let s = img.shape();
        let holes = draw_holes(s.h, s.w, cfg.max_holes, rng);
        img = coarse_dropout(&img, &holes);
    }
    (img, msk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn ramp(c: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, c, 6, 5), |_, j, y, x| (j * 30 + y * 5 + x) as f32 / 100.0)
    }

    #[test]
    fn flips_are_involutions() {
        let t = ramp(3);
        assert!(hflip(&hflip(&t)).bits_eq(&t));
        assert!(vflip(&vflip(&t)).bits_eq(&t));
        assert!(!hflip(&t).bits_eq(&t));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let t = ramp(3);
        assert!(rotate(&t, 0.0, Interp::Bilinear).max_abs_diff(&t) < 1e-6);
        assert!(rotate(&t, 0.0, Interp::Nearest).bits_eq(&t));
    }

    #[test]
    fn dropout_holes_are_bounded() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let holes = draw_holes(64, 64, 8, &mut rng);
            assert!((1..=8).contains(&holes.len()));
            for (t, l, h, w) in holes {
                assert!(h <= 8 && w <= 8 && t + h <= 64 && l + w <= 64);
            }
        }
    }

    #[test]
    fn mask_stays_binary_and_dropout_spares_it() {
        let mask = Tensor::from_fn(Shape::new(1, 1, 32, 32), |_, _, y, x| ((x / 4 + y / 4) % 2) as f32);
        let img = Tensor::full(Shape::new(1, 3, 32, 32), 0.5f32);
        let cfg = AugmentConfig {
            prob: 1.0,
            ..AugmentConfig::default()
        };
        let (_, m) = augment(&img, &mask, &mut Rng::new(9), &cfg);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));

        let only_dropout = AugmentConfig {
            hflip: false,
            vflip: false,
            rotate: false,
            prob: 1.0,
            ..AugmentConfig::default()
        };
        let (i, m) = augment(&img, &mask, &mut Rng::new(9), &only_dropout);
        assert!(m.bits_eq(&mask));
        assert!(i.data().contains(&0.0));
    }
}
