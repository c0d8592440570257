//! Bottleneck-activation heatmaps, a blue–yellow–red colormap and overlays.

use std::path::{Path, PathBuf};

use crate::data::pnm::Pnm;
use crate::error::{Error, Result};
use crate::model::DilatedSegNet;
use crate::tensor::kernels::resize_bilinear_forward;
use crate::tensor::{Execution, Shape, Tensor};

/// Default overlay weight of the heatmap colours.
pub const OVERLAY_ALPHA: f32 = 0.4;

/// Colormap stops: cold blue, yellow, hot red.
pub const STOPS: [(f32, [f32; 3]); 3] = [
    (0.0, [0.0, 0.0, 255.0]),
    (0.5, [255.0, 255.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

/// Channel-mean of |activation| upsampled to (h, w) and min–max normalised.
/// A constant map yields zeros.
pub fn heatmap_from_activation(act: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = act.shape();
    let mut map = vec![0f32; s.h * s.w];
    for j in 0..s.c {
        for (m, &v) in map.iter_mut().zip(act.plane(0, j)) {
            *m += v.abs();
        }
    }
    let inv = 1.0 / s.c as f32;
    map.iter_mut().for_each(|m| *m *= inv);
    let small = Tensor::new(Shape::new(1, 1, s.h, s.w), map)?;
    let (up, _) = resize_bilinear_forward(&small, h, w, Execution::Sequential)?;
    let (lo, hi) = up.min_max();
    let range = hi - lo;
    Ok(if range > 0.0 {
        up.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
    } else {
        Tensor::zeros(up.shape())
    })
}

/// Heatmap of the bottleneck activation for a (1, 3, h, w) image.
pub fn bottleneck_heatmap(model: &DilatedSegNet, image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    let pred = model.predict_full(image, Execution::default())?;
    heatmap_from_activation(&pred.bottleneck.sample(0), s.h, s.w)
}

/// Piecewise-linear colour of `v ∈ [0, 1]`, rounded half up.
pub fn color(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let (a, b) = if v <= STOPS[1].0 { (STOPS[0], STOPS[1]) } else { (STOPS[1], STOPS[2]) };
    let t = (v - a.0) / (b.0 - a.0);
    let mut out = [0u8; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let c = a.1[k] + t * (b.1[k] - a.1[k]);
        *o = (c + 0.5).floor().clamp(0.0, 255.0) as u8;
    }
    out
}

/// RGB rendering of a (1, 1, h, w) heatmap.
pub fn colormap(heat: &Tensor) -> Pnm {
    let s = heat.shape();
    let data = heat.plane(0, 0).iter().flat_map(|&v| color(v)).collect();
    Pnm::new(s.w, s.h, 3, data)
}

/// `(1 − alpha)·image + alpha·heat`, per byte, rounded half up.
pub fn overlay(image: &Pnm, heat: &Pnm, alpha: f32) -> Result<Pnm> {
    if (image.width, image.height, image.channels) != (heat.width, heat.height, heat.channels) {
        return Err(Error::dim(
            "overlay",
            format!(
                "image {}x{}x{} vs heat {}x{}x{}",
                image.width, image.height, image.channels, heat.width, heat.height, heat.channels
            ),
        ));
    }
    let data = image
        .data
        .iter()
        .zip(&heat.data)
        .map(|(&a, &b)| {
            let v = (1.0 - alpha) * f32::from(a) + alpha * f32::from(b);
            (v + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(Pnm::new(image.width, image.height, image.channels, data))
}

/// Writes `<id>_heat.ppm` and `<id>_overlay.ppm` into `out_dir`.
pub fn write_heatmaps(
    model: &DilatedSegNet,
    image: &Tensor,
    id: &str,
    out_dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let heat = colormap(&bottleneck_heatmap(model, image)?);
    let over = overlay(&Pnm::from_tensor(image), &heat, OVERLAY_ALPHA)?;
    let heat_path = dir.join(format!("{id}_heat.ppm"));
    let over_path = dir.join(format!("{id}_overlay.ppm"));
    heat.write(&heat_path)?;
    over.write(&over_path)?;
    Ok((heat_path, over_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_stops() {
        assert_eq!(color(0.0), [0, 0, 255]);
        assert_eq!(color(0.5), [255, 255, 0]);
        assert_eq!(color(1.0), [255, 0, 0]);
        assert_eq!(color(0.25), [128, 128, 128]);
    }

    #[test]
    fn constant_activation_gives_zeros() {
        let act = Tensor::full(Shape::new(1, 4, 2, 2), 3.0f32);
        let h = heatmap_from_activation(&act, 64, 64).unwrap();
        assert_eq!(h.shape(), Shape::new(1, 1, 64, 64));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalised_range() {
        let act = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, j, y, x| (j + y * 2 + x) as f32 - 1.5);
        let h = heatmap_from_activation(&act, 8, 8).unwrap();
        assert_eq!(h.min_max(), (0.0, 1.0));
    }

    #[test]
    fn overlay_blends() {
        let img = Pnm::new(1, 1, 3, vec![128, 128, 128]);
        let heat = Pnm::new(1, 1, 3, vec![0, 0, 255]);
        assert_eq!(overlay(&img, &heat, 0.0).unwrap(), img);
        assert_eq!(overlay(&img, &heat, 1.0).unwrap(), heat);
        assert_eq!(overlay(&img, &heat, 0.5).unwrap().data, vec![64, 64, 192]);
    }
}
