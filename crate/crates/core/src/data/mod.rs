//! Datasets: synthetic generation, PPM/PGM IO, resizing and splits.

pub mod pnm;
pub mod split;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::kernels::{resize_bilinear_forward, resize_nearest};
use crate::tensor::{par_map, Execution, Tensor};

pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm, Pnm};
pub use split::{split, Split, SplitSpec};
pub use synth::{synth_generate, Ellipse, SynthConfig};

/// An image in `[0, 1]` with its binary mask.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    /// (1, 3, h, w).
    pub image: Tensor,
    /// (1, 1, h, w), values in {0, 1}.
    pub mask: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Half-pixel resize; nearest keeps binary masks binary.
pub fn resize(t: &Tensor, h: usize, w: usize, mode: ResizeMode) -> Result<Tensor> {
    let s = t.shape();
    if (s.h, s.w) == (h, w) {
        return Ok(t.clone());
    }
    match mode {
        ResizeMode::Bilinear => Ok(resize_bilinear_forward(t, h, w, Execution::Sequential)?.0),
        ResizeMode::Nearest => {
            if h == 0 || w == 0 || s.h == 0 || s.w == 0 {
                return Err(Error::dim("resize", format!("{s} -> {h}x{w}")));
            }
            Ok(resize_nearest(t, h, w))
        }
    }
}

/// Ids listed one per line; blank lines are ignored.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn write_manifest(ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads one pair from `dir/images/<id>.ppm` and `dir/masks/<id>.pgm`.
pub fn load_pair(dir: impl AsRef<Path>, id: &str, size: (usize, usize)) -> Result<SamplePair> {
    let dir = dir.as_ref();
    let image_path = dir.join("images").join(format!("{id}.ppm"));
    let mask_path = dir.join("masks").join(format!("{id}.pgm"));
    for p in [&image_path, &mask_path] {
        if !p.is_file() {
            return Err(Error::Dataset(format!("sample `{id}`: missing {}", p.display())));
        }
    }
    let image = read_ppm(&image_path)?;
    let mask = read_pgm(&mask_path)?;
    if (image.shape().h, image.shape().w) != (mask.shape().h, mask.shape().w) {
        return Err(Error::Dataset(format!(
            "sample `{id}`: image {} and mask {} differ in size",
            image.shape(),
            mask.shape()
        )));
    }
    let image = resize(&image, size.0, size.1, ResizeMode::Bilinear)?;
    let mask = resize(&mask, size.0, size.1, ResizeMode::Nearest)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    Ok(SamplePair {
        id: id.to_owned(),
        image,
        mask,
    })
}

/// Loads `ids` (or every id in `dir/manifest.txt` when `None`) resized to `size`.
pub fn load_dataset(dir: impl AsRef<Path>, ids: Option<&[String]>, size: (usize, usize)) -> Result<Vec<SamplePair>> {
    let dir = dir.as_ref();
    let owned;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            owned = read_manifest(dir.join("manifest.txt"))?;
            &owned
        }
    };
    par_map(ids, |id| load_pair(dir, id, size)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn resize_shapes_and_binarity() {
        let img = Tensor::full(Shape::new(1, 3, 16, 16), 0.3f32);
        let r = resize(&img, 8, 8, ResizeMode::Bilinear).unwrap();
        assert_eq!(r.shape(), Shape::new(1, 3, 8, 8));
        assert!(r.data().iter().all(|&v| v == 0.3));
        let mask = Tensor::from_fn(Shape::new(1, 1, 7, 5), |_, _, y, x| ((x + y) % 2) as f32);
        let m = resize(&mask, 12, 9, ResizeMode::Nearest).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
