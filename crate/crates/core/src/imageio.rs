//! PNG output for inspection and PNG condition images.

use std::fs;
use std::path::Path;

use image::{imageops::FilterType, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gap between tiles, in pixels.
const GAP: u32 = 2;

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Tile sequences `[T, 3, H, W]` in `[-1, 1]` into a PNG, one row each.
pub fn save_grid(rows: &[&Tensor<f32>], path: &Path) -> Result<()> {
    let [_, c, h, w] = match rows.first() {
        Some(r) => r.dims4("save_grid")?,
        None => return Err(Error::shape("save_grid", "no rows")),
    };
    if c != 3 {
        return Err(Error::shape("save_grid", format!("{c} channels, expected 3")));
    }
    let cols = rows.iter().map(|r| r.batch()).max().unwrap_or(0) as u32;
    let (h32, w32) = (h as u32, w as u32);
    let mut img = RgbImage::from_pixel(
        cols * (w32 + GAP) + GAP,
        rows.len() as u32 * (h32 + GAP) + GAP,
        Rgb([255, 255, 255]),
    );
    for (r, seq) in rows.iter().enumerate() {
        let [t, c2, h2, w2] = seq.dims4("save_grid")?;
        if (c2, h2, w2) != (c, h, w) {
            return Err(Error::shape("save_grid", format!("row {r} is {:?}", seq.shape())));
        }
        let d = seq.data();
        for f in 0..t {
            let (x0, y0) = (GAP + f as u32 * (w32 + GAP), GAP + r as u32 * (h32 + GAP));
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| to_byte(d[((f * c + ch) * h + y) * w + x]);
                    img.put_pixel(x0 + x as u32, y0 + y as u32, Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// Read an RGB image as `[3, size, size]` in `[-1, 1]`, resizing if needed.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: other.to_string(),
        },
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let plane = size * size;
    Ok(Tensor::from_fn(&[3, size, size], |i| {
        let (c, p) = (i / plane, i % plane);
        from_byte(rgb.get_pixel((p % size) as u32, (p / size) as u32)[c])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trips_one_frame() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i % 7) as f32 / 3.0 - 1.0).clamp(-1.0, 1.0));
        let path = dir.path().join("g.png");
        save_grid(&[&frame], &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (16 + 2 * GAP, 16 + 2 * GAP));

        // Crop the tile back out and compare at 8-bit precision.
        let tile = image::imageops::crop_imm(&img, GAP, GAP, 16, 16).to_image();
        let tile_path = dir.path().join("t.png");
        tile.save(&tile_path).unwrap();
        let back = load_image(&tile_path, 16).unwrap();
        assert!(back.max_abs_diff(&frame.reshape(&[3, 16, 16]).unwrap()) <= 1.0 / 127.5);
    }

    #[test]
    fn missing_image_names_path() {
        let err = load_image(Path::new("/no/such/cond.png"), 16).unwrap_err();
        assert!(err.to_string().contains("/no/such/cond.png"));
    }
}
