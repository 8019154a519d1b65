//! Heat-map overlays and panel grids for `cam-dump`.

use ar2_core::corrupt::Image;
use ar2_core::imageio::Raster;

/// Jet-like colour ramp: blue, cyan, yellow, red.
fn ramp(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Half-and-half blend of `img` with the colour-mapped `heat` (values in
/// `[0, 1]`, row-major, same size as the image).
pub fn blend(img: &Image, heat: &[f32]) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let color = ramp(heat[y * img.width() + x]);
            for (c, v) in color.iter().enumerate() {
                out.set(y, x, c, 0.5 * img.get(y, x, c) + 0.5 * v);
            }
        }
    }
    out
}

/// Lays equally sized images out in a grid with a 2-pixel white gutter,
/// each magnified `scale` times with nearest-neighbour sampling.
pub fn grid(rows: &[Vec<Image>], scale: usize) -> Raster {
    let scale = scale.max(1);
    let (h, w) = (rows[0][0].height(), rows[0][0].width());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gutter = 2;
    let (cw, ch) = (w * scale + gutter, h * scale + gutter);
    let (width, height) = (cols * cw + gutter, rows.len() * ch + gutter);
    let mut rgb = vec![255u8; width * height * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let bytes = img.to_rgb8();
            for y in 0..h * scale {
                for x in 0..w * scale {
                    let src = ((y / scale) * w + x / scale) * 3;
                    let dst = ((gutter + r * ch + y) * width + gutter + c * cw + x) * 3;
                    rgb[dst..dst + 3].copy_from_slice(&bytes[src..src + 3]);
                }
            }
        }
    }
    Raster::rgb8(width, height, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(ramp(1.0), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn grid_geometry() {
        let img = Image::filled(3, 2, 0.0);
        let raster = grid(&[vec![img.clone(), img.clone()], vec![img]], 2);
        assert_eq!((raster.width, raster.height), (2 * 6 + 2, 2 * 8 + 2));
        assert_eq!(raster.samples[..3], [255, 255, 255]);
        let inside = ((2 * raster.width) + 2) * 3;
        assert_eq!(raster.samples[inside..inside + 3], [0, 0, 0]);
    }
}
