use super::{Annotation, DataError, Image};

/// Bilinear sample of the pixel-space rectangle `[x0,x1)×[y0,y1)` onto an
/// `out_size` square. Source coordinates are clamped to the pixel grid.
fn sample_rect(image: &Image, x0: f64, y0: f64, x1: f64, y1: f64, out_size: usize) -> Image {
    let mut out = Image::new(out_size, out_size);
    let sx = (x1 - x0) / out_size as f64;
    let sy = (y1 - y0) / out_size as f64;
    let max_x = (image.width - 1) as f64;
    let max_y = (image.height - 1) as f64;
    for oy in 0..out_size {
        let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let iy = fy.floor() as usize;
        let iy1 = (iy + 1).min(image.height - 1);
        let ty = fy - iy as f64;
        for ox in 0..out_size {
            let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let ix = fx.floor() as usize;
            let ix1 = (ix + 1).min(image.width - 1);
            let tx = fx - ix as f64;
            for c in 0..3 {
                let p = |y, x| image.get(c, y, x) as f64;
                let top = p(iy, ix) * (1.0 - tx) + p(iy, ix1) * tx;
                let bottom = p(iy1, ix) * (1.0 - tx) + p(iy1, ix1) * tx;
                let v = top * (1.0 - ty) + bottom * ty;
                out.set(c, oy, ox, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Bilinear resize of a whole image.
pub fn resize(image: &Image, out_size: usize) -> Image {
    sample_rect(
        image,
        0.0,
        0.0,
        image.width as f64,
        image.height as f64,
        out_size,
    )
}

/// Clamps the box to the image, crops it and resizes to `out_size²`.
pub fn crop_resize(image: &Image, ann: &Annotation, out_size: usize) -> Result<Image, DataError> {
    let (w, h) = (image.width as f64, image.height as f64);
    let (x0, y0, x1, y1) = ann.corners();
    let (x0, x1) = ((x0 * w).clamp(0.0, w), (x1 * w).clamp(0.0, w));
    let (y0, y1) = ((y0 * h).clamp(0.0, h), (y1 * h).clamp(0.0, h));
    if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
        return Err(DataError::EmptyCrop);
    }
    Ok(sample_rect(image, x0, y0, x1, y1, out_size))
}
