use std::io::Write;
use std::path::Path;

use crate::error::{DicError, Result};
use crate::tensor::Tensor;

/// Writes a `[c, h, w]` image in `[-1, 1]` as binary PPM. One channel is
/// written as gray; otherwise the first three channels become RGB.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let [c, h, w] = match img.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(DicError::shape("write_ppm", format!("expected [c, h, w], got {s:?}"))),
    };
    if c == 0 {
        return Err(DicError::shape("write_ppm", "image has no channels"));
    }
    let to_byte = |v: f32| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8;
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..3 {
            let src = if c >= 3 { ch } else { 0 };
            out.push(to_byte(img.data()[src * plane + p]));
        }
    }
    std::fs::write(path, out).map_err(|e| DicError::io(path, e))
}

/// Raw little-endian f32 values, no header.
pub fn write_raw_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| DicError::io(path, e))?);
    for v in t.data() {
        f.write_all(&v.to_le_bytes()).map_err(|e| DicError::io(path, e))?;
    }
    f.flush().map_err(|e| DicError::io(path, e))
}
