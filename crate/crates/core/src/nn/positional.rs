use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal position table `[len, width]`.
///
/// Column pair `(2i, 2i+1)` holds `sin`/`cos` of `pos / 10000^(2i/width)`,
/// so wavelengths run geometrically from `2π` to `10000·2π`. Rows depend only
/// on their own position, which makes longer tables extensions of shorter ones.
pub fn positional_encoding(len: usize, width: usize) -> Result<Tensor> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(Error::config(format!("positional encoding width {width} must be even and positive")));
    }
    if len == 0 {
        return Err(Error::usage("positional encoding of zero length"));
    }
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
            data[pos * width + 2 * i] = angle.sin();
            data[pos * width + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, width], data)
}
