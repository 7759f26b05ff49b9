//! Binary PPM (P6) export.

use zoo_core::numerics::Tensor;
use zoo_core::Result;

/// Encodes an `H×W×C` image in `[0, 1]` as 8-bit P6. One channel is
/// replicated to gray; three are written as RGB; other counts are rejected.
pub fn to_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.dims3()?;
    if c != 1 && c != 3 {
        return Err(zoo_core::Error::InvalidArgument(format!("PPM needs 1 or 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for px in img.data().chunks(c) {
        for k in 0..3 {
            let v = px[if c == 1 { 0 } else { k }];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// `0.5 + Δx` clamped, so unchanged pixels show as mid gray.
pub fn noise_image(adversarial: &Tensor, original: &Tensor) -> Result<Tensor> {
    Ok(adversarial.sub(original)?.map(|d| (0.5 + d).clamp(0.0, 1.0)))
}
