//! Binary PPM (P6, 8-bit) images. Pixel value `p` maps to `p / 127.5 - 1`.

use std::path::Path;

use crate::error::{HscError, Result};
use crate::numerics::Tensor;

pub fn to_ppm(x: &Tensor) -> Result<Vec<u8>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(HscError::Image(format!(
            "expected a (3, H, W) image, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = x.data();
    for i in 0..h * w {
        for c in 0..3 {
            let v = ((d[c * h * w + i] + 1.0) * 127.5).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    Ok(out)
}

fn header_token(data: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && data[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&data[start..*pos])
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| HscError::Image(format!("malformed PPM header at byte {start}")))
}

pub fn from_ppm(data: &[u8]) -> Result<Tensor> {
    if data.len() < 2 || &data[..2] != b"P6" {
        return Err(HscError::Image("not a binary PPM (P6) file".into()));
    }
    let mut pos = 2;
    let w = header_token(data, &mut pos)?;
    let h = header_token(data, &mut pos)?;
    let max = header_token(data, &mut pos)?;
    if max != 255 || w == 0 || h == 0 {
        return Err(HscError::Image(format!(
            "unsupported PPM {w}x{h} with maxval {max}"
        )));
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(HscError::Image("PPM header not terminated".into()));
    }
    pos += 1;
    let pixels = &data[pos..];
    if pixels.len() != 3 * w * h {
        return Err(HscError::Image(format!(
            "PPM body has {} bytes, expected {}",
            pixels.len(),
            3 * w * h
        )));
    }
    let mut out = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            out[c * w * h + i] = pixels[3 * i + c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], out)
}

pub fn write_ppm(path: &Path, x: &Tensor) -> Result<()> {
    std::fs::write(path, to_ppm(x)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    from_ppm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn quantized_images_round_trip_exactly() {
        let mut rng = RngState::new(1);
        let x = Tensor::new(
            vec![3, 5, 7],
            (0..105)
                .map(|_| rng.below(256) as f64 / 127.5 - 1.0)
                .collect(),
        )
        .unwrap();
        let bytes = to_ppm(&x).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(from_ppm(&bytes).unwrap(), x);
    }

    #[test]
    fn comments_and_bad_files() {
        let mut f = b"P6 # comment\n2 1\n255\n".to_vec();
        f.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let x = from_ppm(&f).unwrap();
        assert_eq!(x.data()[0], 1.0);
        assert_eq!(x.data()[5], 1.0);
        assert!(from_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(from_ppm(b"P6\n2 2\n255\n\0\0").is_err());
        assert!(from_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(to_ppm(&Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
