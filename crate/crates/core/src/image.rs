//! Binary PPM (P6) output. Values in `[-1, 1]` map linearly to `0..=255`;
//! grayscale is replicated to three channels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `floor((v + 1) * 127.5 + 0.5)`, clamped to a byte.
pub fn quantize(v: f64) -> u8 {
    let q = ((v + 1.0) * 127.5 + 0.5).floor();
    if q.is_nan() {
        0
    } else {
        q.clamp(0.0, 255.0) as u8
    }
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::Shape(format!("expected [H, W, C], got {:?}", img.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("PPM needs 1 or 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for px in img.data().chunks_exact(c) {
        if c == 1 {
            out.extend([quantize(px[0]); 3]);
        } else {
            out.extend(px.iter().map(|&v| quantize(v)));
        }
    }
    Ok(out)
}

pub fn write_image(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::Format("PPM header is not ASCII".into()))
}

/// Parses a P6 file back into `[H, W, 3]` dequantized values.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != "P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let mut num = || -> Result<usize> {
        header_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::Format("bad PPM header number".into()))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(Error::Format(format!("unsupported maxval {max}")));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        return Err(Error::Format(format!(
            "expected {} pixel bytes, found {}",
            w * h * 3,
            body.len()
        )));
    }
    Tensor::new(vec![h, w, 3], body.iter().map(|&b| dequantize(b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_value_pixel() {
        let img = Tensor::new(vec![1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[..], b"P6\n1 1\n255\n\x00\x80\xff");
    }

    #[test]
    fn header_and_grayscale() {
        let img = Tensor::new(vec![2, 2, 1], vec![-1.0, 1.0, 0.5, 2.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(&bytes[11..], &[0, 0, 0, 255, 255, 255, 191, 191, 191, 255, 255, 255]);
        assert!(encode_ppm(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn roundtrip_recovers_quantized_values() {
        let vals: Vec<f64> = (0..48).map(|i| (i as f64 / 47.0) * 2.0 - 1.0).collect();
        let img = Tensor::new(vec![4, 4, 3], vals).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let back = parse_ppm(&bytes).unwrap();
        let expect = img.map(|v| dequantize(quantize(v)));
        assert_eq!(back, expect);
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn file_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Tensor::zeros(&[3, 5, 1]);
        write_image(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(parse_ppm(&bytes).unwrap().shape(), &[3, 5, 3]);
    }
}
