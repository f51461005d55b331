//! Binary PPM (P6, maxval 255) images stored as `[3, H, W]` tensors in `[0, 1]`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use fsc_tensor::Tensor;

use crate::error::{CoreError, Result};

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value onto the 8-bit grid so files round-trip exactly.
pub fn quantize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| to_u8(v) as f32 / 255.0)
}

pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = img.shape() else {
        return Err(CoreError::Shape(format!("PPM needs [3, H, W], got {:?}", img.shape())));
    };
    if *c != 3 {
        return Err(CoreError::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(to_u8(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(bytes);
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| CoreError::Data(e.to_string()))? == 0 {
            return Err(CoreError::Data("truncated PPM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        header.extend(line.split_whitespace().map(str::to_string));
    }
    if header[0] != "P6" || header[3] != "255" {
        return Err(CoreError::Data(format!("unsupported PPM header {header:?}")));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| CoreError::Data(format!("bad PPM size `{s}`")));
    let (w, h) = (parse(&header[1])?, parse(&header[2])?);
    let mut raw = vec![0u8; w * h * 3];
    r.read_exact(&mut raw).map_err(|_| CoreError::Data("truncated PPM pixel data".into()))?;
    let mut data = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + p] = raw[p * 3 + ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Writes a P6 file, creating parent directories as needed.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let bytes = encode_ppm(img)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_ppm(&bytes)
}

/// ITU-R 601 luma of a `[3, H, W]` image, `H * W` values.
pub fn grayscale(img: &Tensor<f32>) -> Vec<f32> {
    let n = img.numel() / 3;
    let d = img.data();
    (0..n).map(|p| 0.299 * d[p] + 0.587 * d[n + p] + 0.114 * d[2 * n + p]).collect()
}

/// Replicates a single-channel map into three channels.
pub fn to_rgb(map: &[f32], h: usize, w: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(map);
    }
    Tensor::new(&[3, h, w], data).expect("map size matches")
}
