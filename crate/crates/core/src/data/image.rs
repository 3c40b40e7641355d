//! PNG input/output and resampling of single-channel planes.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Luma weights for RGB input (ITU-R BT.601).
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Decodes a PNG to a `(1, 1, H, W)` tensor in `[0, 1]`.
///
/// Gray and gray+alpha images use the gray channel, RGB(A) and palette
/// images are converted to luma; alpha is ignored. 16-bit samples keep
/// their full precision.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| image_err(path, e))?;
    let mut decoder = png::Decoder::new_with_limits(BufReader::new(file), png::Limits { bytes: 1 << 30 });
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(image_err(path, "palette was not expanded")),
    };
    let sample = |i: usize| -> f32 {
        match info.bit_depth {
            BitDepth::Sixteen => u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f32 / 65535.0,
            _ => buf[i] as f32 / 255.0,
        }
    };
    let row_samples = info.line_size
        / match info.bit_depth {
            BitDepth::Sixteen => 2,
            _ => 1,
        };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let base = y * row_samples + x * channels;
            let v = if channels >= 3 {
                LUMA[0] * sample(base) + LUMA[1] * sample(base + 1) + LUMA[2] * sample(base + 2)
            } else {
                sample(base)
            };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec([1, 1, h, w], data)
}

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| image_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(data).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_png(path, width, height, ColorType::Grayscale, data)
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_png(path, width, height, ColorType::Rgb, data)
}

/// Writes the first plane of `t`, scaled from `[0, 1]` to 8 bits.
pub fn write_plane_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    let bytes: Vec<u8> = t.data()[..s.plane()]
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_gray_png(path, s.w, s.h, &bytes)
}

/// Bilinear resampling of every plane with half-pixel centres and edge
/// clamping. A constant plane stays exactly constant.
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = t.shape();
    if (s.h, s.w) == (out_h, out_w) {
        return t.clone();
    }
    let taps = |inn: usize, out: usize| -> Vec<(usize, usize, f32)> {
        let scale = inn as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inn - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inn - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(s.h, out_h);
    let xs = taps(s.w, out_w);
    let mut out = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for plane in t.data().chunks(s.plane()) {
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
                let top = lerp(plane[y0 * s.w + x0], plane[y0 * s.w + x1], tx);
                let bottom = lerp(plane[y1 * s.w + x0], plane[y1 * s.w + x1], tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    Tensor::from_vec([s.n, s.c, out_h, out_w], out).expect("resize shape")
}

/// Nearest-neighbour resampling with half-pixel centres.
pub fn resize_nearest(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = t.shape();
    if (s.h, s.w) == (out_h, out_w) {
        return t.clone();
    }
    let idx = |inn: usize, out: usize| -> Vec<usize> {
        (0..out)
            .map(|o| (((o as f64 + 0.5) * inn as f64 / out as f64) as usize).min(inn - 1))
            .collect()
    };
    let ys = idx(s.h, out_h);
    let xs = idx(s.w, out_w);
    let mut out = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for plane in t.data().chunks(s.plane()) {
        for &y in &ys {
            for &x in &xs {
                out.push(plane[y * s.w + x]);
            }
        }
    }
    Tensor::from_vec([s.n, s.c, out_h, out_w], out).expect("resize shape")
}
