//! Netpbm and calibration files.
//!
//! A sample stored under prefix `p` is the file set `p_left.ppm`,
//! `p_right.ppm` (8-bit RGB), `p_disp.pgm` (16-bit, disparity x 256, 0 =
//! invalid), `p_sem.pgm` (8-bit label ids) and `p_calib.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{to_u8, Calibration, StereoSample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Fixed-point scale of stored disparity.
pub const DISPARITY_SCALE: f64 = 256.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePaths {
    pub left: PathBuf,
    pub right: PathBuf,
    pub disparity: PathBuf,
    pub semantic: PathBuf,
    pub calib: PathBuf,
}

pub fn sample_paths(prefix: &Path) -> SamplePaths {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    SamplePaths {
        left: with("_left.ppm"),
        right: with("_right.ppm"),
        disparity: with("_disp.pgm"),
        semantic: with("_sem.pgm"),
        calib: with("_calib.txt"),
    }
}

struct Netpbm {
    width: usize,
    height: usize,
    maxval: u32,
    payload: Vec<u8>,
}

fn parse_netpbm(path: &Path, bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Netpbm> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(
            path,
            format!("bad dimensions {width}x{height} max {maxval}"),
        ));
    }
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let expected = width as usize * height as usize * channels * sample_bytes;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(Netpbm {
        width: width as usize,
        height: height as usize,
        maxval,
        payload: payload.to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a (1, 3, H, W) image in `[0, 1]` as 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.batch() != 1 || s.channels() != 3 {
        return Err(Error::invalid(
            "write_ppm",
            format!("expected 1x3xHxW, got {s}"),
        ));
    }
    let plane = s.plane();
    let mut out = format!("P6\n{} {}\n255\n", s.width(), s.height()).into_bytes();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_u8(image.data()[c * plane + p] as f64));
        }
    }
    write_file(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let img = parse_netpbm(path, &read_file(path)?, b"P6", 3)?;
    if img.maxval != 255 {
        return Err(Error::format(
            path,
            format!("unsupported maxval {}", img.maxval),
        ));
    }
    let plane = img.width * img.height;
    let mut data = vec![0f32; 3 * plane];
    for (i, &b) in img.payload.iter().enumerate() {
        data[(i % 3) * plane + i / 3] = b as f32 / 255.0;
    }
    Tensor::from_vec(Shape::new(1, 3, img.height, img.width), data)
}

pub fn write_pgm8(path: &Path, height: usize, width: usize, values: &[u8]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::invalid(
            "write_pgm8",
            "value count does not match dimensions",
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    write_file(path, &out)
}

/// Returns `(height, width, values)`.
pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = parse_netpbm(path, &read_file(path)?, b"P5", 1)?;
    if img.maxval > 255 {
        return Err(Error::format(path, "expected an 8-bit PGM"));
    }
    Ok((img.height, img.width, img.payload))
}

/// 16-bit PGM, samples big-endian.
pub fn write_pgm16(path: &Path, height: usize, width: usize, values: &[u16]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::invalid(
            "write_pgm16",
            "value count does not match dimensions",
        ));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    write_file(path, &out)
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = parse_netpbm(path, &read_file(path)?, b"P5", 1)?;
    if img.maxval <= 255 {
        return Err(Error::format(path, "expected a 16-bit PGM"));
    }
    let values = img
        .payload
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((img.height, img.width, values))
}

/// Fixed-point disparity code; 0 stays 0 (invalid).
pub fn encode_disparity(d: f32) -> Result<u16> {
    if !(d >= 0.0 && d.is_finite()) {
        return Err(Error::invalid(
            "encode_disparity",
            format!("disparity {d} is not encodable"),
        ));
    }
    let v = (d as f64 * DISPARITY_SCALE).round();
    if v > u16::MAX as f64 {
        return Err(Error::invalid(
            "encode_disparity",
            format!(
                "disparity {d} exceeds {:.3} px",
                u16::MAX as f64 / DISPARITY_SCALE
            ),
        ));
    }
    Ok(v as u16)
}

pub fn decode_disparity(v: u16) -> f32 {
    (v as f64 / DISPARITY_SCALE) as f32
}

pub fn write_calibration(path: &Path, calib: &Calibration) -> Result<()> {
    let text = format!(
        "focal_px={}\nbaseline_m={}\nwidth_px={}\n",
        calib.focal_px, calib.baseline_m, calib.width_px
    );
    write_file(path, text.as_bytes())
}

pub fn read_calibration(path: &Path) -> Result<Calibration> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut focal, mut baseline, mut width) = (None, None, None);
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("expected key=value, got '{line}'")))?;
        let bad = || Error::format(path, format!("bad value for {}", k.trim()));
        match k.trim() {
            "focal_px" => focal = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
            "baseline_m" => baseline = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
            "width_px" => width = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            other => return Err(Error::format(path, format!("unknown key '{other}'"))),
        }
    }
    let missing = |k: &str| Error::format(path, format!("missing {k}"));
    let calib = Calibration {
        focal_px: focal.ok_or_else(|| missing("focal_px"))?,
        baseline_m: baseline.ok_or_else(|| missing("baseline_m"))?,
        width_px: width.ok_or_else(|| missing("width_px"))?,
    };
    calib
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(calib)
}

pub fn save_sample(prefix: &Path, sample: &StereoSample) -> Result<()> {
    sample.validate()?;
    let p = sample_paths(prefix);
    let (h, w) = (sample.height(), sample.width());
    let codes = sample
        .gt_disparity
        .data()
        .iter()
        .map(|&d| encode_disparity(d))
        .collect::<Result<Vec<_>>>()?;
    write_ppm(&p.left, &sample.left)?;
    write_ppm(&p.right, &sample.right)?;
    write_pgm16(&p.disparity, h, w, &codes)?;
    write_pgm8(&p.semantic, h, w, &sample.semantic)?;
    write_calibration(&p.calib, &sample.calib)
}

pub fn load_sample(prefix: &Path) -> Result<StereoSample> {
    let p = sample_paths(prefix);
    let left = read_ppm(&p.left)?;
    let right = read_ppm(&p.right)?;
    let (h, w) = (left.shape().height(), left.shape().width());
    let check = |path: &Path, hh: usize, ww: usize| {
        if (hh, ww) != (h, w) {
            Err(Error::format(
                path,
                format!("{ww}x{hh} does not match left image {w}x{h}"),
            ))
        } else {
            Ok(())
        }
    };
    check(&p.right, right.shape().height(), right.shape().width())?;
    let (dh, dw, codes) = read_pgm16(&p.disparity)?;
    check(&p.disparity, dh, dw)?;
    let (sh, sw, semantic) = read_pgm8(&p.semantic)?;
    check(&p.semantic, sh, sw)?;
    let calib = read_calibration(&p.calib)?;
    let gt_disparity = Tensor::from_vec(
        Shape::new(1, 1, h, w),
        codes.into_iter().map(decode_disparity).collect(),
    )?;
    Ok(StereoSample {
        left,
        right,
        semantic,
        gt_disparity,
        calib,
    })
}
