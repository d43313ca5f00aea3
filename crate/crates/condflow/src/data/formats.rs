//! Minimal binary Netpbm and PFM codecs.
//!
//! Camera frames travel as 8-bit binary PPM (`P6`), label maps as 8-bit
//! binary PGM (`P5`), and metric depth as grayscale PFM (`Pf`) with a
//! negative scale marking little-endian floats, depth in meters and 0
//! meaning "no measurement".

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::DataError;
use crate::tensor::Tensor;

use super::LabelMap;

fn fmt_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Whitespace- and comment-tolerant header scanner for the Netpbm family.
struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }

    /// Consume exactly one whitespace byte separating header from payload.
    fn payload(mut self) -> &'a [u8] {
        self.pos += 1;
        &self.bytes[self.pos.min(self.bytes.len())..]
    }
}

fn parse_dim(tok: &[u8], path: &Path, what: &str) -> Result<usize, DataError> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| fmt_err(path, format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
}

/// Write a [0,1] 3xHxW tensor as binary PPM, rounding to 8 bits.
pub fn write_ppm(path: &Path, rgb: &Tensor<f32>) -> Result<(), DataError> {
    let shape = rgb.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(fmt_err(path, format!("expected 3xHxW rgb, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = rgb.data();
    let plane = h * w;
    for px in 0..plane {
        for c in 0..3 {
            buf.push((data[c * plane + px].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_atomic(path, &buf)
}

/// Read a binary PPM into a [0,1] 3xHxW tensor.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut scan = HeaderScanner::new(&bytes);
    match scan.token() {
        Some(b"P6") => {}
        _ => return Err(fmt_err(path, "not a binary PPM (missing P6 magic)")),
    }
    let w = parse_dim(scan.token().unwrap_or(b""), path, "width")?;
    let h = parse_dim(scan.token().unwrap_or(b""), path, "height")?;
    match scan.token() {
        Some(b"255") => {}
        other => {
            return Err(fmt_err(
                path,
                format!("unsupported maxval {:?}", String::from_utf8_lossy(other.unwrap_or(b"?"))),
            ))
        }
    }
    let payload = scan.payload();
    let plane = h * w;
    if payload.len() < plane * 3 {
        return Err(fmt_err(
            path,
            format!("pixel payload holds {} bytes, expected {}", payload.len(), plane * 3),
        ));
    }
    let mut data = vec![0f32; 3 * plane];
    for px in 0..plane {
        for c in 0..3 {
            data[c * plane + px] = payload[px * 3 + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(vec![3, h, w], data)?)
}

/// Write a label map as binary PGM.
pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<(), DataError> {
    let mut buf = format!("P5\n{} {}\n255\n", labels.w, labels.h).into_bytes();
    buf.extend_from_slice(&labels.data);
    write_atomic(path, &buf)
}

/// Read a binary PGM label map.
pub fn read_pgm(path: &Path) -> Result<LabelMap, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut scan = HeaderScanner::new(&bytes);
    match scan.token() {
        Some(b"P5") => {}
        _ => return Err(fmt_err(path, "not a binary PGM (missing P5 magic)")),
    }
    let w = parse_dim(scan.token().unwrap_or(b""), path, "width")?;
    let h = parse_dim(scan.token().unwrap_or(b""), path, "height")?;
    match scan.token() {
        Some(b"255") => {}
        other => {
            return Err(fmt_err(
                path,
                format!("unsupported maxval {:?}", String::from_utf8_lossy(other.unwrap_or(b"?"))),
            ))
        }
    }
    let payload = scan.payload();
    if payload.len() < h * w {
        return Err(fmt_err(
            path,
            format!("pixel payload holds {} bytes, expected {}", payload.len(), h * w),
        ));
    }
    LabelMap::new(h, w, payload[..h * w].to_vec())
}

/// Write a 1xHxW depth map as grayscale PFM (little-endian, scale -1.0,
/// rows bottom-up per the format).
pub fn write_pfm(path: &Path, depth: &Tensor<f32>) -> Result<(), DataError> {
    let shape = depth.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(fmt_err(path, format!("expected 1xHxW depth, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    let data = depth.data();
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&data[y * w + x].to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Read a grayscale PFM depth map; byte order follows the scale sign.
pub fn read_pfm(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut scan = HeaderScanner::new(&bytes);
    match scan.token() {
        Some(b"Pf") => {}
        Some(b"PF") => return Err(fmt_err(path, "3-channel PFM not supported, expected grayscale Pf")),
        _ => return Err(fmt_err(path, "not a PFM (missing Pf magic)")),
    }
    let w = parse_dim(scan.token().unwrap_or(b""), path, "width")?;
    let h = parse_dim(scan.token().unwrap_or(b""), path, "height")?;
    let scale: f64 = scan
        .token()
        .and_then(|t| std::str::from_utf8(t).ok())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt_err(path, "bad scale"))?;
    if scale == 0.0 {
        return Err(fmt_err(path, "scale must be nonzero"));
    }
    let little_endian = scale < 0.0;
    let payload = scan.payload();
    if payload.len() < h * w * 4 {
        return Err(fmt_err(
            path,
            format!("float payload holds {} bytes, expected {}", payload.len(), h * w * 4),
        ));
    }
    let mut data = vec![0f32; h * w];
    for (i, chunk) in payload[..h * w * 4].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("chunk of 4");
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // PFM stores rows bottom-up
        let y = h - 1 - i / w;
        let x = i % w;
        data[y * w + x] = v;
    }
    Ok(Tensor::from_vec(vec![1, h, w], data)?)
}

/// Write through a sibling temp file and rename, so readers never observe
/// a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}
