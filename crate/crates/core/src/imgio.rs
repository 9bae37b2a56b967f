//! Image and sequence file I/O.
//!
//! HDR frames travel as OpenEXR (`.exr`) or Radiance (`.hdr`) files; LDR
//! rasters are materialized as 16-bit PNGs with intensities mapped linearly
//! onto `[0, 1]`. A small TOML index ties an LDR sequence together with its
//! per-frame exposure metadata, which pixels alone cannot carry.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::hdr::HdrEncoder;
use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{FrameError, LdrFrame, LinearHdrFrame};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum ImgIoError {
    #[error("unsupported image extension on {0:?}; expected .exr or .hdr")]
    UnsupportedExtension(PathBuf),
    #[error("OpenEXR codec: {0}")]
    Exr(#[from] exr::error::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("{path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("LDR raster for {0:?} must lie in [0, 1] before PNG export")]
    LdrOutOfRange(PathBuf),
    #[error("sequence index {0:?}: {1}")]
    BadIndex(PathBuf, String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImgIoError + '_ {
    move |source| ImgIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a linear HDR frame, dispatching on the file extension. Stray
/// negatives (a few codecs emit them around zero) clamp to 0; non-finite
/// pixels are a validation error.
pub fn read_hdr_frame<T: Real>(path: &Path) -> Result<LinearHdrFrame<T>, ImgIoError> {
    match extension(path)? {
        HdrFormat::OpenExr => read_exr(path),
        HdrFormat::Radiance => read_radiance(path),
    }
}

/// Writes a linear HDR frame, dispatching on the file extension.
pub fn write_hdr_frame<T: Real>(path: &Path, frame: &LinearHdrFrame<T>) -> Result<(), ImgIoError> {
    match extension(path)? {
        HdrFormat::OpenExr => write_exr(path, frame),
        HdrFormat::Radiance => write_radiance(path, frame),
    }
}

enum HdrFormat {
    OpenExr,
    Radiance,
}

fn extension(path: &Path) -> Result<HdrFormat, ImgIoError> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("exr") => Ok(HdrFormat::OpenExr),
        Some("hdr") => Ok(HdrFormat::Radiance),
        _ => Err(ImgIoError::UnsupportedExtension(path.to_path_buf())),
    }
}

fn read_exr<T: Real>(path: &Path) -> Result<LinearHdrFrame<T>, ImgIoError> {
    let image = exr::prelude::read_first_rgba_layer_from_file(
        path,
        |resolution, _channels| Array3::<f64>::zeros((resolution.height(), resolution.width(), 3)),
        |pixels, position, (r, g, b, _a): (f32, f32, f32, f32)| {
            pixels[[position.y(), position.x(), 0]] = r as f64;
            pixels[[position.y(), position.x(), 1]] = g as f64;
            pixels[[position.y(), position.x(), 2]] = b as f64;
        },
    )?;
    raster_to_hdr(image.layer_data.channel_data.pixels)
}

fn write_exr<T: Real>(path: &Path, frame: &LinearHdrFrame<T>) -> Result<(), ImgIoError> {
    let data = frame.data();
    exr::prelude::write_rgb_file(path, frame.width(), frame.height(), |x, y| {
        (
            data[[y, x, 0]].as_f64() as f32,
            data[[y, x, 1]].as_f64() as f32,
            data[[y, x, 2]].as_f64() as f32,
        )
    })?;
    Ok(())
}

fn read_radiance<T: Real>(path: &Path) -> Result<LinearHdrFrame<T>, ImgIoError> {
    let decoded = image::open(path)?.into_rgb32f();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut raster = Array3::<f64>::zeros((h, w, 3));
    for (x, y, pixel) in decoded.enumerate_pixels() {
        for c in 0..3 {
            raster[[y as usize, x as usize, c]] = pixel.0[c] as f64;
        }
    }
    raster_to_hdr(raster)
}

fn write_radiance<T: Real>(path: &Path, frame: &LinearHdrFrame<T>) -> Result<(), ImgIoError> {
    let data = frame.data();
    let mut pixels = Vec::with_capacity(frame.height() * frame.width());
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            pixels.push(Rgb([
                data[[y, x, 0]].as_f64() as f32,
                data[[y, x, 1]].as_f64() as f32,
                data[[y, x, 2]].as_f64() as f32,
            ]));
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    HdrEncoder::new(BufWriter::new(file)).encode(&pixels, frame.width(), frame.height())?;
    Ok(())
}

fn raster_to_hdr<T: Real>(raster: Array3<f64>) -> Result<LinearHdrFrame<T>, ImgIoError> {
    let data = raster.mapv(|v| T::lit(v.max(0.0)));
    Ok(LinearHdrFrame::new(data)?)
}

/// Writes an LDR raster as a 16-bit RGB PNG; values map linearly onto the
/// integer range, so the quantization step is about `1.5e-5`.
pub fn write_ldr_png16<T: Real>(path: &Path, raster: &Array3<T>) -> Result<(), ImgIoError> {
    let (h, w, c) = raster.dim();
    if c != 3 {
        return Err(ImgIoError::Frame(FrameError::ChannelCount {
            expected: 3,
            got: c,
        }));
    }
    let mut buffer = ImageBuffer::<Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, pixel) in buffer.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = raster[[y as usize, x as usize, ch]].as_f64();
            if !(0.0..=1.0).contains(&v) {
                return Err(ImgIoError::LdrOutOfRange(path.to_path_buf()));
            }
            pixel.0[ch] = (v * 65535.0).round() as u16;
        }
    }
    buffer.save(path)?;
    Ok(())
}

/// Reads a 16-bit (or 8-bit, widened) PNG back into a `[0, 1]` raster.
pub fn read_ldr_png16<T: Real>(path: &Path) -> Result<Array3<T>, ImgIoError> {
    let decoded: DynamicImage = image::open(path)?;
    let rgb = decoded.into_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut raster = Array3::<T>::zeros((h, w, 3));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            raster[[y as usize, x as usize, c]] = T::lit(pixel.0[c] as f64 / 65535.0);
        }
    }
    Ok(raster)
}

/// On-disk index entry for one LDR frame; `file` is relative to the index.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LdrIndexEntry {
    pub file: String,
    pub exposure_time: f64,
    pub exposure_index: usize,
}

/// TOML index describing an LDR image sequence with exposure metadata.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LdrSequenceIndex {
    pub gamma: f64,
    pub frames: Vec<LdrIndexEntry>,
}

impl LdrSequenceIndex {
    pub fn save(&self, path: &Path) -> Result<(), ImgIoError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| ImgIoError::BadIndex(path.to_path_buf(), e.to_string()))?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, ImgIoError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| ImgIoError::BadIndex(path.to_path_buf(), e.to_string()))
    }
}

/// Writes an LDR sequence as numbered 16-bit PNGs plus a TOML index; returns
/// the index path.
pub fn write_ldr_sequence<T: Real>(
    dir: &Path,
    frames: &[LdrFrame<T>],
) -> Result<PathBuf, ImgIoError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(frames.len());
    let gamma = frames.first().map(|f| f.gamma().as_f64()).unwrap_or(2.2);
    for (i, frame) in frames.iter().enumerate() {
        let name = format!("frame_{i:05}.png");
        write_ldr_png16(&dir.join(&name), frame.data())?;
        entries.push(LdrIndexEntry {
            file: name,
            exposure_time: frame.exposure_time().as_f64(),
            exposure_index: frame.exposure_index(),
        });
    }
    let index = LdrSequenceIndex {
        gamma,
        frames: entries,
    };
    let index_path = dir.join("sequence.toml");
    index.save(&index_path)?;
    Ok(index_path)
}

/// Loads an LDR sequence (PNGs plus TOML index) written by
/// [`write_ldr_sequence`] or assembled by hand.
pub fn read_ldr_sequence<T: Real>(index_path: &Path) -> Result<Vec<LdrFrame<T>>, ImgIoError> {
    let index = LdrSequenceIndex::load(index_path)?;
    let base = index_path.parent().unwrap_or_else(|| Path::new("."));
    let mut frames = Vec::with_capacity(index.frames.len());
    for entry in &index.frames {
        let raster = read_ldr_png16::<T>(&base.join(&entry.file))?;
        frames.push(LdrFrame::new(
            raster,
            T::lit(entry.exposure_time),
            entry.exposure_index,
            T::lit(index.gamma),
        )?);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample_hdr(h: usize, w: usize) -> LinearHdrFrame<f64> {
        LinearHdrFrame::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            (y * 100 + x * 10 + c) as f64 * 0.01
        }))
        .unwrap()
    }

    #[test]
    fn exr_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.exr");
        let frame = sample_hdr(12, 9);
        write_hdr_frame(&path, &frame).unwrap();
        let back: LinearHdrFrame<f64> = read_hdr_frame(&path).unwrap();
        assert_eq!((back.height(), back.width()), (12, 9));
        for (a, b) in back.data().iter().zip(frame.data().iter()) {
            assert!((a - b).abs() < 1e-5, "f32 channel storage: {a} vs {b}");
        }
    }

    #[test]
    fn radiance_round_trip_is_lossy_but_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.hdr");
        let frame = sample_hdr(8, 8);
        write_hdr_frame(&path, &frame).unwrap();
        let back: LinearHdrFrame<f64> = read_hdr_frame(&path).unwrap();
        for (a, b) in back.data().iter().zip(frame.data().iter()) {
            // Shared-exponent RGBE quantization: ~1% relative error budget.
            assert!((a - b).abs() <= 0.01 * b.abs() + 0.005, "{a} vs {b}");
        }
    }

    #[test]
    fn unknown_extension_is_rejected() {
        let frame = sample_hdr(4, 4);
        let err = write_hdr_frame(Path::new("/tmp/frame.tiff"), &frame);
        assert!(matches!(err, Err(ImgIoError::UnsupportedExtension(_))));
    }

    #[test]
    fn png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ldr.png");
        let raster = Array3::from_shape_fn((6, 5, 3), |(y, x, c)| {
            ((y * 31 + x * 17 + c * 7) % 64) as f64 / 63.0
        });
        write_ldr_png16(&path, &raster).unwrap();
        let back: Array3<f64> = read_ldr_png16(&path).unwrap();
        for (a, b) in back.iter().zip(raster.iter()) {
            assert!((a - b).abs() < 1.0 / 65535.0, "{a} vs {b}");
        }
    }

    #[test]
    fn png16_rejects_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let raster = Array3::from_elem((4, 4, 3), 1.5);
        assert!(matches!(
            write_ldr_png16(&dir.path().join("bad.png"), &raster),
            Err(ImgIoError::LdrOutOfRange(_))
        ));
    }

    #[test]
    fn ldr_sequence_round_trip_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<LdrFrame<f64>> = (0..4)
            .map(|i| {
                let data = Array3::from_elem((6, 6, 3), 0.1 * (i + 1) as f64);
                let (t, idx) = if i % 2 == 0 { (1.0, 0) } else { (8.0, 1) };
                LdrFrame::new(data, t, idx, 2.2).unwrap()
            })
            .collect();
        let index_path = write_ldr_sequence(dir.path(), &frames).unwrap();
        let back: Vec<LdrFrame<f64>> = read_ldr_sequence(&index_path).unwrap();
        assert_eq!(back.len(), 4);
        for (orig, loaded) in frames.iter().zip(back.iter()) {
            assert_eq!(orig.exposure_time(), loaded.exposure_time());
            assert_eq!(orig.exposure_index(), loaded.exposure_index());
            assert_eq!(orig.gamma(), loaded.gamma());
            for (a, b) in orig.data().iter().zip(loaded.data().iter()) {
                assert!((a - b).abs() < 1.0 / 65535.0);
            }
        }
    }

    #[test]
    fn missing_index_fails_with_path_context() {
        let err = read_ldr_sequence::<f64>(Path::new("/nonexistent/sequence.toml"));
        match err {
            Err(ImgIoError::Io { path, .. }) => {
                assert!(path.ends_with("sequence.toml"));
            }
            other => panic!("expected Io error, got {other:?}"),
        }
    }
}
