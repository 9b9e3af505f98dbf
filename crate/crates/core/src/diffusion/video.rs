use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecError, FrameReader, FrameWriter};

use super::DiffusionError;

pub const VIDEO_MAGIC: &[u8; 9] = b"VIMI-VID1";
pub const VIDEO_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoShape {
    pub const fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }
}

impl std::fmt::Display for VideoShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.frames, self.height, self.width, self.channels)
    }
}

/// Frames × height × width × channels, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    shape: VideoShape,
    data: Vec<f64>,
    pub framerate: f64,
}

impl VideoTensor {
    pub fn new(shape: VideoShape, data: Vec<f64>, framerate: f64) -> Result<Self, DiffusionError> {
        if shape.frames == 0 || shape.height == 0 || shape.width == 0 || shape.channels == 0 {
            return Err(DiffusionError::InvalidShape(format!("zero dimension in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(DiffusionError::ShapeMismatch {
                expected: shape.to_string(),
                got: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite);
        }
        Ok(Self {
            shape,
            data,
            framerate,
        })
    }

    pub fn zeros(shape: VideoShape, framerate: f64) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
            framerate,
        }
    }

    pub fn shape(&self) -> VideoShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Replaces the values, keeping shape and framerate.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, DiffusionError> {
        Self::new(self.shape, data, self.framerate)
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        let s = self.shape;
        ((f * s.height + y) * s.width + x) * s.channels + c
    }

    pub fn at(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(f, y, x, c)]
    }

    /// Pixel values of one frame, channels innermost.
    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.shape.height * self.shape.width * self.shape.channels;
        &self.data[f * n..(f + 1) * n]
    }

    /// Nearest-neighbour spatial upsampling by integer factors.
    pub fn upsample_nearest(&self, fy: usize, fx: usize) -> Self {
        let s = self.shape;
        let out_shape = VideoShape::new(s.frames, s.height * fy, s.width * fx, s.channels);
        let mut out = Vec::with_capacity(out_shape.len());
        for f in 0..s.frames {
            for y in 0..out_shape.height {
                for x in 0..out_shape.width {
                    let base = self.index(f, y / fy, x / fx, 0);
                    out.extend_from_slice(&self.data[base..base + s.channels]);
                }
            }
        }
        Self {
            shape: out_shape,
            data: out,
            framerate: self.framerate,
        }
    }

    /// Spatial box-filter downsampling by integer factors.
    pub fn downsample_mean(&self, fy: usize, fx: usize) -> Result<Self, DiffusionError> {
        let s = self.shape;
        if fy == 0 || fx == 0 || !s.height.is_multiple_of(fy) || !s.width.is_multiple_of(fx) {
            return Err(DiffusionError::ShapeMismatch {
                expected: format!("spatial dims divisible by {fy}x{fx}"),
                got: s.to_string(),
            });
        }
        let out_shape = VideoShape::new(s.frames, s.height / fy, s.width / fx, s.channels);
        let mut out = vec![0.0; out_shape.len()];
        let norm = (fy * fx) as f64;
        for f in 0..s.frames {
            for y in 0..s.height {
                for x in 0..s.width {
                    for c in 0..s.channels {
                        let o = ((f * out_shape.height + y / fy) * out_shape.width + x / fx) * s.channels + c;
                        out[o] += self.at(f, y, x, c) / norm;
                    }
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
            framerate: self.framerate,
        })
    }

    /// Channel-wise concatenation: `self`'s channels first, then `other`'s.
    pub fn concat_channels(&self, other: &VideoTensor) -> Result<Self, DiffusionError> {
        let (a, b) = (self.shape, other.shape);
        if (a.frames, a.height, a.width) != (b.frames, b.height, b.width) {
            return Err(DiffusionError::ShapeMismatch {
                expected: format!("{}x{}x{}xC", a.frames, a.height, a.width),
                got: b.to_string(),
            });
        }
        Ok(Self {
            shape: a.with_channels(a.channels + b.channels),
            data: interleave_channels(&self.data, a.channels, &other.data, b.channels),
            framerate: self.framerate,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.shape;
        let mut w = FrameWriter::new(VIDEO_MAGIC);
        w.u32(VIDEO_VERSION)
            .u32(s.frames as u32)
            .u32(s.height as u32)
            .u32(s.width as u32)
            .u32(s.channels as u32)
            .f32(self.framerate as f32);
        for &v in &self.data {
            w.f32(v as f32);
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, DiffusionError> {
        let mut r = FrameReader::open(data, VIDEO_MAGIC)?;
        let version = r.u32()?;
        if version != VIDEO_VERSION {
            return Err(DiffusionError::Corrupt(format!("unsupported video version {version}")));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let shape = VideoShape::new(dims[0], dims[1], dims[2], dims[3]);
        let framerate = r.f32()? as f64;
        let mut values = Vec::with_capacity(shape.len().min(1 << 26));
        for _ in 0..shape.len() {
            values.push(r.f32()? as f64);
        }
        r.finish()?;
        Self::new(shape, values, framerate)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        Ok(codec::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

pub(crate) fn interleave_channels(a: &[f64], ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let pixels = a.len() / ca;
    debug_assert_eq!(pixels * cb, b.len());
    let mut out = Vec::with_capacity(a.len() + b.len());
    for p in 0..pixels {
        out.extend_from_slice(&a[p * ca..(p + 1) * ca]);
        out.extend_from_slice(&b[p * cb..(p + 1) * cb]);
    }
    out
}

impl From<CodecError> for DiffusionError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Io(e) => DiffusionError::Io(e),
            CodecError::Corrupt(m) => DiffusionError::Corrupt(m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: VideoShape) -> VideoTensor {
        let data = (0..shape.len()).map(|i| i as f64 * 0.25).collect();
        VideoTensor::new(shape, data, 24.0).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        let s = VideoShape::new(2, 2, 2, 1);
        assert!(VideoTensor::new(s, vec![0.0; 7], 24.0).is_err());
        assert!(VideoTensor::new(s, vec![f64::NAN; 8], 24.0).is_err());
        assert!(VideoTensor::new(VideoShape::new(0, 2, 2, 1), vec![], 24.0).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let v = ramp(VideoShape::new(2, 3, 4, 3));
        let bytes = v.to_bytes();
        assert_eq!(&bytes[..9], VIDEO_MAGIC);
        assert_eq!(bytes.len(), 9 + 4 * 5 + 4 + 4 * 72 + 4);
        let back = VideoTensor::from_bytes(&bytes).unwrap();
        assert_eq!(back, v);
        assert!(matches!(
            VideoTensor::from_bytes(&bytes[..bytes.len() - 3]),
            Err(DiffusionError::Corrupt(_))
        ));
    }

    #[test]
    fn up_then_down_is_identity() {
        let v = ramp(VideoShape::new(2, 3, 4, 2));
        let up = v.upsample_nearest(4, 4);
        assert_eq!(up.shape(), VideoShape::new(2, 12, 16, 2));
        assert_eq!(up.at(1, 5, 9, 1), v.at(1, 1, 2, 1));
        assert_eq!(up.downsample_mean(4, 4).unwrap(), v);
        assert!(v.downsample_mean(2, 3).is_err());
    }

    #[test]
    fn concat_channels_interleaves() {
        let a = ramp(VideoShape::new(1, 1, 2, 2));
        let b = VideoTensor::new(VideoShape::new(1, 1, 2, 1), vec![-1.0, -2.0], 24.0).unwrap();
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape().channels, 3);
        assert_eq!(c.data(), &[0.0, 0.25, -1.0, 0.5, 0.75, -2.0]);
        let wrong = ramp(VideoShape::new(1, 2, 2, 1));
        assert!(a.concat_channels(&wrong).is_err());
    }
}
