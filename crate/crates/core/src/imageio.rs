//! Lossless PNG encode/decode for 8- and 16-bit gray/RGB images with tEXt
//! metadata.

use std::io::Cursor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("png encode failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
    #[error("sample buffer has {got} values, expected {expected}")]
    SampleCount { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

/// Decoded or to-be-encoded raster. Samples are row-major, interleaved,
/// one `u16` per channel value regardless of depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub depth: Depth,
    pub samples: Vec<u16>,
    pub text: Vec<(String, String)>,
}

impl Raster {
    pub fn rgb8(width: usize, height: usize, rgb: &[u8]) -> Self {
        Self {
            width,
            height,
            channels: 3,
            depth: Depth::Eight,
            samples: rgb.iter().map(|&v| v as u16).collect(),
            text: Vec::new(),
        }
    }

    pub fn with_text(mut self, key: &str, value: &str) -> Self {
        self.text.push((key.to_string(), value.to_string()));
        self
    }

    pub fn text_value(&self, key: &str) -> Option<&str> {
        self.text.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Samples narrowed to bytes; fails for 16-bit rasters.
    pub fn to_u8(&self) -> Result<Vec<u8>, ImageIoError> {
        match self.depth {
            Depth::Eight => Ok(self.samples.iter().map(|&v| v as u8).collect()),
            Depth::Sixteen => Err(ImageIoError::Unsupported("expected 8-bit samples".into())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, ImageIoError> {
        let expected = self.width * self.height * self.channels;
        if self.samples.len() != expected {
            return Err(ImageIoError::SampleCount {
                expected,
                got: self.samples.len(),
            });
        }
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            n => return Err(ImageIoError::Unsupported(format!("{n} channels"))),
        };
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(color);
            let bytes: Vec<u8> = match self.depth {
                Depth::Eight => {
                    enc.set_depth(png::BitDepth::Eight);
                    self.samples.iter().map(|&v| v.min(255) as u8).collect()
                }
                Depth::Sixteen => {
                    enc.set_depth(png::BitDepth::Sixteen);
                    self.samples.iter().flat_map(|v| v.to_be_bytes()).collect()
                }
            };
            for (k, v) in &self.text {
                enc.add_text_chunk(k.clone(), v.clone())?;
            }
            let mut writer = enc.write_header()?;
            writer.write_image_data(&bytes)?;
            writer.finish()?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ImageIoError> {
        let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info()?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| ImageIoError::Unsupported("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf)?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(ImageIoError::Unsupported(format!("{other:?}"))),
        };
        let (depth, samples) = match info.bit_depth {
            png::BitDepth::Eight => (Depth::Eight, buf[..info.buffer_size()].iter().map(|&v| v as u16).collect()),
            png::BitDepth::Sixteen => (
                Depth::Sixteen,
                buf[..info.buffer_size()]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]))
                    .collect(),
            ),
            other => return Err(ImageIoError::Unsupported(format!("bit depth {other:?}"))),
        };
        let text = reader
            .info()
            .uncompressed_latin1_text
            .iter()
            .map(|c| (c.keyword.clone(), c.text.clone()))
            .collect();
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            channels,
            depth,
            samples,
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_round_trip_keeps_text() {
        let r = Raster {
            width: 3,
            height: 2,
            channels: 3,
            depth: Depth::Sixteen,
            samples: (0..18).map(|i| i * 3000).collect(),
            text: vec![("scale".into(), "-1.5:2.25".into())],
        };
        let back = Raster::decode(&r.encode().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.text_value("scale"), Some("-1.5:2.25"));
    }

    #[test]
    fn eight_bit_gray_round_trip() {
        let r = Raster {
            width: 4,
            height: 1,
            channels: 1,
            depth: Depth::Eight,
            samples: vec![0, 10, 200, 255],
            text: vec![],
        };
        assert_eq!(Raster::decode(&r.encode().unwrap()).unwrap(), r);
    }

    #[test]
    fn rejects_wrong_sample_count() {
        let mut r = Raster::rgb8(2, 2, &[0; 12]);
        r.samples.pop();
        assert!(matches!(r.encode(), Err(ImageIoError::SampleCount { .. })));
        assert!(Raster::decode(b"not a png").is_err());
    }
}
