//! Minimal PGM (portable graymap) codec, P2 ASCII and P5 binary, 8-bit only.

use std::fmt::Write as _;

use thiserror::Error;

use crate::histogram::GrayImage;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("bad magic number at byte 0 (expected P2 or P5)")]
    BadMagic,
    #[error("malformed header at byte {offset}: {reason}")]
    Header { offset: usize, reason: String },
    #[error("unsupported maxval {maxval} at byte {offset} (must be 1..=255)")]
    UnsupportedMaxval { offset: usize, maxval: u32 },
    #[error("truncated pixel data at byte {offset}: expected {expected} pixels, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("bad pixel value at byte {offset}: {reason}")]
    Pixel { offset: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmFormat {
    Ascii,
    Binary,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Skips whitespace and `#` comments (comment runs to end of line).
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Reads an unsigned decimal token. Returns (value, token start offset).
    fn number(&mut self, what: &str) -> Result<(u32, usize), PgmError> {
        self.skip_space();
        let start = self.pos;
        let mut value: u64 = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value * 10 + u64::from(self.bytes[self.pos] - b'0');
            if value > u64::from(u32::MAX) {
                return Err(PgmError::Header {
                    offset: start,
                    reason: format!("{what} overflows"),
                });
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(PgmError::Header {
                offset: start,
                reason: if start >= self.bytes.len() {
                    format!("unexpected end of data reading {what}")
                } else {
                    format!("expected {what}, found byte 0x{:02x}", self.bytes[start])
                },
            });
        }
        Ok((value as u32, start))
    }
}

/// Decodes a P2 or P5 graymap. Pixel values are kept as stored; images whose
/// maxval is below 255 are not rescaled.
pub fn decode(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(PgmError::BadMagic);
    }
    let format = match bytes[1] {
        b'2' => PgmFormat::Ascii,
        b'5' => PgmFormat::Binary,
        _ => return Err(PgmError::BadMagic),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    if cur.pos < bytes.len() && !bytes[cur.pos].is_ascii_whitespace() && bytes[cur.pos] != b'#' {
        return Err(PgmError::Header {
            offset: 2,
            reason: "missing whitespace after magic number".into(),
        });
    }
    let (width, _) = cur.number("width")?;
    let (height, _) = cur.number("height")?;
    let (maxval, maxval_at) = cur.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::UnsupportedMaxval {
            offset: maxval_at,
            maxval,
        });
    }
    let expected = (width as usize)
        .checked_mul(height as usize)
        .ok_or_else(|| PgmError::Header {
            offset: 2,
            reason: "image dimensions overflow".into(),
        })?;

    let pixels = match format {
        PgmFormat::Binary => {
            // exactly one whitespace byte separates maxval from the raster
            if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
                return Err(PgmError::Truncated {
                    offset: cur.pos,
                    expected,
                    found: 0,
                });
            }
            let start = cur.pos + 1;
            let available = bytes.len() - start;
            if available < expected {
                return Err(PgmError::Truncated {
                    offset: bytes.len(),
                    expected,
                    found: available,
                });
            }
            let raster = &bytes[start..start + expected];
            if let Some(i) = raster.iter().position(|&v| u32::from(v) > maxval) {
                return Err(PgmError::Pixel {
                    offset: start + i,
                    reason: format!("value {} exceeds maxval {maxval}", raster[i]),
                });
            }
            raster.to_vec()
        }
        PgmFormat::Ascii => {
            let mut pixels = Vec::with_capacity(expected);
            for found in 0..expected {
                cur.skip_space();
                if cur.pos >= bytes.len() {
                    return Err(PgmError::Truncated {
                        offset: cur.pos,
                        expected,
                        found,
                    });
                }
                let (v, at) = cur.number("pixel value").map_err(|e| match e {
                    PgmError::Header { offset, reason } => PgmError::Pixel { offset, reason },
                    other => other,
                })?;
                if v > maxval {
                    return Err(PgmError::Pixel {
                        offset: at,
                        reason: format!("value {v} exceeds maxval {maxval}"),
                    });
                }
                pixels.push(v as u8);
            }
            pixels
        }
    };

    Ok(GrayImage::new(width as usize, height as usize, pixels)
        .expect("pixel count matches dimensions"))
}

/// Encodes an image as PGM with maxval 255.
pub fn encode(image: &GrayImage, format: PgmFormat) -> Vec<u8> {
    let header = format!(
        "{}\n{} {}\n255\n",
        match format {
            PgmFormat::Ascii => "P2",
            PgmFormat::Binary => "P5",
        },
        image.width(),
        image.height()
    );
    let mut out = header.into_bytes();
    match format {
        PgmFormat::Binary => out.extend_from_slice(image.pixels()),
        PgmFormat::Ascii => {
            let mut body = String::new();
            for row in image.pixels().chunks(image.width().max(1)) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(body, "{}", line.join(" "));
            }
            out.extend_from_slice(body.as_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_ascii() {
        let img = decode(b"P2 2 1 255\n0 255\n").unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixels(), &[0, 255]);
    }

    #[test]
    fn comments_in_header() {
        let img = decode(b"P2\n# a comment\n2 # inline\n1\n255\n3 4").unwrap();
        assert_eq!(img.pixels(), &[3, 4]);
    }

    #[test]
    fn binary_truncated() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        match decode(&bytes) {
            Err(PgmError::Truncated {
                offset,
                expected: 4,
                found: 3,
            }) => assert_eq!(offset, bytes.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sixteen_bit_rejected() {
        assert_eq!(
            decode(b"P2 1 1 65535\n0\n"),
            Err(PgmError::UnsupportedMaxval {
                offset: 7,
                maxval: 65535
            })
        );
    }

    #[test]
    fn small_maxval_not_rescaled() {
        let img = decode(b"P2 3 1 15\n0 7 15\n").unwrap();
        assert_eq!(img.pixels(), &[0, 7, 15]);
        assert!(matches!(
            decode(b"P2 1 1 15\n16\n"),
            Err(PgmError::Pixel { offset: 10, .. })
        ));
    }

    #[test]
    fn ascii_truncated_and_garbage() {
        assert!(matches!(
            decode(b"P2 2 2 255\n1 2 3"),
            Err(PgmError::Truncated {
                expected: 4,
                found: 3,
                ..
            })
        ));
        assert!(matches!(
            decode(b"P2 2 x 255\n"),
            Err(PgmError::Header { offset: 5, .. })
        ));
        assert_eq!(decode(b"P6 1 1 255\n\0"), Err(PgmError::BadMagic));
    }

    #[test]
    fn binary_round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 30, 200, 255]).unwrap();
        for fmt in [PgmFormat::Ascii, PgmFormat::Binary] {
            assert_eq!(decode(&encode(&img, fmt)).unwrap(), img);
        }
    }
}
