//! IDX ingestion and PNG grid export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::tensor::Tensor;
use crate::vfl::Dataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `count x (rows*cols)` pixels scaled to `[0, 1]`.
    Images { pixels: Tensor, rows: usize, cols: usize },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LabError::Truncated {
            what: what.to_string(),
            needed: at + 4,
            found: bytes.len(),
        })
}

/// Parses an unsigned-byte IDX file (images or labels).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = be_u32(bytes, 0, "idx header")?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let count = be_u32(bytes, 4, "idx header")? as usize;
            let rows = be_u32(bytes, 8, "idx header")? as usize;
            let cols = be_u32(bytes, 12, "idx header")? as usize;
            let len = count * rows * cols;
            let body = bytes.get(16..16 + len).ok_or(LabError::Truncated {
                what: "idx image data".into(),
                needed: 16 + len,
                found: bytes.len(),
            })?;
            let data = body.iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(IdxData::Images {
                pixels: Tensor::new(vec![count, rows * cols], data)?,
                rows,
                cols,
            })
        }
        IDX_LABELS_MAGIC => {
            let count = be_u32(bytes, 4, "idx header")? as usize;
            let body = bytes.get(8..8 + count).ok_or(LabError::Truncated {
                what: "idx label data".into(),
                needed: 8 + count,
                found: bytes.len(),
            })?;
            Ok(IdxData::Labels(body.to_vec()))
        }
        other => Err(LabError::Format {
            what: "idx file".into(),
            detail: format!("unexpected magic number {other:#010x}"),
        }),
    }
}

pub fn load_idx(path: &Path) -> Result<IdxData> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    parse_idx(&bytes).map_err(|e| match e {
        LabError::Format { what, detail } => LabError::Format {
            what: format!("{what} {}", path.display()),
            detail,
        },
        other => other,
    })
}

/// Loads the first `limit` images and labels whose label is below `classes`.
pub fn load_idx_dataset(images: &Path, labels: &Path, classes: usize, limit: usize) -> Result<Dataset> {
    let IdxData::Images { pixels, rows, cols } = load_idx(images)? else {
        return Err(LabError::Format {
            what: images.display().to_string(),
            detail: "expected an image file".into(),
        });
    };
    let IdxData::Labels(ys) = load_idx(labels)? else {
        return Err(LabError::Format {
            what: labels.display().to_string(),
            detail: "expected a label file".into(),
        });
    };
    if ys.len() != pixels.rows() {
        return Err(LabError::dimension("idx label count", pixels.rows(), ys.len()));
    }
    let keep: Vec<usize> = (0..ys.len())
        .filter(|&i| (ys[i] as usize) < classes)
        .take(limit)
        .collect();
    let inputs = pixels.select_rows(&keep);
    let labels = keep.iter().map(|&i| ys[i] as usize).collect();
    Dataset::new(inputs, labels, rows, cols, classes)
}

/// Writes `images` (`N x (channels*height*width)`, channel-major per image) as
/// one PNG with `cols` tiles per row. Pixel value `round(255 * clamp(v, 0, 1))`.
pub fn save_png_grid(images: &Tensor, height: usize, width: usize, channels: usize, cols: usize, path: &Path) -> Result<()> {
    if cols == 0 {
        return Err(LabError::InvalidArgument("grid needs at least one column".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(LabError::InvalidArgument(format!("{channels} channels; expected 1 or 3")));
    }
    let per = channels * height * width;
    if images.row_len() != per {
        return Err(LabError::dimension("png grid tile", per, images.row_len()));
    }
    let n = images.rows();
    let grid_rows = n.div_ceil(cols).max(1);
    let (w_px, h_px) = (cols * width, grid_rows * height);
    let mut buf = vec![0u8; w_px * h_px * channels];
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        let img = images.row(i);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    let v = img[(ch * height + r) * width + c];
                    let px = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
                    let (y, x) = (gy * height + r, gx * width + c);
                    buf[(y * w_px + x) * channels + ch] = px;
                }
            }
        }
    }
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w_px as u32, h_px as u32);
    enc.set_color(if channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| LabError::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&buf).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Reads back `count` tiles written by [`save_png_grid`], as values in `[0, 1]`.
pub fn load_png_grid(path: &Path, height: usize, width: usize, count: usize) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let to_io = |e: png::DecodingError| LabError::io(path, std::io::Error::other(e));
    let mut reader = decoder.read_info().map_err(to_io)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(to_io)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(LabError::Format {
                what: path.display().to_string(),
                detail: format!("unsupported color type {other:?}"),
            })
        }
    };
    let w_px = info.width as usize;
    let cols = w_px / width;
    if cols == 0 {
        return Err(LabError::dimension("png grid width", width, w_px));
    }
    let mut data = Vec::with_capacity(count * channels * height * width);
    for i in 0..count {
        let (gy, gx) = (i / cols, i % cols);
        for ch in 0..channels {
            for r in 0..height {
                for c in 0..width {
                    let (y, x) = (gy * height + r, gx * width + c);
                    let idx = (y * w_px + x) * channels + ch;
                    let px = *buf.get(idx).ok_or(LabError::Truncated {
                        what: "png grid".into(),
                        needed: idx + 1,
                        found: buf.len(),
                    })?;
                    data.push(f64::from(px) / 255.0);
                }
            }
        }
    }
    Tensor::new(vec![count, channels * height * width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_fixture() -> Vec<u8> {
        // 4 images of 2x3, pixel values 0..=23 scaled by 10.
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0, 3];
        b.extend((0u8..24).map(|v| v * 10));
        b
    }

    #[test]
    fn parses_hand_built_image_file() {
        let IdxData::Images { pixels, rows, cols } = parse_idx(&image_fixture()).unwrap() else {
            panic!("expected images");
        };
        assert_eq!((rows, cols), (2, 3));
        assert_eq!(pixels.shape(), &[4, 6]);
        assert_eq!(pixels.row(1)[0], 60.0 / 255.0);
        assert_eq!(pixels.row(3)[5], 230.0 / 255.0);
    }

    #[test]
    fn parses_labels() {
        let b = [0u8, 0, 8, 1, 0, 0, 0, 3, 7, 0, 2];
        assert_eq!(parse_idx(&b).unwrap(), IdxData::Labels(vec![7, 0, 2]));
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let mut b = image_fixture();
        b[3] = 0x04;
        assert!(matches!(parse_idx(&b), Err(LabError::Format { .. })));
        assert!(matches!(parse_idx(&[]), Err(LabError::Truncated { .. })));
        let short = &image_fixture()[..30];
        assert!(matches!(parse_idx(short), Err(LabError::Truncated { .. })));
    }
}
