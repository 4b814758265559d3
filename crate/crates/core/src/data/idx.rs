//! The IDX container: a big-endian header (`0x00 0x00 0x08 ndim`, then one
//! `u32` per dimension) followed by unsigned bytes.

use std::fs;
use std::path::Path;

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: format!("{}: {}", path.display(), message.into()),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Parses an IDX byte buffer with the expected magic, returning the
/// dimensions and the payload.
pub fn parse(bytes: &[u8], magic: u32, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = read_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format_err(
            path,
            0,
            format!("magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(format_err(
            path,
            start + payload.len().min(expected),
            format!("payload holds {} bytes, header implies {expected}", payload.len()),
        ));
    }
    Ok((dims, payload.to_vec()))
}

/// Loads images (scaled to `[0, 1]`) and, when given, labels. Labels are
/// optional so that label-free importance estimation can run on bare images.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let raw = fs::read(images).map_err(|e| Error::io(images, e))?;
    let (dims, pixels) = parse(&raw, IMAGES_MAGIC, images)?;
    let (m, h, w) = (dims[0], dims[1], dims[2]);
    if m == 0 || h == 0 || w == 0 {
        return Err(format_err(images, 4, format!("empty image dimensions {dims:?}")));
    }
    let tensor = Tensor::new(
        &[m, 1, h, w],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )?;
    let labels = match labels {
        None => None,
        Some(path) => {
            let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
            let (dims, values) = parse(&raw, LABELS_MAGIC, path)?;
            if dims[0] != m {
                return Err(format_err(
                    path,
                    4,
                    format!("{} labels for {m} images", dims[0]),
                ));
            }
            Some(values.into_iter().map(usize::from).collect::<Vec<_>>())
        }
    };
    let num_classes = labels
        .as_ref()
        .and_then(|l| l.iter().max())
        .map_or(0, |&c| c + 1);
    Dataset::new(tensor, labels, num_classes, Split::Train, 0)
}

fn encode(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Writes single-channel images quantised to bytes, plus labels if present.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: Option<&Path>) -> Result<()> {
    let (m, c, h, w) = dataset.images.dims4()?;
    if c != 1 {
        return Err(Error::Input(format!(
            "IDX export supports single-channel images, got {c} channels"
        )));
    }
    let pixels: Vec<u8> = dataset
        .images
        .data()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    fs::write(images, encode(IMAGES_MAGIC, &[m, h, w], &pixels)).map_err(|e| Error::io(images, e))?;
    if let Some(path) = labels {
        let values = dataset.labels()?;
        if let Some(&big) = values.iter().find(|&&l| l > 255) {
            return Err(Error::Input(format!("label {big} does not fit in a byte")));
        }
        let bytes: Vec<u8> = values.iter().map(|&l| l as u8).collect();
        fs::write(path, encode(LABELS_MAGIC, &[m], &bytes)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_of_byte_valued_images() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        let pixels: Vec<f32> = (0..3 * 4 * 5).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let d = Dataset::new(
            Tensor::new(&[3, 1, 4, 5], pixels).unwrap(),
            Some(vec![2, 0, 1]),
            3,
            Split::Train,
            0,
        )
        .unwrap();
        write_idx(&d, &ip, Some(&lp)).unwrap();
        let back = load_idx(&ip, Some(&lp)).unwrap();
        assert_eq!(back.images, d.images);
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.num_classes, 3);
        let bare = load_idx(&ip, None).unwrap();
        assert!(bare.labels.is_none());
    }

    #[test]
    fn header_bytes_are_big_endian() {
        let bytes = encode(IMAGES_MAGIC, &[2, 1, 1], &[0, 255]);
        assert_eq!(&bytes[..8], &[0, 0, 8, 3, 0, 0, 0, 2]);
    }

    #[test]
    fn malformed_files_report_offsets() {
        let p = Path::new("x");
        let bad_magic = encode(LABELS_MAGIC, &[1], &[0]);
        assert!(matches!(parse(&bad_magic, IMAGES_MAGIC, p), Err(Error::Format { offset: 0, .. })));
        let short = encode(IMAGES_MAGIC, &[2, 2, 2], &[0; 5]);
        assert!(matches!(parse(&short, IMAGES_MAGIC, p), Err(Error::Format { offset: 21, .. })));
        assert!(matches!(parse(&[0, 0, 8], IMAGES_MAGIC, p), Err(Error::Format { .. })));
    }
}
