//! Reader for the IDX format used by the MNIST distribution.
//!
//! Layout: two zero bytes, a type code, a dimension count, then one
//! big-endian `u32` per dimension followed by the raw data. Only unsigned
//! byte data (type `0x08`) is supported.

use std::path::Path;

use super::{Dataset, NumericsError};

const TYPE_U8: u8 = 0x08;

/// A decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Number of items along the first dimension.
    pub fn count(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Elements per item (product of the trailing dimensions).
    pub fn item_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    /// Values scaled from `0..=255` into `[0, 1]`.
    pub fn features(&self) -> Vec<f32> {
        self.data.iter().map(|&b| b as f32 / 255.0).collect()
    }
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray, NumericsError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| NumericsError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, NumericsError> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), format!("need 4 magic bytes, file has {}", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, "magic must start with two zero bytes"));
    }
    if bytes[2] != TYPE_U8 {
        return Err(format_err(2, format!("unsupported data type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(format_err(3, "dimension count is zero"));
    }
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(format_err(
            bytes.len(),
            format!("header needs {header_len} bytes, file has {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(4, "dimension product overflows"))?;
    let actual = bytes.len() - header_len;
    if actual != expected {
        return Err(format_err(
            header_len + actual.min(expected),
            format!("payload expected {expected} bytes, found {actual}"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header_len..].to_vec(),
    })
}

/// Pairs an image file and a label file into a dataset with features in
/// `[0, 1]`.
pub fn load_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    classes: usize,
) -> Result<Dataset, NumericsError> {
    let images = read_idx(images)?;
    let labels = read_idx(labels)?;
    if labels.dims.len() != 1 || labels.count() != images.count() {
        return Err(NumericsError::Shape(format!(
            "{} labels for {} images",
            labels.count(),
            images.count()
        )));
    }
    let ys = labels.data.iter().map(|&b| b as usize).collect();
    Dataset::new(images.features(), images.item_len(), classes, ys)
}

fn format_err(offset: usize, msg: impl Into<String>) -> NumericsError {
    NumericsError::Format {
        offset,
        msg: msg.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dims: &[u32]) -> Vec<u8> {
        let mut v = vec![0, 0, TYPE_U8, dims.len() as u8];
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn two_mnist_images() {
        let mut bytes = header(&[2, 28, 28]);
        assert_eq!(&bytes[..4], &0x0000_0803u32.to_be_bytes());
        bytes.extend((0..1568).map(|i| (i % 256) as u8));
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.count(), 2);
        assert_eq!(arr.item_len(), 784);
        let f = arr.features();
        assert_eq!(f.len(), 1568);
        assert_eq!(f[255], 1.0);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let mut bytes = header(&[2, 28, 28]);
        bytes.extend(vec![0u8; 1000]);
        match parse_idx(&bytes) {
            Err(NumericsError::Format { offset, msg }) => {
                assert_eq!(offset, 16 + 1000);
                assert!(msg.contains("1568") && msg.contains("1000"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_bytes_scale_to_zero() {
        let mut bytes = header(&[3, 4]);
        bytes.extend(vec![0u8; 12]);
        assert!(parse_idx(&bytes).unwrap().features().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]),
            Err(NumericsError::Format { offset: 0, .. })
        ));
        assert!(matches!(
            parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]),
            Err(NumericsError::Format { offset: 2, .. })
        ));
        assert!(parse_idx(&[0, 0]).is_err());
    }

    #[test]
    fn dataset_from_files() {
        let dir = std::env::temp_dir().join(format!("idx-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = header(&[2, 2, 2]);
        img.extend([0, 255, 0, 255, 255, 0, 255, 0]);
        let mut lab = header(&[2]);
        lab.extend([1, 0]);
        std::fs::write(dir.join("img"), img).unwrap();
        std::fs::write(dir.join("lab"), lab).unwrap();
        let d = load_idx_dataset(dir.join("img"), dir.join("lab"), 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 4);
        assert_eq!(d.labels(), &[1, 0]);
        std::fs::remove_dir_all(dir).ok();
    }
}
