//! Feature-matrix persistence and normalization.
//!
//! Per-point feature matrices travel in a small binary container: magic
//! bytes `SAF1`, little-endian u32 row count, little-endian u32 dimension,
//! then `rows * dim` little-endian 32-bit floats in row-major order. Any
//! finite payload round-trips bit-exactly (negative zeros and subnormals
//! included); NaN and infinity are rejected when reading because they
//! silently poison cosine similarities downstream.
//!
//! A plain-text `key=value` sidecar (`<file>.meta`) carries free-form
//! metadata such as the source mesh path or image height/width.

use std::collections::BTreeMap;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SAF1";

/// Writes a feature matrix in the binary container format. The payload is
/// stored as 32-bit floats regardless of the in-memory scalar type.
pub fn save_features<T: Scalar>(m: &Matrix<T>, path: &Path) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidArgument(
            "refusing to write an empty feature matrix".into(),
        ));
    }
    if m.rows() > u32::MAX as usize || m.cols() > u32::MAX as usize {
        return Err(Error::InvalidArgument("matrix too large for the container".into()));
    }
    let mut bytes = Vec::with_capacity(12 + m.data().len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        let f = v.to_f32();
        if !f.is_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite value while writing {}",
                path.display()
            )));
        }
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a feature matrix written by [`save_features`].
pub fn load_features<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    parse_features(&bytes, path)
}

pub(crate) fn parse_features<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Matrix<T>> {
    if bytes.len() < 12 {
        return Err(Error::parse(path, "file too short for a feature header".to_string()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::parse(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                &bytes[0..4],
                std::str::from_utf8(MAGIC).unwrap()
            ),
        ));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::parse(path, format!("degenerate shape {rows}x{cols}")));
    }
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::parse(path, format!("shape {rows}x{cols} overflows")))?;
    let want = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(12))
        .ok_or_else(|| Error::parse(path, format!("shape {rows}x{cols} overflows")))?;
    if bytes.len() != want {
        return Err(Error::parse(
            path,
            format!(
                "payload holds {} floats but header claims {rows}x{cols} = {count}",
                (bytes.len().saturating_sub(12)) / 4
            ),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = 12 + 4 * i;
        let f = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !f.is_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite value at flat index {i} in {}",
                path.display()
            )));
        }
        data.push(T::from_f32(f));
    }
    Matrix::from_vec(rows, cols, data)
}

/// Path of the metadata sidecar belonging to a feature file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta");
    path.with_file_name(name)
}

/// Writes the `key=value` sidecar next to a feature file. Keys are written
/// in sorted order so the sidecar is deterministic.
pub fn write_meta(path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
    let side = meta_path(path);
    let mut text = String::new();
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::InvalidArgument(format!(
                "metadata key/value may not contain `=` in keys or newlines: {k}"
            )));
        }
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Reads the sidecar for a feature file; a missing sidecar is an empty map.
pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let side = meta_path(path);
    let text = match std::fs::read_to_string(&side) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(Error::io(&side, e)),
    };
    let mut map = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse(&side, format!("line {}: expected key=value", ln + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Scales every row to unit Euclidean norm. Rows with norm below 1e-12 are
/// rejected with their index.
pub fn normalize_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    let floor = T::from_f64(1e-12);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm < floor {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {norm}, cannot normalize"
            )));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// A dense per-pixel feature image with a foreground mask and colors.
/// Only masked pixels take part in matching; their feature rows are unit
/// normalized at assembly time.
#[derive(Debug, Clone)]
pub struct ImageFeatureMap<T> {
    pub height: usize,
    pub width: usize,
    /// `(height * width) x dim`, pixel `(y, x)` at row `y * width + x`.
    pub features: Matrix<T>,
    pub mask: Vec<bool>,
    /// RGB in `[0, 1]` per pixel.
    pub colors: Vec<[T; 3]>,
}

impl<T: Scalar> ImageFeatureMap<T> {
    pub fn foreground_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Assembles and validates a map from in-memory pieces, normalizing the
    /// masked feature rows.
    pub fn new(
        height: usize,
        width: usize,
        features: Matrix<T>,
        mask: Vec<bool>,
        colors: Vec<[T; 3]>,
    ) -> Result<Self> {
        let pixels = height * width;
        if features.rows() != pixels || mask.len() != pixels || colors.len() != pixels {
            return Err(Error::DimensionMismatch(format!(
                "image map: {pixels} pixels vs {} feature rows, {} mask entries, {} colors",
                features.rows(),
                mask.len(),
                colors.len()
            )));
        }
        let mut features = features;
        let floor = T::from_f64(1e-12);
        let mut foreground = 0usize;
        for (i, &masked) in mask.iter().enumerate() {
            if !masked {
                continue;
            }
            foreground += 1;
            let row = features.row_mut(i);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm < floor {
                return Err(Error::Degenerate(format!(
                    "foreground pixel {i} has a zero feature row"
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        if foreground == 0 {
            return Err(Error::InvalidArgument("no foreground pixels in mask".into()));
        }
        Ok(ImageFeatureMap {
            height,
            width,
            features,
            mask,
            colors,
        })
    }
}

/// Loads an image feature map from three files: an `SAF1` feature file with
/// `height`/`width` in its sidecar, a grayscale mask image (nonzero =
/// foreground), and a color image of the same size.
pub fn read_image_feature_map<T: Scalar>(
    feature_path: &Path,
    mask_path: &Path,
    color_path: &Path,
) -> Result<ImageFeatureMap<T>> {
    let features: Matrix<T> = load_features(feature_path)?;
    let meta = read_meta(feature_path)?;
    let height: usize = meta
        .get("height")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| {
            Error::parse(
                feature_path,
                "sidecar must define `height` for an image feature map".to_string(),
            )
        })?;
    let width: usize = meta
        .get("width")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| {
            Error::parse(
                feature_path,
                "sidecar must define `width` for an image feature map".to_string(),
            )
        })?;
    if features.rows() != height * width {
        return Err(Error::DimensionMismatch(format!(
            "feature file has {} rows but sidecar claims {height}x{width}",
            features.rows()
        )));
    }

    let mask_img = image::open(mask_path)
        .map_err(|e| Error::parse(mask_path, format!("cannot decode mask: {e}")))?
        .to_luma8();
    if (mask_img.width() as usize, mask_img.height() as usize) != (width, height) {
        return Err(Error::DimensionMismatch(format!(
            "mask is {}x{} but features claim {width}x{height}",
            mask_img.width(),
            mask_img.height()
        )));
    }
    let mask: Vec<bool> = mask_img.pixels().map(|p| p.0[0] != 0).collect();

    let color_img = image::open(color_path)
        .map_err(|e| Error::parse(color_path, format!("cannot decode color image: {e}")))?
        .to_rgb8();
    if (color_img.width() as usize, color_img.height() as usize) != (width, height) {
        return Err(Error::DimensionMismatch(format!(
            "color image is {}x{} but features claim {width}x{height}",
            color_img.width(),
            color_img.height()
        )));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let colors: Vec<[T; 3]> = color_img
        .pixels()
        .map(|p| {
            [
                T::from_f64(p.0[0] as f64) * scale,
                T::from_f64(p.0[1] as f64) * scale,
                T::from_f64(p.0[2] as f64) * scale,
            ]
        })
        .collect();

    ImageFeatureMap::new(height, width, features, mask, colors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact_for_tricky_floats() {
        let values: Vec<f32> = vec![
            0.0,
            -0.0,
            1.0,
            -1.0,
            f32::MIN_POSITIVE,
            f32::MIN_POSITIVE / 2.0, // subnormal
            -f32::MIN_POSITIVE / 4.0,
            f32::MAX,
            f32::MIN,
            1.000_000_1,
            std::f32::consts::PI,
            -std::f32::consts::E,
        ];
        let m = Matrix::from_vec(3, 4, values.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.saf1");
        save_features(&m, &path).unwrap();
        let back: Matrix<f32> = load_features(&path).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn round_trip_any_finite_payload(bits in proptest::collection::vec(any::<u32>(), 6)) {
            let vals: Vec<f32> = bits
                .iter()
                .map(|&b| {
                    let f = f32::from_bits(b);
                    if f.is_finite() { f } else { 0.25 }
                })
                .collect();
            let m = Matrix::from_vec(2, 3, vals).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.saf1");
            save_features(&m, &path).unwrap();
            let back: Matrix<f32> = load_features(&path).unwrap();
            for (a, b) in m.data().iter().zip(back.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.saf1");
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_features::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.saf1");
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&10u32.to_le_bytes());
        bytes.extend_from_slice(&10u32.to_le_bytes());
        for _ in 0..50 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let err = load_features::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("50"), "{err}");
    }

    #[test]
    fn non_finite_payload_is_rejected_at_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.saf1");
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(load_features::<f32>(&path).is_err());
    }

    #[test]
    fn normalize_rows_matches_analytic_case_and_is_idempotent() {
        let m = Matrix::from_vec(1, 2, vec![3.0f64, 4.0]).unwrap();
        let n = normalize_rows(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-12);
        let nn = normalize_rows(&n).unwrap();
        for (a, b) in n.data().iter().zip(nn.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_rejects_zero_rows_with_index() {
        let m = Matrix::from_vec(2, 2, vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        let err = normalize_rows(&m).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn meta_round_trips_and_missing_meta_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.saf1");
        let mut meta = BTreeMap::new();
        meta.insert("height".to_string(), "4".to_string());
        meta.insert("width".to_string(), "8".to_string());
        meta.insert("mesh".to_string(), "shapes/a.obj".to_string());
        write_meta(&path, &meta).unwrap();
        assert_eq!(read_meta(&path).unwrap(), meta);
        assert!(read_meta(&dir.path().join("other.saf1")).unwrap().is_empty());
    }

    #[test]
    fn image_map_reads_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let (h, w, d) = (2usize, 3usize, 4usize);
        let feat_path = dir.path().join("img.saf1");
        let mut data = Vec::new();
        for i in 0..h * w * d {
            data.push(0.1 + i as f32);
        }
        save_features(&Matrix::from_vec(h * w, d, data).unwrap(), &feat_path).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("height".into(), h.to_string());
        meta.insert("width".into(), w.to_string());
        write_meta(&feat_path, &meta).unwrap();

        let mask_path = dir.path().join("mask.png");
        let mut mask = image::GrayImage::new(w as u32, h as u32);
        mask.put_pixel(0, 0, image::Luma([255]));
        mask.put_pixel(2, 1, image::Luma([7]));
        mask.save(&mask_path).unwrap();

        let color_path = dir.path().join("color.png");
        let mut color = image::RgbImage::new(w as u32, h as u32);
        color.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        color.save(&color_path).unwrap();

        let map: ImageFeatureMap<f32> =
            read_image_feature_map(&feat_path, &mask_path, &color_path).unwrap();
        assert_eq!(map.foreground_count(), 2);
        assert_eq!(map.foreground_indices(), vec![0, 5]);
        // Masked rows are unit normalized, unmasked rows untouched.
        let n0: f32 = map.features.row(0).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n0 - 1.0).abs() < 1e-6);
        assert!(map.features.get(1, 0) > 1.0);
        assert!((map.colors[0][0] - 1.0).abs() < 1e-6);
        assert_eq!(map.colors[1][0], 0.0);
    }

    #[test]
    fn all_background_mask_is_an_error() {
        let m = Matrix::from_vec(4, 2, vec![1.0f32; 8]).unwrap();
        let err = ImageFeatureMap::new(2, 2, m, vec![false; 4], vec![[0.0; 3]; 4]).unwrap_err();
        assert!(err.to_string().contains("foreground"), "{err}");
    }
}
