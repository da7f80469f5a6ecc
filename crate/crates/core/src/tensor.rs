//! Dense weight matrices, named layer sets and their NPY v1.0 on-disk form.
//!
//! Values are always held as `f64`. Files may be `<f4` or `<f8`; `<f4`
//! payloads are widened on load, which is exact.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const NPY_ALIGN: usize = 64;

/// Element type used when writing NPY files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F4,
    #[default]
    F8,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F4 => "<f4",
            Dtype::F8 => "<f8",
        }
    }

    fn item_size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f4" | "f32" => Ok(Dtype::F4),
            "f8" | "f64" => Ok(Dtype::F8),
            other => Err(Error::Argument(format!("unknown dtype {other:?} (use f4 or f8)"))),
        }
    }
}

/// A named dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    name: String,
}

impl WeightMatrix {
    /// Builds a matrix, checking the shape and that every value is finite.
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at ({}, {})",
                data[pos],
                pos / cols,
                pos % cols
            )));
        }
        Ok(WeightMatrix {
            rows,
            cols,
            data,
            name: name.into(),
        })
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        WeightMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            name: name.into(),
        }
    }

    /// Builds a matrix from a function of `(row, col)`. Panics on non-finite output.
    pub fn from_fn(name: impl Into<String>, rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        WeightMatrix::new(name, rows, cols, data).expect("from_fn produced an invalid matrix")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Row-major values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable row-major values. Callers must keep every value finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> WeightMatrix {
        let data = self.data.iter().map(|v| v * factor).collect();
        WeightMatrix::new(self.name.clone(), self.rows, self.cols, data).expect("scaling produced non-finite values")
    }

    /// Converts to a column-major nalgebra matrix.
    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_dmatrix(name: impl Into<String>, m: &nalgebra::DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)]);
            }
        }
        WeightMatrix::new(name, rows, cols, data)
    }
}

/// An ordered collection of uniquely named matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerSet {
    layers: Vec<WeightMatrix>,
}

impl LayerSet {
    /// Rejects duplicate names; keeps the given order.
    pub fn new(layers: Vec<WeightMatrix>) -> Result<Self> {
        let mut seen = HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.name()) {
                return Err(Error::Argument(format!("duplicate layer name {:?}", layer.name())));
            }
        }
        Ok(LayerSet { layers })
    }

    pub fn layers(&self) -> &[WeightMatrix] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<WeightMatrix> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&WeightMatrix> {
        self.layers.iter().find(|l| l.name() == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name())
    }
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct NpyHeader {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Pulls the raw text of a value following `'key':` in a Python dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let needle_single = format!("'{key}'");
    let needle_double = format!("\"{key}\"");
    let start = header
        .find(&needle_single)
        .map(|p| p + needle_single.len())
        .or_else(|| header.find(&needle_double).map(|p| p + needle_double.len()))?;
    let rest = header[start..].trim_start();
    let rest = rest.strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else if let Some(quote) = rest.chars().next().filter(|c| *c == '\'' || *c == '"') {
        rest[1..].find(quote)? + 2
    } else {
        rest.find([',', '}']).unwrap_or(rest.len())
    };
    Some(rest[..end].trim())
}

fn parse_header(path: &Path, text: &str) -> Result<NpyHeader> {
    let text = text.trim_end_matches(['\n', ' ', '\0']);
    if !(text.starts_with('{') && text.ends_with('}')) {
        return Err(format_error(path, "header is not a dict literal"));
    }
    let descr = dict_value(text, "descr").ok_or_else(|| format_error(path, "missing 'descr'"))?;
    let descr = descr.trim_matches(['\'', '"']).to_string();
    let fortran = dict_value(text, "fortran_order").ok_or_else(|| format_error(path, "missing 'fortran_order'"))?;
    let fortran_order = match fortran {
        "False" => false,
        "True" => true,
        other => return Err(format_error(path, format!("bad fortran_order {other:?}"))),
    };
    let shape_text = dict_value(text, "shape").ok_or_else(|| format_error(path, "missing 'shape'"))?;
    let inner = shape_text
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| format_error(path, format!("bad shape {shape_text:?}")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_error(path, format!("bad shape {shape_text:?}: {e}")))?;
    Ok(NpyHeader {
        descr,
        fortran_order,
        shape,
    })
}

/// Reads a 2-D `<f4`/`<f8` NPY v1.0 file. The matrix is named after the file stem.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<WeightMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(format_error(path, "missing \\x93NUMPY magic"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(format_error(
            path,
            format!("unsupported NPY version {}.{} (only 1.0)", bytes[6], bytes[7]),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(format_error(path, "truncated header"));
    }
    let header_text =
        std::str::from_utf8(&bytes[10..data_start]).map_err(|_| format_error(path, "header is not ASCII"))?;
    let header = parse_header(path, header_text)?;

    let dtype = match header.descr.as_str() {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        _ => {
            return Err(Error::UnsupportedDtype {
                path: path.to_path_buf(),
                descr: header.descr,
            })
        }
    };
    if header.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "{} holds a {}-D array, expected 2-D",
            path.display(),
            header.shape.len()
        )));
    }
    if header.fortran_order {
        return Err(format_error(path, "fortran_order=True is not supported"));
    }
    let (rows, cols) = (header.shape[0], header.shape[1]);
    let payload = &bytes[data_start..];
    let expected = rows * cols * dtype.item_size();
    if payload.len() != expected {
        return Err(format_error(
            path,
            format!("payload is {} bytes, shape needs {expected}", payload.len()),
        ));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    WeightMatrix::new(name, rows, cols, data).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn encode_npy(m: &WeightMatrix, dtype: Dtype) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}, {}), }}",
        dtype.descr(),
        m.rows(),
        m.cols()
    );
    // magic(6) + version(2) + length(2) + dict + padding + '\n' is a multiple of 64.
    let unpadded = 10 + dict.len() + 1;
    let padding = (NPY_ALIGN - unpadded % NPY_ALIGN) % NPY_ALIGN;
    let header_len = dict.len() + padding + 1;

    let mut out = Vec::with_capacity(10 + header_len + m.len() * dtype.item_size());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', padding));
    out.push(b'\n');
    match dtype {
        Dtype::F4 => {
            for v in m.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Dtype::F8 => {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Writes `m` as an NPY v1.0 file at the requested precision.
pub fn write_matrix(m: &WeightMatrix, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_npy(m, dtype);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads every file in `dir` whose name matches the glob `pattern`, sorted by layer name.
pub fn load_layer_set(dir: impl AsRef<Path>, pattern: &str) -> Result<LayerSet> {
    let dir = dir.as_ref();
    let matcher =
        glob::Pattern::new(pattern).map_err(|e| Error::Argument(format!("invalid glob {pattern:?}: {e}")))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if matcher.matches(name) {
                paths.push(path);
            }
        }
    }
    if paths.is_empty() {
        return Err(Error::EmptySet {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
        });
    }
    let mut layers = paths.iter().map(read_matrix).collect::<Result<Vec<_>>>()?;
    layers.sort_by(|a, b| a.name().cmp(b.name()));
    LayerSet::new(layers)
}

/// Writes each layer to `dir/<name>.npy`, creating `dir` if needed.
pub fn save_layer_set(set: &LayerSet, dir: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let dir = dir.as_ref();
    if set.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for layer in set.layers() {
        write_matrix(layer, dir.join(format!("{}.npy", layer.name())), dtype)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_npy(descr: &str, shape: &str, payload: &[u8]) -> Vec<u8> {
        let dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
        let mut header = dict.into_bytes();
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(b' ');
        }
        header.push(b'\n');
        let mut out = b"\x93NUMPY\x01\x00".to_vec();
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn reads_f8_2x2() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = [1.0f64, 2.0, 3.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.path().join("w.npy");
        fs::write(&path, raw_npy("<f8", "(2, 2)", &payload)).unwrap();
        let m = read_matrix(&path).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.name(), "w");
    }

    #[test]
    fn f4_widening_keeps_f32_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        fs::write(&path, raw_npy("<f4", "(1, 1)", &0.1f32.to_le_bytes())).unwrap();
        let m = read_matrix(&path).unwrap();
        assert_eq!(m.get(0, 0), 0.1f32 as f64);
        assert_ne!(m.get(0, 0), 0.1);
    }

    #[test]
    fn three_d_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        fs::write(&path, raw_npy("<f8", "(1, 1, 2)", &[0u8; 16])).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_other_dtypes_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.npy");
        fs::write(&path, raw_npy("<i8", "(1, 1)", &[0u8; 8])).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::UnsupportedDtype { .. })));
        fs::write(&path, raw_npy(">f8", "(1, 1)", &[0u8; 8])).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::UnsupportedDtype { .. })));
        fs::write(&path, b"PK\x03\x04 not an npy file").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format { .. })));
        let mut truncated = raw_npy("<f8", "(2, 2)", &[0u8; 16]);
        truncated.truncate(truncated.len() - 1);
        fs::write(&path, truncated).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.npy");
        let payload: Vec<u8> = [1.0f64, f64::NAN].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, raw_npy("<f8", "(1, 2)", &payload)).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Data(_))));
    }

    #[test]
    fn header_is_aligned_and_newline_terminated() {
        let m = WeightMatrix::new("x", 3, 7, vec![0.5; 21]).unwrap();
        for dtype in [Dtype::F4, Dtype::F8] {
            let bytes = encode_npy(&m, dtype);
            let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
            assert_eq!((10 + header_len) % 64, 0);
            assert_eq!(bytes[10 + header_len - 1], b'\n');
            assert_eq!(bytes.len(), 10 + header_len + 21 * dtype.item_size());
        }
    }

    #[test]
    fn f8_round_trip_and_f4_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let m = WeightMatrix::new("r", 2, 2, vec![0.0, -1.5, 2.0, 3.0]).unwrap();
        let path = dir.path().join("r.npy");
        write_matrix(&m, &path, Dtype::F8).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);

        let m = WeightMatrix::new("r", 1, 3, vec![0.1, 1.0 / 3.0, -2.7]).unwrap();
        write_matrix(&m, &path, Dtype::F4).unwrap();
        let back = read_matrix(&path).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(*b, (*a as f32) as f64);
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let m = WeightMatrix::zeros("z", 1, 1);
        let err = write_matrix(&m, "/nonexistent-dir/sub/z.npy", Dtype::F8).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn layer_set_load_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        for i in (0..16).rev() {
            let m = WeightMatrix::from_fn(format!("ffn_{i:02}"), 2, 3, |r, c| (i * 10 + r * 3 + c) as f64);
            write_matrix(&m, dir.path().join(format!("ffn_{i:02}.npy")), Dtype::F8).unwrap();
        }
        write_matrix(&WeightMatrix::zeros("attn", 1, 1), dir.path().join("attn.npy"), Dtype::F8).unwrap();
        let set = load_layer_set(dir.path(), "ffn_*.npy").unwrap();
        assert_eq!(set.len(), 16);
        let names: Vec<_> = set.names().collect();
        let expected: Vec<String> = (0..16).map(|i| format!("ffn_{i:02}")).collect();
        assert_eq!(names, expected);
        assert_eq!(set, load_layer_set(dir.path(), "ffn_*.npy").unwrap());

        let one = load_layer_set(dir.path(), "attn.npy").unwrap();
        assert_eq!(one.len(), 1);
        assert!(matches!(
            load_layer_set(dir.path(), "nothing_*.npy"),
            Err(Error::EmptySet { .. })
        ));
    }

    #[test]
    fn layer_set_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layers: Vec<_> = (0..16)
            .map(|i| WeightMatrix::from_fn(format!("ffn_{i:02}"), 3, 2, |r, c| (r as f64 - c as f64) * 0.37 + i as f64))
            .collect();
        let set = LayerSet::new(layers).unwrap();
        save_layer_set(&set, dir.path(), Dtype::F8).unwrap();
        assert_eq!(load_layer_set(dir.path(), "ffn_*.npy").unwrap(), set);

        let empty_dir = dir.path().join("empty");
        save_layer_set(&LayerSet::default(), &empty_dir, Dtype::F8).unwrap();
        assert!(!empty_dir.exists());
    }

    #[test]
    fn duplicate_names_rejected() {
        let a = WeightMatrix::zeros("a", 1, 1);
        assert!(matches!(LayerSet::new(vec![a.clone(), a]), Err(Error::Argument(_))));
    }

    #[test]
    fn constructor_validates() {
        assert!(matches!(WeightMatrix::new("x", 2, 2, vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(WeightMatrix::new("x", 0, 2, vec![]), Err(Error::Shape(_))));
        assert!(matches!(
            WeightMatrix::new("x", 1, 1, vec![f64::INFINITY]),
            Err(Error::Data(_))
        ));
    }
}
