//! IDX digit files and the glyph bank that textures squares.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::Rng;

use crate::error::{IoContext, MnistError};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const UBYTE: u8 = 0x08;
pub const MNIST_DIR_ENV: &str = "RFCNET_MNIST_DIR";

/// Pixels brighter than this count as stroke when a glyph becomes a mask.
pub const DEFAULT_MASK_THRESHOLD: f32 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dtype_code: u8,
    pub ndim: u8,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }
}

/// Decodes the magic number and dimensions.
pub fn parse_header(bytes: &[u8]) -> Result<IdxHeader, MnistError> {
    if bytes.len() < 4 {
        return Err(MnistError::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(MnistError::BadMagic(magic));
    }
    let (dtype_code, ndim) = (bytes[2], bytes[3]);
    if dtype_code != UBYTE {
        return Err(MnistError::UnsupportedDtype(dtype_code));
    }
    if magic != IMAGE_MAGIC && magic != LABEL_MAGIC {
        return Err(MnistError::BadMagic(magic));
    }
    let header_len = 4 + 4 * ndim as usize;
    if bytes.len() < header_len {
        return Err(MnistError::Truncated {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let dims: Vec<u32> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(MnistError::ZeroDim(i));
    }
    Ok(IdxHeader {
        magic,
        dtype_code,
        ndim,
        dims,
    })
}

/// Header plus the row-major unsigned-byte payload. Bytes past the declared
/// payload are ignored.
pub fn parse_idx(bytes: &[u8]) -> Result<(IdxHeader, Vec<u8>), MnistError> {
    let header = parse_header(bytes)?;
    let start = header.encoded_len();
    let end = start + header.element_count();
    if bytes.len() < end {
        return Err(MnistError::Truncated {
            expected: end,
            actual: bytes.len(),
        });
    }
    Ok((header, bytes[start..end].to_vec()))
}

pub fn serialize_idx(header: &IdxHeader, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.encoded_len() + data.len());
    out.extend_from_slice(&[0, 0, header.dtype_code, header.ndim]);
    for d in &header.dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Reads a file, transparently gunzipping it if it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, MnistError> {
    let raw = fs::read(path).at(path)?;
    Ok(gunzip_if_needed(raw).at(path)?)
}

fn gunzip_if_needed(raw: Vec<u8>) -> std::io::Result<Vec<u8>> {
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// A digit image with intensities in `[0, 1]`, row-major `side x side`.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitGlyph {
    pub digit: u8,
    pub side: usize,
    pub image: Vec<f32>,
}

impl DigitGlyph {
    /// Crops to the stroke bounding box, pads it to a centered square and
    /// area-resamples to `side x side`.
    pub fn fit(&self, side: usize) -> DigitGlyph {
        let n = self.side;
        let on = |y: usize, x: usize| self.image[y * n + x] > 0.0;
        let rows: Vec<usize> = (0..n).filter(|&y| (0..n).any(|x| on(y, x))).collect();
        let cols: Vec<usize> = (0..n).filter(|&x| (0..n).any(|y| on(y, x))).collect();
        let (Some(&y0), Some(&y1), Some(&x0), Some(&x1)) = (rows.first(), rows.last(), cols.first(), cols.last()) else {
            return DigitGlyph {
                digit: self.digit,
                side,
                image: vec![0.0; side * side],
            };
        };
        let extent = (y1 - y0 + 1).max(x1 - x0 + 1);
        let cy = (y0 + y1) as f64 / 2.0;
        let cx = (x0 + x1) as f64 / 2.0;
        let top = cy - (extent as f64 - 1.0) / 2.0;
        let left = cx - (extent as f64 - 1.0) / 2.0;
        let sample = |y: f64, x: f64| -> f64 {
            // source pixel containing (y, x) in continuous coordinates
            let (iy, ix) = (y.floor(), x.floor());
            if iy < 0.0 || ix < 0.0 || iy >= n as f64 || ix >= n as f64 {
                0.0
            } else {
                self.image[iy as usize * n + ix as usize] as f64
            }
        };
        // average over a supersampled grid covering each output pixel
        let sub = 4;
        let scale = extent as f64 / side as f64;
        let mut image = vec![0.0f32; side * side];
        for oy in 0..side {
            for ox in 0..side {
                let mut acc = 0.0;
                for sy in 0..sub {
                    for sx in 0..sub {
                        let y = top + (oy as f64 + (sy as f64 + 0.5) / sub as f64) * scale;
                        let x = left + (ox as f64 + (sx as f64 + 0.5) / sub as f64) * scale;
                        acc += sample(y, x);
                    }
                }
                image[oy * side + ox] = (acc / (sub * sub) as f64).clamp(0.0, 1.0) as f32;
            }
        }
        DigitGlyph {
            digit: self.digit,
            side,
            image,
        }
    }

    pub fn mask(&self, threshold: f32) -> Vec<bool> {
        self.image.iter().map(|&v| v > threshold).collect()
    }
}

/// Paired images and labels of one IDX split.
#[derive(Clone, Debug)]
pub struct GlyphSet {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl GlyphSet {
    pub fn from_idx(images: &[u8], labels: &[u8]) -> Result<Self, MnistError> {
        let (ih, pixels) = parse_idx(images)?;
        let (lh, labels) = parse_idx(labels)?;
        if ih.magic != IMAGE_MAGIC {
            return Err(MnistError::BadMagic(ih.magic));
        }
        if lh.magic != LABEL_MAGIC {
            return Err(MnistError::BadMagic(lh.magic));
        }
        let count = ih.dims[0] as usize;
        if count != labels.len() {
            return Err(MnistError::CountMismatch {
                images: count,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(MnistError::BadLabel(bad));
        }
        Ok(Self {
            rows: ih.dims[1] as usize,
            cols: ih.dims[2] as usize,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Glyph `i` normalized to `[0, 1]`, padded to a square if needed.
    pub fn glyph(&self, i: usize) -> DigitGlyph {
        let side = self.rows.max(self.cols);
        let mut image = vec![0.0; side * side];
        let px = &self.pixels[i * self.rows * self.cols..(i + 1) * self.rows * self.cols];
        for y in 0..self.rows {
            for x in 0..self.cols {
                image[y * side + x] = px[y * self.cols + x] as f32 / 255.0;
            }
        }
        DigitGlyph {
            digit: self.labels[i],
            side,
            image,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GlyphSplit {
    Train,
    Test,
}

impl GlyphSplit {
    fn stem(self) -> &'static str {
        match self {
            GlyphSplit::Train => "train",
            GlyphSplit::Test => "t10k",
        }
    }

    fn name(self) -> &'static str {
        match self {
            GlyphSplit::Train => "train",
            GlyphSplit::Test => "test",
        }
    }
}

/// Train and test glyphs; read-only after loading.
#[derive(Clone, Debug, Default)]
pub struct GlyphBank {
    train: Option<GlyphSet>,
    test: Option<GlyphSet>,
}

const BUNDLED: [&[u8]; 4] = [
    include_bytes!("../../../assets/mnist-5k/train-images-idx3-ubyte.gz"),
    include_bytes!("../../../assets/mnist-5k/train-labels-idx1-ubyte.gz"),
    include_bytes!("../../../assets/mnist-5k/t10k-images-idx3-ubyte.gz"),
    include_bytes!("../../../assets/mnist-5k/t10k-labels-idx1-ubyte.gz"),
];

impl GlyphBank {
    pub fn new(train: Option<GlyphSet>, test: Option<GlyphSet>) -> Self {
        Self { train, test }
    }

    /// The 5,000-digit MNIST subset shipped with the crate (4,000 train, 1,000 test).
    pub fn bundled() -> Self {
        let set = |i: usize, l: usize| {
            let im = gunzip_if_needed(BUNDLED[i].to_vec()).expect("bundled images decompress");
            let lb = gunzip_if_needed(BUNDLED[l].to_vec()).expect("bundled labels decompress");
            GlyphSet::from_idx(&im, &lb).expect("bundled digits parse")
        };
        Self {
            train: Some(set(0, 1)),
            test: Some(set(2, 3)),
        }
    }

    /// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, MnistError> {
        let find = |name: String| -> PathBuf {
            let plain = dir.join(&name);
            if plain.exists() {
                plain
            } else {
                dir.join(format!("{name}.gz"))
            }
        };
        let load = |split: GlyphSplit| -> Result<GlyphSet, MnistError> {
            let s = split.stem();
            let images = read_maybe_gz(&find(format!("{s}-images-idx3-ubyte")))?;
            let labels = read_maybe_gz(&find(format!("{s}-labels-idx1-ubyte")))?;
            GlyphSet::from_idx(&images, &labels)
        };
        Ok(Self {
            train: Some(load(GlyphSplit::Train)?),
            test: Some(load(GlyphSplit::Test)?),
        })
    }

    /// `dir` if given, else `$RFCNET_MNIST_DIR`, else the bundled subset.
    pub fn resolve(dir: Option<&Path>) -> Result<Self, MnistError> {
        match dir {
            Some(d) => Self::load_dir(d),
            None => match std::env::var_os(MNIST_DIR_ENV) {
                Some(d) if !d.is_empty() => Self::load_dir(Path::new(&d)),
                _ => Ok(Self::bundled()),
            },
        }
    }

    pub fn split(&self, split: GlyphSplit) -> Result<&GlyphSet, MnistError> {
        let set = match split {
            GlyphSplit::Train => self.train.as_ref(),
            GlyphSplit::Test => self.test.as_ref(),
        };
        set.filter(|s| !s.is_empty())
            .ok_or_else(|| MnistError::SplitNotLoaded(split.name().into()))
    }

    /// Uniformly drawn glyph of `split`.
    pub fn sample_glyph<R: Rng + ?Sized>(&self, rng: &mut R, split: GlyphSplit) -> Result<DigitGlyph, MnistError> {
        let set = self.split(split)?;
        Ok(set.glyph(rng.gen_range(0..set.len())))
    }
}
