//! Patch datasets, images, sharding, synthetic data and on-disk formats.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictupdate::{DictMode, DictionaryPair, UpdateError};
use crate::numerics::{polar_factor, Mat};
use crate::rng::{gaussian, gaussian_mat, seeded, unit_column_mat};
use crate::sparse2d::{Entry, SparseCode};

pub const SDL_VERSION: u32 = 1;
pub const STORAGE_ORDER: &str = "column-major";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image {height}x{width} is too small for {m}x{m} patches")]
    ImageTooSmall { height: usize, width: usize, m: usize },
    #[error("stride must satisfy 1 <= stride <= m, got stride {stride} for m {m}")]
    InvalidStride { stride: usize, m: usize },
    #[error("cannot split {count} samples over {nodes} nodes")]
    TooManyNodes { nodes: usize, count: usize },
    #[error("invalid sparsity {s} for {n1}x{n2} codes")]
    InvalidSparsity { s: usize, n1: usize, n2: usize },
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("unsupported PGM maxval {0} (8-bit only)")]
    UnsupportedMaxVal(u32),
    #[error("unsupported container version {found} (expected {SDL_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dictionary(#[from] UpdateError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `N` real `m×m` training patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    m: usize,
    patches: Vec<Mat>,
}

impl PatchSet {
    pub fn new(m: usize, patches: Vec<Mat>) -> Result<Self, DataError> {
        if patches.is_empty() {
            return Err(DataError::Invalid("a patch set needs at least one patch".into()));
        }
        for (k, p) in patches.iter().enumerate() {
            if p.shape() != (m, m) {
                return Err(DataError::ShapeMismatch(format!("patch {k} is {:?}, expected {m}x{m}", p.shape())));
            }
            if !p.is_finite() {
                return Err(DataError::Invalid(format!("patch {k} has non-finite entries")));
            }
        }
        Ok(PatchSet { m, patches })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[Mat] {
        &self.patches
    }

    pub fn get(&self, k: usize) -> &Mat {
        &self.patches[k]
    }

    /// Uniform sample of `count` patches without replacement, in sampled order.
    pub fn sample(&self, count: usize, seed: u64) -> Result<PatchSet, DataError> {
        if count == 0 || count > self.len() {
            return Err(DataError::Invalid(format!("cannot sample {count} of {} patches", self.len())));
        }
        let mut rng = seeded(seed);
        let picked = rand::seq::index::sample(&mut rng, self.len(), count);
        Ok(PatchSet { m: self.m, patches: picked.into_iter().map(|k| self.patches[k].clone()).collect() })
    }

    /// Subtracts each patch's mean; returns the centered set and the means.
    pub fn remove_means(&self) -> (PatchSet, Vec<f64>) {
        let mut means = Vec::with_capacity(self.len());
        let patches = self
            .patches
            .iter()
            .map(|p| {
                let mean = patch_mean(p);
                means.push(mean);
                Mat::from_fn(self.m, self.m, |i, j| p[(i, j)] - mean)
            })
            .collect();
        (PatchSet { m: self.m, patches }, means)
    }

    /// All patch entries concatenated in storage order.
    pub fn payload(&self) -> Vec<f64> {
        self.patches.iter().flat_map(|p| p.as_slice().iter().copied()).collect()
    }
}

pub fn patch_mean(p: &Mat) -> f64 {
    p.as_slice().iter().sum::<f64>() / p.as_slice().len() as f64
}

/// Sample indices owned by one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub node_id: usize,
    /// Ascending global indices into the parent [`PatchSet`].
    pub sample_indices: Vec<usize>,
}

/// Balanced partition of `0..count` into `nodes` shards after a seeded
/// shuffle. The first `count % nodes` shards get one extra sample; indices in
/// each shard are sorted.
pub fn shard_indices(count: usize, nodes: usize, seed: u64) -> Result<Vec<Shard>, DataError> {
    if nodes == 0 || nodes > count {
        return Err(DataError::TooManyNodes { nodes, count });
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut seeded(seed));
    let base = count / nodes;
    let extra = count % nodes;
    let mut shards = Vec::with_capacity(nodes);
    let mut start = 0;
    for node_id in 0..nodes {
        let size = base + usize::from(node_id < extra);
        let mut sample_indices = order[start..start + size].to_vec();
        sample_indices.sort_unstable();
        shards.push(Shard { node_id, sample_indices });
        start += size;
    }
    Ok(shards)
}

pub fn shard_dataset(set: &PatchSet, nodes: usize, seed: u64) -> Result<Vec<Shard>, DataError> {
    shard_indices(set.len(), nodes, seed)
}

/// Concatenates per-band patch sets and assigns whole bands to nodes
/// (contiguous, balanced band counts).
pub fn shard_by_band(bands: &[PatchSet], nodes: usize) -> Result<(PatchSet, Vec<Shard>), DataError> {
    if bands.is_empty() {
        return Err(DataError::Invalid("no bands".into()));
    }
    if nodes == 0 || nodes > bands.len() {
        return Err(DataError::TooManyNodes { nodes, count: bands.len() });
    }
    let m = bands[0].m();
    let mut patches = Vec::new();
    let mut band_ranges = Vec::new();
    for band in bands {
        if band.m() != m {
            return Err(DataError::ShapeMismatch(format!("band patch size {} vs {m}", band.m())));
        }
        let start = patches.len();
        patches.extend(band.patches().iter().cloned());
        band_ranges.push(start..patches.len());
    }
    let band_shards = shard_contiguous(bands.len(), nodes);
    let shards = band_shards
        .into_iter()
        .enumerate()
        .map(|(node_id, band_ids)| Shard {
            node_id,
            sample_indices: band_ids.flat_map(|b| band_ranges[b].clone()).collect(),
        })
        .collect();
    Ok((PatchSet { m, patches }, shards))
}

fn shard_contiguous(count: usize, nodes: usize) -> Vec<std::ops::Range<usize>> {
    let base = count / nodes;
    let extra = count % nodes;
    let mut start = 0;
    (0..nodes)
        .map(|k| {
            let size = base + usize::from(k < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Grayscale image with intensities nominally in `[0, 255]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(DataError::ShapeMismatch(format!("{} pixels for a {height}x{width} image", pixels.len())));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("image has non-finite pixels".into()));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let pixels = (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        GrayImage::new(height, width, pixels).expect("generator produced invalid pixels")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage { height: self.height, width: self.width, pixels: self.pixels.iter().map(|&v| f(v)).collect() }
    }

    /// `m×m` patch with top-left corner `(r, c)`; `Y[i, j] = img[r + i, c + j]`.
    pub fn patch(&self, r: usize, c: usize, m: usize) -> Mat {
        Mat::from_fn(m, m, |i, j| self.get(r + i, c + j))
    }
}

/// Top-left corners of the patch grid in row-major order.
pub fn patch_grid(height: usize, width: usize, m: usize, stride: usize) -> Result<Vec<(usize, usize)>, DataError> {
    if stride == 0 || stride > m {
        return Err(DataError::InvalidStride { stride, m });
    }
    if m == 0 || m > height || m > width {
        return Err(DataError::ImageTooSmall { height, width, m });
    }
    let rows: Vec<usize> = (0..=height - m).step_by(stride).collect();
    let cols: Vec<usize> = (0..=width - m).step_by(stride).collect();
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

pub fn extract_patches(img: &GrayImage, m: usize, stride: usize) -> Result<PatchSet, DataError> {
    let grid = patch_grid(img.height, img.width, m, stride)?;
    Ok(PatchSet { m, patches: grid.into_iter().map(|(r, c)| img.patch(r, c, m)).collect() })
}

/// `img + N(0, σ²)` per pixel in row-major order; no clipping.
pub fn add_gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> Result<GrayImage, DataError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(DataError::Invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = seeded(seed);
    let pixels = img.pixels.iter().map(|&v| v + sigma * gaussian(&mut rng)).collect();
    Ok(GrayImage { height: img.height, width: img.width, pixels })
}

/// Parameters of a synthetic separable dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub m: usize,
    pub n1: usize,
    pub n2: usize,
    pub s: usize,
    pub noise_sigma: f64,
    pub mode: DictMode,
}

/// Synthetic data `Yₖ = D1 Xₖ D2ᵀ + σ·noise` from seeded ground truth.
///
/// General mode draws unit-column Gaussian dictionaries; orthonormal mode
/// takes the polar factor of Gaussian matrices. Each code has exactly `s`
/// nonzeros at uniform positions with standard normal values.
pub fn synth_separable(seed: u64, spec: &SynthSpec) -> Result<(PatchSet, DictionaryPair, Vec<SparseCode>), DataError> {
    let SynthSpec { count, m, n1, n2, s, noise_sigma, mode } = *spec;
    if count == 0 || m == 0 || n1 == 0 || n2 == 0 {
        return Err(DataError::Invalid("count, m, n1, n2 must be positive".into()));
    }
    if s == 0 || s > n1 * n2 {
        return Err(DataError::InvalidSparsity { s, n1, n2 });
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(DataError::Invalid(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = seeded(seed);
    let (d1, d2) = match mode {
        DictMode::General => (unit_column_mat(&mut rng, m, n1), unit_column_mat(&mut rng, m, n2)),
        DictMode::Orthonormal => {
            if n1 != m || n2 != m {
                return Err(DataError::Invalid("orthonormal mode requires n1 = n2 = m".into()));
            }
            let d1 = polar_factor(&gaussian_mat(&mut rng, m, m)).map_err(UpdateError::from)?.q;
            let d2 = polar_factor(&gaussian_mat(&mut rng, m, m)).map_err(UpdateError::from)?.q;
            (d1, d2)
        }
    };
    let dict = DictionaryPair::new(mode, d1, d2)?;
    let mut patches = Vec::with_capacity(count);
    let mut codes = Vec::with_capacity(count);
    for _ in 0..count {
        let positions = rand::seq::index::sample(&mut rng, n1 * n2, s);
        let mut triplets: Vec<Entry> = Vec::with_capacity(s);
        for pos in positions.into_iter() {
            let mut value = gaussian(&mut rng);
            while value == 0.0 {
                value = gaussian(&mut rng);
            }
            triplets.push(Entry { row: pos / n2, col: pos % n2, value });
        }
        let code = SparseCode::new(n1, n2, triplets).expect("distinct positions");
        let mut y = dict.reconstruct(&code);
        if noise_sigma > 0.0 {
            for v in y.as_mut_slice() {
                *v += noise_sigma * gaussian(&mut rng);
            }
        }
        patches.push(y);
        codes.push(code);
    }
    Ok((PatchSet { m, patches }, dict, codes))
}

// ---------------------------------------------------------------------------
// PGM (P5)

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<String, DataError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::MalformedFile("truncated PGM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn pgm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, DataError> {
    let tok = pgm_token(bytes, pos)?;
    tok.parse().map_err(|_| DataError::MalformedFile(format!("bad PGM {what}: '{tok}'")))
}

/// Decodes a binary 8-bit PGM.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, DataError> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos)? != "P5" {
        return Err(DataError::MalformedFile("not a binary PGM (P5)".into()));
    }
    let width = pgm_number(bytes, &mut pos, "width")? as usize;
    let height = pgm_number(bytes, &mut pos, "height")? as usize;
    let maxval = pgm_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(DataError::UnsupportedMaxVal(maxval));
    }
    if width == 0 || height == 0 {
        return Err(DataError::MalformedFile("zero image dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::MalformedFile("missing raster".into()));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() < width * height {
        return Err(DataError::MalformedFile(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            width * height
        )));
    }
    let pixels = raster[..width * height].iter().map(|&b| f64::from(b)).collect();
    GrayImage::new(height, width, pixels)
}

/// Encodes as binary 8-bit PGM, rounding and clamping to `[0, 255]`.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage, DataError> {
    decode_pgm(&fs::read(path)?)
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// .sdl container: one JSON header line, then little-endian f64 payload.

#[derive(Debug, Serialize, Deserialize)]
struct SdlHeader {
    format: String,
    version: u32,
    order: String,
    #[serde(flatten)]
    body: SdlBody,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum SdlBody {
    Patchset { m: usize, count: usize },
    Dictionary { mode: DictMode, m: usize, n1: usize, n2: usize },
}

fn encode_sdl(body: SdlBody, payload: impl Iterator<Item = f64>) -> Vec<u8> {
    let header = SdlHeader { format: "sdl".into(), version: SDL_VERSION, order: STORAGE_ORDER.into(), body };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_sdl(bytes: &[u8]) -> Result<(SdlBody, Vec<f64>), DataError> {
    let nl =
        bytes.iter().position(|&b| b == b'\n').ok_or_else(|| DataError::MalformedFile("missing header line".into()))?;
    let header: SdlHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| DataError::MalformedFile(format!("bad header: {e}")))?;
    if header.format != "sdl" {
        return Err(DataError::MalformedFile(format!("unknown format '{}'", header.format)));
    }
    if header.version != SDL_VERSION {
        return Err(DataError::VersionMismatch { found: header.version });
    }
    if header.order != STORAGE_ORDER {
        return Err(DataError::MalformedFile(format!("unsupported storage order '{}'", header.order)));
    }
    let payload = &bytes[nl + 1..];
    let expected = match header.body {
        SdlBody::Patchset { m, count } => m.checked_mul(m).and_then(|v| v.checked_mul(count)),
        SdlBody::Dictionary { m, n1, n2, .. } => n1.checked_add(n2).and_then(|n| n.checked_mul(m)),
    }
    .ok_or_else(|| DataError::MalformedFile("header dimensions overflow".into()))?;
    if payload.len() != expected * 8 {
        return Err(DataError::ShapeMismatch(format!(
            "header implies {} payload bytes, found {}",
            expected * 8,
            payload.len()
        )));
    }
    let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header.body, values))
}

pub fn encode_patchset(set: &PatchSet) -> Vec<u8> {
    encode_sdl(SdlBody::Patchset { m: set.m, count: set.len() }, set.payload().into_iter())
}

pub fn decode_patchset(bytes: &[u8]) -> Result<PatchSet, DataError> {
    match decode_sdl(bytes)? {
        (SdlBody::Patchset { m, count }, values) => {
            if m == 0 || count == 0 {
                return Err(DataError::ShapeMismatch("empty patch set".into()));
            }
            let patches = values
                .chunks_exact(m * m)
                .map(|c| Mat::from_col_major(m, m, c.to_vec()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| DataError::MalformedFile(e.to_string()))?;
            PatchSet::new(m, patches)
        }
        _ => Err(DataError::MalformedFile("file holds a dictionary, not a patch set".into())),
    }
}

pub fn encode_dict(pair: &DictionaryPair) -> Vec<u8> {
    let body = SdlBody::Dictionary { mode: pair.mode(), m: pair.m(), n1: pair.n1(), n2: pair.n2() };
    encode_sdl(body, pair.d1().as_slice().iter().chain(pair.d2().as_slice()).copied())
}

/// Decodes a dictionary pair and re-validates its mode invariants.
pub fn decode_dict(bytes: &[u8]) -> Result<DictionaryPair, DataError> {
    match decode_sdl(bytes)? {
        (SdlBody::Dictionary { mode, m, n1, n2 }, values) => {
            let (a, b) = values.split_at(m * n1);
            let d1 = Mat::from_col_major(m, n1, a.to_vec()).map_err(|e| DataError::MalformedFile(e.to_string()))?;
            let d2 = Mat::from_col_major(m, n2, b.to_vec()).map_err(|e| DataError::MalformedFile(e.to_string()))?;
            Ok(DictionaryPair::new(mode, d1, d2)?)
        }
        _ => Err(DataError::MalformedFile("file holds a patch set, not a dictionary".into())),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn save_patchset(set: &PatchSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_file(path.as_ref(), &encode_patchset(set))
}

pub fn load_patchset(path: impl AsRef<Path>) -> Result<PatchSet, DataError> {
    decode_patchset(&fs::read(path)?)
}

pub fn save_dict(pair: &DictionaryPair, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_file(path.as_ref(), &encode_dict(pair))
}

pub fn load_dict(path: impl AsRef<Path>) -> Result<DictionaryPair, DataError> {
    decode_dict(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::from_fn(h, w, |r, c| ((r * 7 + c * 3) % 256) as f64)
    }

    #[test]
    fn patch_counts() {
        let img = ramp(512, 512);
        assert_eq!(patch_grid(512, 512, 8, 8).unwrap().len(), 4096);
        assert_eq!(patch_grid(512, 512, 8, 1).unwrap().len(), 255_025);
        let small = ramp(16, 16);
        let set = extract_patches(&small, 16, 16).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.get(0)[(3, 5)], small.get(3, 5));
        assert_eq!(extract_patches(&img, 8, 8).unwrap().len(), 4096);
    }

    #[test]
    fn patch_errors() {
        let img = ramp(6, 10);
        assert!(matches!(extract_patches(&img, 8, 8), Err(DataError::ImageTooSmall { .. })));
        assert!(matches!(extract_patches(&img, 4, 5), Err(DataError::InvalidStride { .. })));
        assert!(matches!(extract_patches(&img, 4, 0), Err(DataError::InvalidStride { .. })));
    }

    #[test]
    fn patches_follow_row_major_grid() {
        let img = ramp(4, 6);
        let set = extract_patches(&img, 2, 2).unwrap();
        assert_eq!(set.len(), 6);
        // second patch starts at (0, 2), fourth at (2, 0)
        assert_eq!(set.get(1)[(0, 0)], img.get(0, 2));
        assert_eq!(set.get(3)[(1, 1)], img.get(3, 1));
    }

    #[test]
    fn shard_sizes() {
        let sizes: Vec<usize> = shard_indices(10, 3, 1).unwrap().iter().map(|s| s.sample_indices.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        let one = shard_indices(9216, 1, 5).unwrap();
        assert_eq!(one[0].sample_indices, (0..9216).collect::<Vec<_>>());
        let seven = shard_indices(7, 7, 2).unwrap();
        let mut all: Vec<usize> = seven.iter().flat_map(|s| s.sample_indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(seven.iter().all(|s| s.sample_indices.len() == 1));
        assert!(matches!(shard_indices(3, 4, 0), Err(DataError::TooManyNodes { .. })));
        assert!(matches!(shard_indices(3, 0, 0), Err(DataError::TooManyNodes { .. })));
    }

    #[test]
    fn shard_is_deterministic() {
        assert_eq!(shard_indices(100, 4, 9).unwrap(), shard_indices(100, 4, 9).unwrap());
        assert_ne!(shard_indices(100, 4, 9).unwrap(), shard_indices(100, 4, 10).unwrap());
    }

    #[test]
    fn band_sharding() {
        let band = |v: f64| PatchSet::new(2, vec![Mat::from_fn(2, 2, |_, _| v); 3]).unwrap();
        let (set, shards) = shard_by_band(&[band(0.0), band(1.0), band(2.0)], 2).unwrap();
        assert_eq!(set.len(), 9);
        assert_eq!(shards[0].sample_indices, (0..6).collect::<Vec<_>>());
        assert_eq!(shards[1].sample_indices, (6..9).collect::<Vec<_>>());
    }

    #[test]
    fn synth_noiseless_is_exact_and_deterministic() {
        let spec = SynthSpec { count: 20, m: 4, n1: 6, n2: 5, s: 3, noise_sigma: 0.0, mode: DictMode::General };
        let (set, dict, codes) = synth_separable(3, &spec).unwrap();
        let obj: f64 = set.patches().iter().zip(&codes).map(|(y, x)| y.sub(&dict.reconstruct(x)).frobenius_sq()).sum();
        assert!(obj < 1e-18);
        assert!(codes.iter().all(|c| c.len() == 3));
        let (again, _, _) = synth_separable(3, &spec).unwrap();
        assert_eq!(
            set.payload().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.payload().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn synth_dense_codes() {
        let spec = SynthSpec { count: 4, m: 3, n1: 3, n2: 3, s: 9, noise_sigma: 0.0, mode: DictMode::Orthonormal };
        let (set, dict, codes) = synth_separable(1, &spec).unwrap();
        for (y, x) in set.patches().iter().zip(&codes) {
            assert_eq!(x.len(), 9);
            assert!(y.sub(&dict.reconstruct(x)).frobenius() < 1e-12);
        }
        let bad = SynthSpec { s: 10, ..spec };
        assert!(matches!(synth_separable(1, &bad), Err(DataError::InvalidSparsity { .. })));
    }

    #[test]
    fn pgm_format() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 128, 255, 64]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 128.0, 255.0, 64.0]);
        assert_eq!(img.get(1, 0), 255.0);
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_pgm(truncated), Err(DataError::MalformedFile(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n65535\n\0\0\0\0"), Err(DataError::UnsupportedMaxVal(65535))));
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(DataError::MalformedFile(_))));
        let commented = b"P5 # comment\n# another\n1 1\n255\n\x07";
        assert_eq!(decode_pgm(commented).unwrap().pixels(), &[7.0]);
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let img = ramp(8, 8);
        assert_eq!(add_gaussian_noise(&img, 0.0, 4).unwrap(), img);
        assert!(add_gaussian_noise(&img, -1.0, 4).is_err());
        let a = add_gaussian_noise(&img, 3.0, 4).unwrap();
        assert_eq!(a, add_gaussian_noise(&img, 3.0, 4).unwrap());
        assert_ne!(a, img);
    }

    #[test]
    fn sdl_shape_mismatch() {
        let set = PatchSet::new(2, vec![Mat::identity(2)]).unwrap();
        let mut bytes = encode_patchset(&set);
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(decode_patchset(&bytes), Err(DataError::ShapeMismatch(_))));
    }

    #[test]
    fn sdl_version_and_kind_checks() {
        let set = PatchSet::new(2, vec![Mat::identity(2)]).unwrap();
        let bytes = encode_patchset(&set);
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
        let bumped = text.replace("\"version\":1", "\"version\":2");
        let mut v2 = bumped.into_bytes();
        v2.extend_from_slice(&bytes[text.len()..]);
        assert!(matches!(decode_patchset(&v2), Err(DataError::VersionMismatch { found: 2 })));
        assert!(matches!(decode_dict(&bytes), Err(DataError::MalformedFile(_))));
        assert!(matches!(decode_patchset(b"no header"), Err(DataError::MalformedFile(_))));
    }

    #[test]
    fn dict_round_trip_revalidates() {
        let spec = SynthSpec { count: 1, m: 4, n1: 6, n2: 7, s: 2, noise_sigma: 0.0, mode: DictMode::General };
        let (_, dict, _) = synth_separable(8, &spec).unwrap();
        let loaded = decode_dict(&encode_dict(&dict)).unwrap();
        assert_eq!(loaded, dict);
        for j in 0..loaded.n1() {
            assert!((loaded.d1().col_norm(j) - 1.0).abs() < 1e-12);
        }
        // corrupt one entry so a column is no longer unit norm
        let mut bytes = encode_dict(&dict);
        let start = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        bytes[start..start + 8].copy_from_slice(&5.0f64.to_le_bytes());
        assert!(matches!(decode_dict(&bytes), Err(DataError::Dictionary(_))));
    }

    #[test]
    fn sample_without_replacement() {
        let set = PatchSet::new(1, (0..50).map(|k| Mat::from_fn(1, 1, |_, _| k as f64)).collect()).unwrap();
        let sub = set.sample(20, 3).unwrap();
        let mut vals: Vec<i64> = sub.patches().iter().map(|p| p[(0, 0)] as i64).collect();
        vals.sort_unstable();
        vals.dedup();
        assert_eq!(vals.len(), 20);
        assert!(set.sample(51, 3).is_err());
    }
}
