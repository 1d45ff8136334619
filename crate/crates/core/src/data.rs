//! Synthetic paired volumes, min-max normalisation and the `.pcsavol` format.
//!
//! Randomness comes from [`CounterRng`]: value `i` of stream `seed` is
//! `splitmix64(seed + (i + 1) * 0x9E3779B97F4A7C15)`, so every volume is a
//! pure function of its seed on any platform.
//!
//! A volume file is a 56-byte header followed by the raw payload:
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..8   | magic `PCSAVOL1`                          |
//! | 8..28  | dims `(B, C, D, H, W)`, five `u32` LE      |
//! | 28..32 | dtype tag `F32L`                          |
//! | 32..48 | modality tag, UTF-8, NUL padded           |
//! | 48..56 | seed, `u64` LE                            |
//! | 56..   | `B*C*D*H*W` little-endian `f32` values    |

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Volume};
use crate::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator: the `i`-th draw depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        splitmix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }
}

/// Parameters of the synthetic source generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub edge: usize,
    pub blob_count_range: (usize, usize),
    pub blob_sigma_range: (f64, f64),
    pub cavity_count: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { seed: 1, edge: 16, blob_count_range: (3, 6), blob_sigma_range: (1.5, 4.0), cavity_count: 2 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.edge == 0 || self.edge % 8 != 0 {
            return bad(format!("synthetic edge must be a positive multiple of 8, got {}", self.edge));
        }
        let (bmin, bmax) = self.blob_count_range;
        let (smin, smax) = self.blob_sigma_range;
        if bmin > bmax || !(smin > 0.0) || smin > smax {
            return bad("blob ranges must satisfy 0 < min <= max".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::cube(1, 1, self.edge).expect("validated edge")
    }
}

/// `(x - min) / (max - min)`; a constant input gives zeros and `true`.
pub fn minmax_normalize(v: &Volume) -> (Volume, bool) {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return (Volume::zeros(v.shape()), true);
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    (v.map(|x| ((x as f64 - lo) / range) as f32), false)
}

fn normalize_f64(shape: Shape, data: Vec<f64>) -> Volume {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Volume::zeros(shape);
    }
    let out = data.into_iter().map(|x| ((x - lo) / (hi - lo)) as f32).collect();
    Volume::from_vec(shape, out).expect("length preserved")
}

/// Gaussian blobs with ellipsoidal cavities (intensity x0.2), min-max normalised.
pub fn gen_source(spec: &SyntheticSpec, seed: u64) -> Result<Volume> {
    spec.validate()?;
    let n = spec.edge;
    let e = n as f64;
    let mut rng = CounterRng::new(seed);
    let mut field = vec![0.0f64; n * n * n];
    let blobs = rng.int_inclusive(spec.blob_count_range.0, spec.blob_count_range.1);
    for _ in 0..blobs {
        let c = [rng.uniform(0.0, e), rng.uniform(0.0, e), rng.uniform(0.0, e)];
        let sigma = rng.uniform(spec.blob_sigma_range.0, spec.blob_sigma_range.1);
        let amp = rng.uniform(0.5, 1.0);
        let k = 1.0 / (2.0 * sigma * sigma);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
                    field[(z * n + y) * n + x] += amp * (-d2 * k).exp();
                }
            }
        }
    }
    for _ in 0..spec.cavity_count {
        let c = [rng.uniform(e / 4.0, 3.0 * e / 4.0), rng.uniform(e / 4.0, 3.0 * e / 4.0), rng.uniform(e / 4.0, 3.0 * e / 4.0)];
        let r = [rng.uniform(e / 8.0, e / 4.0), rng.uniform(e / 8.0, e / 4.0), rng.uniform(e / 8.0, e / 4.0)];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let q = ((z as f64 - c[0]) / r[0]).powi(2) + ((y as f64 - c[1]) / r[1]).powi(2) + ((x as f64 - c[2]) / r[2]).powi(2);
                    if q <= 1.0 {
                        field[(z * n + y) * n + x] *= 0.2;
                    }
                }
            }
        }
    }
    Ok(normalize_f64(spec.shape(), field))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    j.clamp(0, n - 1) as usize
}

/// Target surrogate: `minmax(box3(source^2))` with reflect padding.
pub fn modality_transform(source: &Volume) -> Volume {
    let s = source.shape();
    let mut out = Vec::with_capacity(s.numel());
    for b in 0..s.batch {
        for c in 0..s.channels {
            for z in 0..s.depth {
                for y in 0..s.height {
                    for x in 0..s.width {
                        let mut acc = 0.0f64;
                        for dz in -1..=1isize {
                            for dy in -1..=1isize {
                                for dx in -1..=1isize {
                                    let v = source.at(
                                        b,
                                        c,
                                        reflect(z as isize + dz, s.depth),
                                        reflect(y as isize + dy, s.height),
                                        reflect(x as isize + dx, s.width),
                                    ) as f64;
                                    acc += v * v;
                                }
                            }
                        }
                        out.push(acc / 27.0);
                    }
                }
            }
        }
    }
    normalize_f64(s, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumePair {
    pub seed: u64,
    pub source: Volume,
    pub target: Volume,
}

pub fn gen_pair(spec: &SyntheticSpec, seed: u64) -> Result<VolumePair> {
    let source = gen_source(spec, seed)?;
    let target = modality_transform(&source);
    Ok(VolumePair { seed, source, target })
}

pub const SOURCE_MODALITY: &str = "sMRI-surrogate";
pub const TARGET_MODALITY: &str = "PET-surrogate";

const MAGIC: &[u8; 8] = b"PCSAVOL1";
const DTYPE: &[u8; 4] = b"F32L";
pub const HEADER_LEN: usize = 56;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VolumeHeader {
    pub shape: Shape,
    pub modality: String,
    pub seed: u64,
}

pub fn encode_volume(v: &Volume, modality: &str, seed: u64) -> Result<Vec<u8>> {
    if modality.len() > 16 || modality.contains('\0') {
        return Err(Error::Config(format!("modality tag {modality:?} must be at most 16 bytes without NULs")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    out.extend_from_slice(MAGIC);
    for d in v.shape().dims() {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(DTYPE);
    let mut tag = [0u8; 16];
    tag[..modality.len()].copy_from_slice(modality.as_bytes());
    out.extend_from_slice(&tag);
    out.extend_from_slice(&seed.to_le_bytes());
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<(Volume, VolumeHeader)> {
    if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload { expected: HEADER_LEN, found: bytes.len() });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let dims = [u32_at(8), u32_at(12), u32_at(16), u32_at(20), u32_at(24)];
    if &bytes[28..32] != DTYPE {
        return Err(Error::BadDtype(String::from_utf8_lossy(&bytes[28..32]).into_owned()));
    }
    let tag = &bytes[32..48];
    let end = tag.iter().position(|&b| b == 0).unwrap_or(16);
    let modality = std::str::from_utf8(&tag[..end]).map_err(|_| Error::BadDtype("modality tag is not UTF-8".into()))?.to_string();
    let seed = u64::from_le_bytes(bytes[48..56].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER_LEN..];
    let expected = dims.iter().try_fold(4usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() != expected {
        return Err(Error::PayloadMismatch { expected, found: payload.len() });
    }
    let shape = Shape::from_dims(dims)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((Volume::from_vec(shape, data)?, VolumeHeader { shape, modality, seed }))
}

pub fn write_volume(path: &Path, v: &Volume, modality: &str, seed: u64) -> Result<()> {
    let bytes = encode_volume(v, modality, seed)?;
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn read_volume(path: &Path) -> Result<(Volume, VolumeHeader)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_volume(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Generator template plus the seeds of each split; stored as `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: SyntheticSpec,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl DatasetManifest {
    /// Consecutive seeds starting at `spec.seed`: train, then val, then test.
    pub fn sequential(spec: SyntheticSpec, train: usize, val: usize, test: usize) -> Self {
        let base = spec.seed;
        let range = |from: usize, n: usize| (from..from + n).map(|i| base.wrapping_add(i as u64)).collect();
        DatasetManifest { train: range(0, train), val: range(train, val), test: range(train + val, test), spec }
    }

    pub fn seeds(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let mut seen = HashSet::new();
        for split in Split::ALL {
            let mut local = HashSet::new();
            for &s in self.seeds(split) {
                if !local.insert(s) || !seen.insert(s) {
                    return Err(Error::OverlappingSplit(s));
                }
            }
        }
        Ok(())
    }

    pub fn pair_paths(root: &Path, split: Split, seed: u64) -> (PathBuf, PathBuf) {
        let dir = root.join(split.name());
        (dir.join(format!("pair_{seed}_source.pcsavol")), dir.join(format!("pair_{seed}_target.pcsavol")))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Materialises every pair of `manifest` under `root`. Refuses to touch an
/// existing dataset unless `force` is set. Returns pair counts per split.
pub fn build_dataset(manifest: &DatasetManifest, root: &Path, force: bool) -> Result<[usize; 3]> {
    manifest.validate()?;
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::AlreadyExists(root.to_path_buf()));
    }
    let mut jobs = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        jobs.extend(manifest.seeds(split).iter().map(|&s| (split, s)));
    }
    jobs.par_iter().try_for_each(|&(split, seed)| -> Result<()> {
        let pair = gen_pair(&manifest.spec, seed)?;
        let (src, tgt) = DatasetManifest::pair_paths(root, split, seed);
        write_volume(&src, &pair.source, SOURCE_MODALITY, seed)?;
        write_volume(&tgt, &pair.target, TARGET_MODALITY, seed)
    })?;
    fs::write(&manifest_path, manifest.to_toml()?).map_err(Error::io(&manifest_path))?;
    Ok(Split::ALL.map(|s| manifest.seeds(s).len()))
}

/// A dataset directory written by [`build_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let manifest: DatasetManifest = toml::from_str(&text)?;
        manifest.validate()?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn load_pair(&self, split: Split, seed: u64) -> Result<VolumePair> {
        let (src, tgt) = DatasetManifest::pair_paths(&self.root, split, seed);
        let (source, _) = read_volume(&src)?;
        let (target, _) = read_volume(&tgt)?;
        if source.shape() != target.shape() {
            return Err(Error::Shape(format!("pair {seed}: source {} vs target {}", source.shape(), target.shape())));
        }
        Ok(VolumePair { seed, source, target })
    }

    /// All pairs of a split; a split with no seeds or no directory is missing.
    pub fn load_split(&self, split: Split) -> Result<Vec<VolumePair>> {
        let seeds = self.manifest.seeds(split);
        if seeds.is_empty() || !self.root.join(split.name()).is_dir() {
            return Err(Error::MissingSplit(split.name().into()));
        }
        seeds.iter().map(|&s| self.load_pair(split, s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_rng_is_a_pure_function_of_seed_and_index() {
        let mut a = CounterRng::new(9);
        let first: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let mut b = CounterRng::new(9);
        assert_eq!(first, (0..4).map(|_| b.next_u64()).collect::<Vec<_>>());
        assert_eq!(first[2], splitmix64(9u64.wrapping_add(3u64.wrapping_mul(GOLDEN))));
        let f = CounterRng::new(1).next_f64();
        assert!((0.0..1.0).contains(&f));
    }

    #[test]
    fn minmax_rules() {
        let s = Shape::new(1, 1, 1, 1, 2).unwrap();
        let (v, deg) = minmax_normalize(&Volume::from_vec(s, vec![2.0, 4.0]).unwrap());
        assert_eq!((v.data(), deg), (&[0.0, 1.0][..], false));
        let (v, deg) = minmax_normalize(&Volume::full(s, 3.0));
        assert_eq!((v.data(), deg), (&[0.0, 0.0][..], true));
    }

    #[test]
    fn source_is_deterministic_and_normalised() {
        let spec = SyntheticSpec::default();
        let a = gen_source(&spec, 42).unwrap();
        assert_eq!(a, gen_source(&spec, 42).unwrap());
        assert_ne!(a, gen_source(&spec, 43).unwrap());
        assert_eq!(a.min_max(), (0.0, 1.0));
    }

    #[test]
    fn empty_field_is_degenerate() {
        let spec = SyntheticSpec { blob_count_range: (0, 0), cavity_count: 1, ..Default::default() };
        let v = gen_source(&spec, 1).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transform_of_impulse_is_a_unit_box() {
        let s = Shape::cube(1, 1, 8).unwrap();
        let v = Volume::from_fn(s, |_, _, z, y, x| if (z, y, x) == (4, 4, 4) { 1.0 } else { 0.0 });
        let t = modality_transform(&v);
        let ones = t.data().iter().filter(|&&x| x == 1.0).count();
        assert_eq!(ones, 27);
        assert_eq!(t.data().iter().filter(|&&x| x != 0.0).count(), 27);
        for dz in 3..=5 {
            assert_eq!(t.at(0, 0, dz, 3, 5), 1.0);
        }
        assert!(modality_transform(&Volume::full(s, 0.4)).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transform_preserves_ramp_order_in_the_interior() {
        let s = Shape::cube(1, 1, 8).unwrap();
        let v = Volume::from_fn(s, |_, _, z, _, _| z as f32 / 7.0);
        let t = modality_transform(&v);
        for z in 1..6 {
            assert!(t.at(0, 0, z, 4, 4) < t.at(0, 0, z + 1, 4, 4));
        }
    }

    #[test]
    fn volume_bytes_round_trip_and_errors() {
        let v = gen_source(&SyntheticSpec::default(), 5).unwrap();
        let bytes = encode_volume(&v, SOURCE_MODALITY, 5).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 16 * 16 * 16);
        let (w, h) = decode_volume(&bytes).unwrap();
        assert_eq!(w, v);
        assert_eq!((h.modality.as_str(), h.seed), (SOURCE_MODALITY, 5));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::BadMagic)));
        assert!(matches!(decode_volume(&bytes[..bytes.len() - 1]), Err(Error::TruncatedPayload { .. })));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_volume(&long), Err(Error::PayloadMismatch { .. })));
        assert!(encode_volume(&v, "a-very-long-modality-tag", 0).is_err());
    }

    #[test]
    fn overlapping_manifest_is_rejected() {
        let mut m = DatasetManifest::sequential(SyntheticSpec::default(), 3, 1, 1);
        m.validate().unwrap();
        m.test[0] = m.train[1];
        assert!(matches!(m.validate(), Err(Error::OverlappingSplit(_))));
    }
}
