//! Synthetic elongated-organ phantoms, random crops, the `SCKV` volume file
//! format and labeled/unlabeled/test split manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::Rng;
use crate::volume::{flat_index, voxel_count, Dims, Mask, Volume};

pub const MAX_ATTEMPTS: usize = 20;
pub const CROP_TRIES: usize = 50;
pub const FG_FRACTION: (f64, f64) = (0.005, 0.15);

const TISSUE: f64 = 0.62;
const BACKGROUND: f64 = 0.3;
const DISTRACTOR: f64 = 0.55;
const NOISE_STD: f64 = 0.09;

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: Mask,
    /// Unit chord direction of the tube's spine.
    pub gen_axis: [f64; 3],
    pub seed: u64,
}

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn unit(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

fn random_unit(rng: &mut Rng) -> V3 {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = dot(v, v).sqrt();
        if n > 1e-6 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Voxels within `radius(t)` of a quadratic Bezier spine.
fn render_tube(dims: Dims, p: [V3; 3], r_head: f64, r_tail: f64) -> Mask {
    const SAMPLES: usize = 200;
    let mut mask = Mask::zeros(dims);
    for s in 0..=SAMPLES {
        let t = s as f64 / SAMPLES as f64;
        let u = 1.0 - t;
        let c = add(add(scale(p[0], u * u), scale(p[1], 2.0 * u * t)), scale(p[2], t * t));
        let r = r_head * u + r_tail * t;
        let lo = |a: usize| (c[a] - r).floor().max(0.0) as usize;
        let hi = |a: usize| ((c[a] + r).ceil().max(0.0) as usize).min(dims[a] - 1);
        for x in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for z in lo(2)..=hi(2) {
                    let d = sub([x as f64, y as f64, z as f64], c);
                    if dot(d, d) <= r * r {
                        mask.set(x, y, z, 1);
                    }
                }
            }
        }
    }
    mask
}

fn touches_border(mask: &Mask) -> bool {
    let d = mask.dims;
    mask.data.iter().enumerate().any(|(i, &v)| {
        if v == 0 {
            return false;
        }
        let [x, y, z] = crate::volume::unflat_index(d, i);
        x == 0 || y == 0 || z == 0 || x == d[0] - 1 || y == d[1] - 1 || z == d[2] - 1
    })
}

/// Mask dilated by one voxel (26-neighbourhood).
fn dilate(mask: &Mask) -> Mask {
    let d = mask.dims;
    let mut out = mask.clone();
    for (i, &v) in mask.data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let [x, y, z] = crate::volume::unflat_index(d, i);
        for nx in x.saturating_sub(1)..=(x + 1).min(d[0] - 1) {
            for ny in y.saturating_sub(1)..=(y + 1).min(d[1] - 1) {
                for nz in z.saturating_sub(1)..=(z + 1).min(d[2] - 1) {
                    out.set(nx, ny, nz, 1);
                }
            }
        }
    }
    out
}

fn try_phantom(dims: Dims, seed: u64, rng: &mut Rng) -> Option<Phantom> {
    let m = *dims.iter().min().unwrap() as f64;
    let center: V3 = std::array::from_fn(|a| dims[a] as f64 / 2.0 - 0.5 + rng.range(-0.08, 0.08) * dims[a] as f64);
    let axis = random_unit(rng);
    let len = rng.range(0.55, 0.75) * m;
    let perp = {
        let v = random_unit(rng);
        let v = sub(v, scale(axis, dot(v, axis)));
        if dot(v, v) < 1e-6 {
            return None;
        }
        unit(v)
    };
    let bend = rng.range(0.05, 0.2) * len;
    let p0 = sub(center, scale(axis, len / 2.0));
    let p2 = add(center, scale(axis, len / 2.0));
    let p1 = add(center, scale(perp, bend));
    let r_head = rng.range(0.09, 0.12) * m;
    let r_tail = r_head * rng.range(0.4, 0.6);
    let mask = render_tube(dims, [p0, p1, p2], r_head, r_tail);

    let n = voxel_count(dims) as f64;
    let frac = mask.count(1) as f64 / n;
    if !(FG_FRACTION.0..=FG_FRACTION.1).contains(&frac) || touches_border(&mask) {
        return None;
    }

    // distractor ellipsoids kept off the organ (and its 1-voxel rim)
    let keep_out = dilate(&mask);
    let mut blobs = Mask::zeros(dims);
    let wanted = 2 + rng.below(4);
    let mut placed = 0;
    for _ in 0..50 {
        if placed == wanted {
            break;
        }
        let c: V3 = std::array::from_fn(|a| rng.range(0.0, dims[a] as f64 - 1.0));
        let r: V3 = std::array::from_fn(|_| rng.range(0.04, 0.09) * m);
        let mut cells = Vec::new();
        let mut clash = false;
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let q = [(x as f64 - c[0]) / r[0], (y as f64 - c[1]) / r[1], (z as f64 - c[2]) / r[2]];
                    if dot(q, q) <= 1.0 {
                        let i = flat_index(dims, x, y, z);
                        if keep_out.data[i] != 0 {
                            clash = true;
                        }
                        cells.push(i);
                    }
                }
            }
        }
        if clash || cells.is_empty() {
            continue;
        }
        for i in cells {
            blobs.data[i] = 1;
        }
        placed += 1;
    }
    if placed < 2 {
        return None;
    }

    let data = (0..mask.data.len())
        .map(|i| {
            let base = if mask.data[i] == 1 {
                TISSUE
            } else if blobs.data[i] == 1 {
                DISTRACTOR
            } else {
                BACKGROUND
            };
            (base + NOISE_STD * rng.normal()).clamp(0.0, 1.0)
        })
        .collect();
    Some(Phantom { volume: Volume { dims, data }, mask, gen_axis: unit(sub(p2, p0)), seed })
}

/// Curved, tapering tube with noisy texture and distractor blobs,
/// deterministic in `seed`.
pub fn gen_phantom(seed: u64, dims: Dims) -> Result<Phantom> {
    if dims.iter().any(|&d| d < 16) {
        return Err(contract(format!("phantom dims must be >= 16, got {dims:?}")));
    }
    let mut rng = Rng::new(seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(p) = try_phantom(dims, seed, &mut rng) {
            return Ok(p);
        }
    }
    Err(Error::GenerationFailed(seed))
}

/// Seed of phantom `index` in the dataset `dataset_seed`.
pub fn phantom_seed(dataset_seed: u64, index: usize) -> u64 {
    Rng::with_stream(dataset_seed, index as u64 + 1).next_u64()
}

/// Random `size` crop of a phantom that contains foreground. After
/// `CROP_TRIES` misses the crop is centered on the mask centroid.
pub fn random_crop(p: &Phantom, size: Dims, rng: &mut Rng) -> Result<(Volume, Mask, [usize; 3])> {
    crop_pair(&p.volume, &p.mask, size, rng)
}

/// [`random_crop`] on a volume/mask pair.
pub fn crop_pair(volume: &Volume, mask: &Mask, size: Dims, rng: &mut Rng) -> Result<(Volume, Mask, [usize; 3])> {
    let dims = mask.dims;
    if volume.dims != dims {
        return Err(contract("volume and mask dims differ"));
    }
    if (0..3).any(|a| size[a] > dims[a] || size[a] == 0) {
        return Err(contract(format!("crop {size:?} does not fit {dims:?}")));
    }
    let mut corner = [0; 3];
    let mut found = false;
    for _ in 0..CROP_TRIES {
        for a in 0..3 {
            corner[a] = rng.below(dims[a] - size[a] + 1);
        }
        if mask.crop(corner, size).count(1) > 0 {
            found = true;
            break;
        }
    }
    if !found {
        let coords = mask.coords_of(1);
        for a in 0..3 {
            let c = coords.iter().map(|q| q[a]).sum::<f64>() / coords.len().max(1) as f64;
            let start = (c.round() as isize - size[a] as isize / 2).clamp(0, (dims[a] - size[a]) as isize);
            corner[a] = start as usize;
        }
    }
    Ok((volume.crop(corner, size), mask.crop(corner, size), corner))
}

// ---- SCKV files -------------------------------------------------------

pub const MAGIC: &[u8; 4] = b"SCKV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

fn header(dtype: u8, dims: Dims) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(3);
    out.extend_from_slice(&[0, 0]);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(DTYPE_F64, v.dims);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &Mask) -> Vec<u8> {
    let mut out = header(DTYPE_U8, m.dims);
    out.extend_from_slice(&m.data);
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

fn parse_header(bytes: &[u8], dtype: u8) -> Result<Dims> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad volume magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    if bytes[8] != dtype {
        return Err(format_err(8, format!("dtype {} where {dtype} expected", bytes[8])));
    }
    if bytes[9] != 3 {
        return Err(format_err(9, format!("rank {} where 3 expected", bytes[9])));
    }
    if bytes[10..12] != [0, 0] {
        return Err(format_err(10, "reserved bytes not zero"));
    }
    let dims: Dims = std::array::from_fn(|a| {
        let o = 12 + 4 * a;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    });
    Ok(dims)
}

fn check_payload(bytes: &[u8], need: usize) -> Result<()> {
    if bytes.len() < HEADER_LEN + need {
        return Err(format_err(bytes.len(), format!("truncated payload, {} of {need} bytes", bytes.len() - HEADER_LEN)));
    }
    if bytes.len() > HEADER_LEN + need {
        return Err(format_err(HEADER_LEN + need, "trailing bytes after payload"));
    }
    Ok(())
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let dims = parse_header(bytes, DTYPE_F64)?;
    let n = voxel_count(dims);
    check_payload(bytes, n * 8)?;
    let data = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(dims, data)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let dims = parse_header(bytes, DTYPE_U8)?;
    check_payload(bytes, voxel_count(dims))?;
    Mask::new(dims, bytes[HEADER_LEN..].to_vec())
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    fs::write(path, encode_mask(m))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&fs::read(path)?)
}

// ---- splits and corpora -----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub id: usize,
    pub role: Role,
    pub seed: u64,
    pub volume: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset_seed: u64,
    pub shape: Dims,
    pub labeled_fraction: f64,
    pub test_fraction: f64,
    pub entries: Vec<SplitEntry>,
}

impl SplitManifest {
    pub fn ids(&self, role: Role) -> Vec<usize> {
        self.entries.iter().filter(|e| e.role == role).map(|e| e.id).collect()
    }
}

pub const DEFAULT_LABELED_FRACTION: f64 = 0.10;
pub const DEFAULT_TEST_FRACTION: f64 = 0.15;

/// Roles for `count` ids: a seeded shuffle, the first `⌈·⌉`-rounded
/// labeled share, then the test share, the rest unlabeled. At least one id
/// lands in each role when `count >= 3`.
pub fn split_roles(count: usize, dataset_seed: u64, labeled_fraction: f64, test_fraction: f64) -> Result<Vec<Role>> {
    if count < 3 {
        return Err(contract("a split needs at least 3 phantoms"));
    }
    if !(0.0..1.0).contains(&labeled_fraction) || !(0.0..1.0).contains(&test_fraction) || labeled_fraction + test_fraction >= 1.0 {
        return Err(contract("split fractions must be in [0,1) and sum below 1"));
    }
    let n_l = ((count as f64 * labeled_fraction).round() as usize).clamp(1, count - 2);
    let n_t = ((count as f64 * test_fraction).round() as usize).clamp(1, count - 1 - n_l);
    let mut ids: Vec<usize> = (0..count).collect();
    Rng::with_stream(dataset_seed, 0).shuffle(&mut ids);
    let mut roles = vec![Role::Unlabeled; count];
    for (pos, &id) in ids.iter().enumerate() {
        if pos < n_l {
            roles[id] = Role::Labeled;
        } else if pos < n_l + n_t {
            roles[id] = Role::Test;
        }
    }
    Ok(roles)
}

fn file_names(id: usize) -> (String, String) {
    (format!("phantom_{id:04}_vol.sckv"), format!("phantom_{id:04}_mask.sckv"))
}

/// Writes `count` phantoms and `manifest.json` into `out`.
pub fn generate_corpus(
    out: &Path,
    dataset_seed: u64,
    count: usize,
    dims: Dims,
    labeled_fraction: f64,
    test_fraction: f64,
) -> Result<SplitManifest> {
    let roles = split_roles(count, dataset_seed, labeled_fraction, test_fraction)?;
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    for (id, role) in roles.into_iter().enumerate() {
        let seed = phantom_seed(dataset_seed, id);
        let p = gen_phantom(seed, dims)?;
        let (vol, mask) = file_names(id);
        write_volume(&out.join(&vol), &p.volume)?;
        write_mask(&out.join(&mask), &p.mask)?;
        entries.push(SplitEntry { id, role, seed, volume: vol, mask });
    }
    let manifest = SplitManifest { dataset_seed, shape: dims, labeled_fraction, test_fraction, entries };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: SplitManifest,
    pub volumes: Vec<Volume>,
    pub masks: Vec<Mask>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SplitManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut volumes = Vec::new();
        let mut masks = Vec::new();
        for (i, e) in manifest.entries.iter().enumerate() {
            if e.id != i {
                return Err(contract("manifest ids must be 0..count in order"));
            }
            volumes.push(read_volume(&dir.join(&e.volume))?);
            masks.push(read_mask(&dir.join(&e.mask))?);
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, volumes, masks })
    }

    pub fn phantom(&self, id: usize) -> Phantom {
        Phantom { volume: self.volumes[id].clone(), mask: self.masks[id].clone(), gen_axis: [0.0; 3], seed: self.manifest.entries[id].seed }
    }
}
