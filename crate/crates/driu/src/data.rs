//! Dataset loading (normalized on-disk layout with a `split.txt` manifest),
//! PPM/PGM codecs, weight-file serialization and a synthetic fundus
//! generator for self-contained runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::loss::GroundTruthMask;
use crate::net::{NetworkParams, Task};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8] = b"DRIUW1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// RGB image in [0,1], channel-first.
    pub image: Tensor<f32>,
    /// First-annotator segmentation, the gold standard.
    pub gold: GroundTruthMask,
    /// Second-annotator segmentation, for human performance points.
    pub second: Option<GroundTruthMask>,
    /// Field-of-view mask.
    pub fov: Option<GroundTruthMask>,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Drive,
    Stare,
    Drions,
    Rimone,
    Generic,
}

impl Layout {
    pub fn parse(s: &str) -> Result<Layout> {
        match s {
            "drive" => Ok(Layout::Drive),
            "stare" => Ok(Layout::Stare),
            "drions" => Ok(Layout::Drions),
            "rimone" => Ok(Layout::Rimone),
            "generic" => Ok(Layout::Generic),
            _ => Err(Error::InvalidArgument(format!(
                "unknown layout {:?} (expected drive|stare|drions|rimone|generic)",
                s
            ))),
        }
    }

    /// Expected (train, test) cardinalities, if the layout pins them.
    fn expected_sizes(self) -> Option<(usize, usize)> {
        match self {
            Layout::Drive => Some((20, 20)),
            Layout::Stare => Some((10, 10)),
            Layout::Drions => Some((60, 50)),
            Layout::Rimone => Some((99, 60)),
            Layout::Generic => None,
        }
    }
}

// ---------------------------------------------------------------------------
// netpbm codecs
// ---------------------------------------------------------------------------

struct PnmReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        PnmReader { bytes, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.pos, msg)
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.bytes.len() < magic.len() || &self.bytes[..magic.len()] != magic {
            return Err(self.err(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        self.pos = magic.len();
        Ok(())
    }

    fn skip_space(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(self.err("truncated header")),
            }
        }
    }

    fn read_number(&mut self) -> Result<usize> {
        self.skip_space()?;
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_digit() {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("number out of range"))
    }

    fn payload(&mut self, expected_len: usize) -> Result<&'a [u8]> {
        // single whitespace byte separates header from payload
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => self.pos += 1,
            _ => return Err(self.err("missing whitespace before payload")),
        }
        let rest = &self.bytes[self.pos..];
        if rest.len() < expected_len {
            return Err(Error::format(
                self.bytes.len(),
                format!(
                    "payload truncated: need {} bytes, have {}",
                    expected_len,
                    rest.len()
                ),
            ));
        }
        if rest.len() > expected_len {
            return Err(Error::format(
                self.pos + expected_len,
                "trailing bytes after payload",
            ));
        }
        self.pos += expected_len;
        Ok(rest)
    }
}

fn read_gray(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u16>)> {
    let mut r = PnmReader::new(bytes);
    r.expect_magic(b"P5")?;
    let width = r.read_number()?;
    let height = r.read_number()?;
    let maxval = r.read_number()?;
    if width == 0 || height == 0 {
        return Err(r.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(r.err(format!("unsupported maxval {}", maxval)));
    }
    let wide = maxval > 255;
    let payload = r.payload(width * height * if wide { 2 } else { 1 })?;
    let values = if wide {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        payload.iter().map(|&b| b as u16).collect()
    };
    Ok((width, height, maxval, values))
}

/// 8-bit P6 RGB -> [3,H,W] tensor in [0,1].
pub fn read_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = PnmReader::new(bytes);
    r.expect_magic(b"P6")?;
    let width = r.read_number()?;
    let height = r.read_number()?;
    let maxval = r.read_number()?;
    if width == 0 || height == 0 {
        return Err(r.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(r.err(format!("unsupported maxval {} for P6", maxval)));
    }
    let payload = r.payload(width * height * 3)?;
    let mut t = Tensor::zeros(&[3, height, width])?;
    let scale = 1.0 / maxval as f32;
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.data_mut()[c * height * width + i] = px[c] as f32 * scale;
        }
    }
    Ok(t)
}

/// [3,H,W] tensor in [0,1] -> 8-bit P6.
pub fn write_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "image must be [3,H,W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            let v = image.data()[c * h * w + i].clamp(0.0, 1.0);
            out.push((v * 255.0 + 0.5).floor() as u8);
        }
    }
    Ok(out)
}

/// P5 gray -> binary mask: foreground iff pixel > maxval/2.
pub fn read_mask(bytes: &[u8]) -> Result<GroundTruthMask> {
    let (w, h, maxval, values) = read_gray(bytes)?;
    GroundTruthMask::new(h, w, values.iter().map(|&v| v as usize * 2 > maxval).collect())
}

pub fn write_mask(mask: &GroundTruthMask) -> Vec<u8> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend(mask.foreground().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// P5 gray -> [1,H,W] probability map in [0,1].
pub fn read_probmap(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, maxval, values) = read_gray(bytes)?;
    Tensor::from_vec(
        &[1, h, w],
        values
            .iter()
            .map(|&v| v as f32 / maxval as f32)
            .collect(),
    )
}

/// [1,H,W] probability map -> 16-bit P5 (maxval 65535, round half up).
pub fn write_probmap(prob: &Tensor<f32>) -> Result<Vec<u8>> {
    if prob.shape().len() != 3 || prob.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "probability map must be [1,H,W], got {:?}",
            prob.shape()
        )));
    }
    let (h, w) = (prob.shape()[1], prob.shape()[2]);
    let mut out = format!("P5\n{} {}\n65535\n", w, h).into_bytes();
    for &p in prob.data() {
        let q = ((p as f64).clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// weight file
// ---------------------------------------------------------------------------

pub fn save_weights(params: &NetworkParams<f32>) -> Vec<u8> {
    let mut out = WEIGHT_MAGIC.to_vec();
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_weights(bytes: &[u8]) -> Result<NetworkParams<f32>> {
    if bytes.len() < WEIGHT_MAGIC.len() || &bytes[..WEIGHT_MAGIC.len()] != WEIGHT_MAGIC {
        return Err(Error::format(0, "bad weight-file magic"));
    }
    let mut pos = WEIGHT_MAGIC.len();
    let mut params = NetworkParams::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(bytes.len(), "truncated weight file"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    while pos < bytes.len() {
        let name_len = read_u32(&mut pos)? as usize;
        if name_len > 4096 {
            return Err(Error::format(pos, format!("name length {} too large", name_len)));
        }
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format(pos, "parameter name is not UTF-8"))?;
        let rank = read_u32(&mut pos)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(pos, format!("bad rank {}", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = read_u32(&mut pos)? as usize;
            if d == 0 {
                return Err(Error::format(pos, "zero extent in weight file"));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::format(pos, "shape overflow"))?;
            shape.push(d);
        }
        let payload = take(&mut pos, count * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// dataset loading
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct Manifest {
    train: Vec<String>,
    test: Vec<String>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    let mut section: Option<bool> = None; // Some(true) = train
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "[train]" => section = Some(true),
            "[test]" => section = Some(false),
            id => match section {
                Some(true) => manifest.train.push(id.to_string()),
                Some(false) => manifest.test.push(id.to_string()),
                None => {
                    return Err(Error::Dataset(format!(
                        "id {:?} appears before any [train]/[test] section",
                        id
                    )))
                }
            },
        }
    }
    let train_set: BTreeSet<_> = manifest.train.iter().collect();
    if let Some(dup) = manifest.test.iter().find(|id| train_set.contains(id)) {
        return Err(Error::Dataset(format!(
            "id {:?} appears in both train and test",
            dup
        )));
    }
    Ok(manifest)
}

fn gt_dir(root: &Path, task: Task) -> PathBuf {
    let shared = root.join("gt");
    if shared.is_dir() {
        shared
    } else {
        root.join(format!("gt_{}", task.name()))
    }
}

fn load_sample(root: &Path, gt: &Path, id: &str) -> Result<Sample> {
    let image_path = root.join("images").join(format!("{}.ppm", id));
    let image = read_image(&fs::read(&image_path).map_err(|e| {
        Error::Dataset(format!("cannot read image {}: {}", image_path.display(), e))
    })?)?;
    let gold_path = gt.join(format!("{}.pgm", id));
    let gold = read_mask(&fs::read(&gold_path).map_err(|e| {
        Error::Dataset(format!(
            "missing gold mask for id {:?}: {} ({})",
            id,
            gold_path.display(),
            e
        ))
    })?)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let check = |m: &GroundTruthMask, what: &str| -> Result<()> {
        if m.height() != h || m.width() != w {
            return Err(Error::Dataset(format!(
                "{} mask for id {:?} is {}x{} but image is {}x{}",
                what,
                id,
                m.height(),
                m.width(),
                h,
                w
            )));
        }
        Ok(())
    };
    check(&gold, "gold")?;
    let read_optional = |dir: &str| -> Result<Option<GroundTruthMask>> {
        let p = root.join(dir).join(format!("{}.pgm", id));
        if p.is_file() {
            Ok(Some(read_mask(&fs::read(&p)?)?))
        } else {
            Ok(None)
        }
    };
    let second = read_optional("gt2")?;
    if let Some(m) = &second {
        check(m, "second-annotator")?;
    }
    let fov = read_optional("fov")?;
    if let Some(m) = &fov {
        check(m, "fov")?;
    }
    Ok(Sample {
        id: id.to_string(),
        image,
        gold,
        second,
        fov,
    })
}

/// Loads a dataset in the normalized layout:
/// `split.txt` manifest plus `images/`, `gt/` (or `gt_<task>/`), `gt2/`, `fov/`.
pub fn load_dataset(root: &Path, layout: Layout, task: Task) -> Result<DatasetSplit> {
    let manifest_path = root.join("split.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Dataset(format!(
            "cannot read manifest {}: {}",
            manifest_path.display(),
            e
        ))
    })?;
    let manifest = parse_manifest(&text)?;

    // STARE: split by sorted id order, first 10 train, last 10 test.
    let (train_ids, test_ids) = if layout == Layout::Stare {
        let mut all: Vec<String> = manifest
            .train
            .iter()
            .chain(manifest.test.iter())
            .cloned()
            .collect();
        all.sort();
        if all.len() != 20 {
            return Err(Error::Dataset(format!(
                "stare layout expects 20 images, manifest lists {}",
                all.len()
            )));
        }
        let test = all.split_off(10);
        (all, test)
    } else {
        (manifest.train, manifest.test)
    };

    if let Some((n_train, n_test)) = layout.expected_sizes() {
        if train_ids.len() != n_train || test_ids.len() != n_test {
            return Err(Error::Dataset(format!(
                "layout expects {}/{} train/test ids, manifest has {}/{}",
                n_train,
                n_test,
                train_ids.len(),
                test_ids.len()
            )));
        }
    }

    let gt = gt_dir(root, task);
    let load_all = |ids: &[String]| -> Result<Vec<Sample>> {
        ids.iter().map(|id| load_sample(root, &gt, id)).collect()
    };
    Ok(DatasetSplit {
        name: root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        train: load_all(&train_ids)?,
        test: load_all(&test_ids)?,
    })
}

// ---------------------------------------------------------------------------
// synthetic fundus generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub vessel: GroundTruthMask,
    pub disc: GroundTruthMask,
    pub fov: GroundTruthMask,
}

impl SynthSample {
    pub fn sample_for(&self, task: Task) -> Sample {
        let gold = match task {
            Task::Vessel => self.vessel.clone(),
            Task::Disc => self.disc.clone(),
        };
        Sample {
            id: self.id.clone(),
            image: self.image.clone(),
            gold,
            second: None,
            fov: Some(self.fov.clone()),
        }
    }

    pub fn vessel_sample(&self) -> Sample {
        self.sample_for(Task::Vessel)
    }

    pub fn disc_sample(&self) -> Sample {
        self.sample_for(Task::Disc)
    }
}

fn stamp_disk(mask: &mut [bool], size: usize, cy: f64, cx: f64, radius: f64) {
    let r2 = radius * radius;
    let y0 = ((cy - radius).floor().max(0.0)) as usize;
    let y1 = ((cy + radius).ceil().min(size as f64 - 1.0)) as usize;
    let x0 = ((cx - radius).floor().max(0.0)) as usize;
    let x1 = ((cx + radius).ceil().min(size as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r2 {
                mask[y * size + x] = true;
            }
        }
    }
}

/// Grows one random vessel branch, stamping its footprint into `mask`.
fn grow_branch(
    mask: &mut [bool],
    size: usize,
    rng: &mut CounterRng,
    mut y: f64,
    mut x: f64,
    mut angle: f64,
    width: f64,
    depth: usize,
    fov_c: f64,
    fov_r: f64,
) {
    let steps = 12 + rng.below(14);
    for _ in 0..steps {
        let dy = y - fov_c;
        let dx = x - fov_c;
        if (dy * dy + dx * dx).sqrt() > fov_r - 1.0 {
            return;
        }
        stamp_disk(mask, size, y, x, width * 0.5);
        angle += rng.uniform(-0.35, 0.35);
        y += angle.sin() * 1.5;
        x += angle.cos() * 1.5;
        if depth > 0 && rng.next_f64() < 0.04 {
            let fork = rng.uniform(0.4, 0.9);
            grow_branch(
                mask,
                size,
                rng,
                y,
                x,
                angle + fork,
                (width - 0.7).max(1.0),
                depth - 1,
                fov_c,
                fov_r,
            );
            angle -= fork * 0.5;
        }
    }
}

/// Deterministic synthetic fundus: dark circular field of view, one bright
/// disc, a random darker vessel tree. Masks come exactly from the generating
/// geometry.
pub fn synth_fundus(seed: u64, size: usize) -> Result<SynthSample> {
    if size < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic image size must be >= 32, got {}",
            size
        )));
    }
    let mut rng = CounterRng::new(seed, "synth");
    let fov_c = (size as f64 - 1.0) / 2.0;
    let fov_r = 0.47 * size as f64;

    let mut fov = vec![false; size * size];
    stamp_disk(&mut fov, size, fov_c, fov_c, fov_r);
    let fov_count = fov.iter().filter(|&&b| b).count();

    // optic disc fully inside the field of view
    let disc_r = rng.uniform(0.10, 0.16) * size as f64;
    let max_off = (fov_r - disc_r - 2.0).max(0.0);
    let off_angle = rng.uniform(0.0, std::f64::consts::TAU);
    let off = rng.uniform(0.2, 0.9) * max_off;
    let disc_cy = fov_c + off * off_angle.sin();
    let disc_cx = fov_c + off * off_angle.cos();
    let mut disc = vec![false; size * size];
    stamp_disk(&mut disc, size, disc_cy, disc_cx, disc_r);

    // vessel trees rooted at the disc, grown one at a time until the
    // foreground fraction clears 3% of the field of view; each tree is
    // small enough that the total stays well under 20%
    let mut vessel = vec![false; size * size];
    for _ in 0..400 {
        let angle = rng.uniform(0.0, std::f64::consts::TAU);
        let width = rng.uniform(1.0, 2.4);
        grow_branch(
            &mut vessel,
            size,
            &mut rng,
            disc_cy,
            disc_cx,
            angle,
            width,
            2,
            fov_c,
            fov_r,
        );
        let frac = vessel
            .iter()
            .zip(&fov)
            .filter(|(&v, &f)| v && f)
            .count() as f64
            / fov_count as f64;
        if frac >= 0.03 {
            break;
        }
    }
    // clip vessels to the field of view
    for (v, &f) in vessel.iter_mut().zip(&fov) {
        *v &= f;
    }

    // render: reddish background inside the FOV, bright disc, dark vessels
    let mut image = Tensor::zeros(&[3, size, size])?;
    let base = [0.55f32, 0.30, 0.18];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            if !fov[i] {
                continue;
            }
            let dy = y as f64 - fov_c;
            let dx = x as f64 - fov_c;
            let vign = 1.0 - 0.35 * ((dy * dy + dx * dx).sqrt() / fov_r).powi(2);
            for c in 0..3 {
                let mut v = base[c] * vign as f32;
                if disc[i] {
                    v = (v + 0.45).min(1.0);
                }
                if vessel[i] {
                    v *= 0.45;
                }
                image.data_mut()[c * size * size + i] = v;
            }
        }
    }

    Ok(SynthSample {
        id: format!("synth{:04}", seed),
        image,
        vessel: GroundTruthMask::new(size, size, vessel)?,
        disc: GroundTruthMask::new(size, size, disc)?,
        fov: GroundTruthMask::new(size, size, fov)?,
    })
}

/// Writes `count` synthetic samples as a generic-layout dataset with
/// per-task ground truth directories. First half train, second half test.
pub fn save_synth_dataset(dir: &Path, seed: u64, count: usize, size: usize) -> Result<Vec<String>> {
    for sub in ["images", "gt_vessel", "gt_disc", "fov"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let s = synth_fundus(seed.wrapping_add(i as u64), size)?;
        let id = format!("synth{:04}", i);
        fs::write(dir.join("images").join(format!("{}.ppm", id)), write_image(&s.image)?)?;
        fs::write(
            dir.join("gt_vessel").join(format!("{}.pgm", id)),
            write_mask(&s.vessel),
        )?;
        fs::write(
            dir.join("gt_disc").join(format!("{}.pgm", id)),
            write_mask(&s.disc),
        )?;
        fs::write(dir.join("fov").join(format!("{}.pgm", id)), write_mask(&s.fov))?;
        ids.push(id);
    }
    let n_train = count.div_ceil(2);
    let mut manifest = String::from("[train]\n");
    for id in &ids[..n_train] {
        manifest.push_str(id);
        manifest.push('\n');
    }
    manifest.push_str("[test]\n");
    for id in &ids[n_train..] {
        manifest.push_str(id);
        manifest.push('\n');
    }
    fs::write(dir.join("split.txt"), manifest)?;
    Ok(ids)
}

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename). A failed run leaves no partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
