//! Paired image datasets: PGM folders, synthetic tasks and fold partitioning.
//!
//! A folder dataset holds `<id>_in.pgm` / `<id>_out.pgm` pairs of binary
//! 8-bit PGM (P5) images. Pixels are mapped linearly from `[0, 255]` to
//! `[-1, 1]`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input/target pairs, every tensor `[C, M, N]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedImageDataset {
    pub ids: Vec<String>,
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl PairedImageDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>, input: Tensor, target: Tensor) -> Result<()> {
        if input.shape() != target.shape() || input.rank() != 3 {
            return Err(Error::SizeMismatch(format!(
                "input {:?} and target {:?} must share one [C, M, N] shape",
                input.shape(),
                target.shape()
            )));
        }
        if let Some(first) = self.inputs.first() {
            if first.shape() != input.shape() {
                return Err(Error::SizeMismatch(format!(
                    "sample shape {:?} differs from dataset shape {:?}",
                    input.shape(),
                    first.shape()
                )));
            }
        }
        self.ids.push(id.into());
        self.inputs.push(input);
        self.targets.push(target);
        Ok(())
    }

    /// `[C, M, N]` of every sample, if any.
    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(Tensor::shape)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

pub fn pixel_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn unit_to_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Decodes a binary PGM with maxval 255 into `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::UnsupportedFormat(m.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated PGM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("only binary PGM (P5) is supported"));
    }
    let mut num = || -> Result<usize> { token()?.parse().map_err(|_| bad("malformed PGM header")) };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad(&format!("PGM maxval {maxval} (only 255 is supported)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let raster = bytes
        .get(start..start + w * h)
        .ok_or_else(|| bad("truncated PGM raster"))?;
    Ok((h, w, raster.to_vec()))
}

pub fn encode_pgm(h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Reads a single-channel PGM as a `[1, M, N]` tensor in `[-1, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let (h, w, px) = decode_pgm(&fs::read(path)?)?;
    Tensor::new(vec![1, h, w], px.into_iter().map(pixel_to_unit).collect())
}

/// Writes the first channel of a `[C, M, N]` tensor as an 8-bit PGM.
pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let [_, h, w] = *image.shape() else {
        return Err(Error::ShapeMismatch(format!("expected [C, M, N], got {:?}", image.shape())));
    };
    let px: Vec<u8> = image.data()[..h * w].iter().map(|&v| unit_to_pixel(v)).collect();
    fs::write(path, encode_pgm(h, w, &px))?;
    Ok(())
}

/// Loads every `<id>_in.pgm` / `<id>_out.pgm` pair under `dir`, sorted by id.
/// Each image must be exactly `size` (height, width).
pub fn load_image_folder(dir: impl AsRef<Path>, size: (usize, usize)) -> Result<PairedImageDataset> {
    load_pairs(dir.as_ref(), Some(size))
}

/// Like [`load_image_folder`], taking the size from the first pair.
pub fn load_image_folder_any_size(dir: impl AsRef<Path>) -> Result<PairedImageDataset> {
    load_pairs(dir.as_ref(), None)
}

fn load_pairs(dir: &Path, mut size: Option<(usize, usize)>) -> Result<PairedImageDataset> {
    let mut pairs: BTreeMap<String, [Option<std::path::PathBuf>; 2]> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let (id, slot) = if let Some(id) = name.strip_suffix("_in.pgm") {
            (id, 0)
        } else if let Some(id) = name.strip_suffix("_out.pgm") {
            (id, 1)
        } else {
            continue;
        };
        pairs.entry(id.to_string()).or_default()[slot] = Some(path.clone());
    }
    let mut ds = PairedImageDataset::default();
    for (id, [input, target]) in pairs {
        let (Some(input), Some(target)) = (input, target) else {
            return Err(Error::MissingPair(id));
        };
        let (x, y) = (read_pgm(&input)?, read_pgm(&target)?);
        let size = *size.get_or_insert((x.shape()[1], x.shape()[2]));
        for (t, p) in [(&x, &input), (&y, &target)] {
            if t.shape()[1..] != [size.0, size.1] {
                return Err(Error::SizeMismatch(format!(
                    "{} is {}x{}, expected {}x{}",
                    p.display(),
                    t.shape()[1],
                    t.shape()[2],
                    size.0,
                    size.1
                )));
            }
        }
        ds.push(id, x, y)?;
    }
    Ok(ds)
}

/// Writes a dataset in the folder layout read by [`load_image_folder`].
pub fn save_image_folder(dir: impl AsRef<Path>, ds: &PairedImageDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for ((id, x), y) in ds.ids.iter().zip(&ds.inputs).zip(&ds.targets) {
        write_pgm(dir.join(format!("{id}_in.pgm")), x)?;
        write_pgm(dir.join(format!("{id}_out.pgm")), y)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Identity,
    BlurInverse,
    NonlinearMap,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Identity => "identity",
            TaskKind::BlurInverse => "blur-inverse",
            TaskKind::NonlinearMap => "nonlinear-map",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TaskKind::Identity),
            "blur-inverse" => Ok(TaskKind::BlurInverse),
            "nonlinear-map" => Ok(TaskKind::NonlinearMap),
            other => Err(Error::UnsupportedFormat(format!(
                "unknown task '{other}' (expected identity, blur-inverse or nonlinear-map)"
            ))),
        }
    }
}

/// Smooth random `size x size` field: four random 2D sinusoids, min-max
/// normalized to `[-1, 1]`.
fn smooth_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(0.5..1.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let n = size as f64;
    let mut field: Vec<f64> = (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64, (i % size) as f64);
            waves
                .iter()
                .map(|[a, fy, fx, ph]| a * (std::f64::consts::TAU * (fy * r + fx * c) / n + ph).sin())
                .sum()
        })
        .collect();
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for v in &mut field {
        *v = 2.0 * (*v - lo) / span - 1.0;
    }
    field
}

/// 3x3 box blur with zero padding (every output is the window sum / 9).
pub fn box_blur(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (0..h as i64).contains(&rr) && (0..w as i64).contains(&cc) {
                        acc += plane[rr as usize * w + cc as usize];
                    }
                }
            }
            out[r * w + c] = acc / 9.0;
        }
    }
    out
}

/// Deterministic synthetic paired task of `count` samples `[channels, size, size]`.
pub fn make_synthetic_task(
    kind: TaskKind,
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<PairedImageDataset> {
    if size < 8 || count < 4 || channels == 0 {
        return Err(Error::TooFewSamples(format!(
            "synthetic tasks need size >= 8, count >= 4 and channels >= 1 (got {size}, {count}, {channels})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = PairedImageDataset::default();
    for i in 0..count {
        let mut x = Vec::with_capacity(channels * size * size);
        let mut y = Vec::with_capacity(channels * size * size);
        for _ in 0..channels {
            let field = smooth_field(&mut rng, size);
            match kind {
                TaskKind::Identity => {
                    x.extend_from_slice(&field);
                    y.extend_from_slice(&field);
                }
                TaskKind::BlurInverse => {
                    x.extend(box_blur(&field, size, size));
                    y.extend_from_slice(&field);
                }
                TaskKind::NonlinearMap => {
                    y.extend(field.iter().map(|v| (2.0 * v).tanh()));
                    x.extend_from_slice(&field);
                }
            }
        }
        let shape = vec![channels, size, size];
        ds.push(format!("{i:04}"), Tensor::new(shape.clone(), x)?, Tensor::new(shape, y)?)?;
    }
    Ok(ds)
}

/// Sample indices of one fold.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `folds` splits of `n` samples. Fold `f` tests on shard `f` of a seeded
/// permutation; the rest is divided into train and validation by
/// `val_fraction`. With one fold the test set is empty.
pub fn partition(n: usize, folds: usize, val_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::TooFewSamples(format!(
            "validation fraction {val_fraction} must lie in [0, 1)"
        )));
    }
    if folds == 0 || n < folds {
        return Err(Error::TooFewSamples(format!("{n} samples cannot form {folds} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let bounds = |f: usize| if folds == 1 { (0, 0) } else { (f * n / folds, (f + 1) * n / folds) };
    (0..folds)
        .map(|f| {
            let (lo, hi) = bounds(f);
            let rest: Vec<usize> = perm[..lo].iter().chain(&perm[hi..]).copied().collect();
            let n_val = (val_fraction * rest.len() as f64).round() as usize;
            let split = FoldSplit {
                train: rest[..rest.len() - n_val].to_vec(),
                val: rest[rest.len() - n_val..].to_vec(),
                test: perm[lo..hi].to_vec(),
            };
            if split.train.is_empty() {
                return Err(Error::TooFewSamples(format!(
                    "fold {f} has no training samples ({n} samples, {folds} folds, val fraction {val_fraction})"
                )));
            }
            Ok(split)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pixel_endpoints() {
        assert_eq!(pixel_to_unit(0), -1.0);
        assert_eq!(pixel_to_unit(255), 1.0);
        for p in 0..=255u8 {
            assert_eq!(unit_to_pixel(pixel_to_unit(p)), p);
        }
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let px: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        assert_eq!(decode_pgm(&encode_pgm(3, 4, &px)).unwrap(), (3, 4, px.clone()));
        let mut commented = b"P5\n# made by hand\n4 3\n255\n".to_vec();
        commented.extend_from_slice(&px);
        assert_eq!(decode_pgm(&commented).unwrap(), (3, 4, px));
    }

    #[test]
    fn pgm_rejects_other_formats() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\0"), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn folder_loading() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic_task(TaskKind::NonlinearMap, 4, 8, 1, 3).unwrap().subset(&[0, 1, 2]);
        save_image_folder(dir.path(), &ds).unwrap();
        let back = load_image_folder(dir.path(), (8, 8)).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.ids, ds.ids);
        for (a, b) in back.inputs.iter().zip(&ds.inputs) {
            assert!(a.max_abs_diff(b).unwrap() <= 1.0 / 255.0 + 1e-12);
        }
        assert!(matches!(load_image_folder(dir.path(), (8, 9)), Err(Error::SizeMismatch(_))));
        fs::write(dir.path().join("zz_in.pgm"), encode_pgm(8, 8, &[0; 64])).unwrap();
        assert!(matches!(load_image_folder(dir.path(), (8, 8)), Err(Error::MissingPair(id)) if id == "zz"));
    }

    #[test]
    fn identity_task() {
        let ds = make_synthetic_task(TaskKind::Identity, 5, 8, 2, 1).unwrap();
        assert_eq!(ds.sample_shape(), Some(&[2, 8, 8][..]));
        assert!(ds.inputs.iter().zip(&ds.targets).all(|(x, y)| x == y));
    }

    #[test]
    fn nonlinear_task_is_tanh_of_twice_the_input() {
        let ds = make_synthetic_task(TaskKind::NonlinearMap, 4, 8, 1, 2).unwrap();
        for (x, y) in ds.inputs.iter().zip(&ds.targets) {
            for (&a, &b) in x.data().iter().zip(y.data()) {
                assert_eq!(b, (2.0 * a).tanh());
            }
        }
        assert_eq!((2.0f64 * 0.0).tanh(), 0.0);
    }

    // Oracle: blur recomputed independently by direct slicing with explicit bounds.
    #[test]
    fn blur_inverse_task_reproduces_input() {
        let ds = make_synthetic_task(TaskKind::BlurInverse, 4, 9, 1, 5).unwrap();
        for (x, y) in ds.inputs.iter().zip(&ds.targets) {
            let t = y.data();
            for r in 0..9usize {
                for c in 0..9usize {
                    let rows = r.saturating_sub(1)..=(r + 1).min(8);
                    let mut acc = 0.0;
                    for rr in rows {
                        acc += t[rr * 9 + c.saturating_sub(1)..=rr * 9 + (c + 1).min(8)].iter().sum::<f64>();
                    }
                    assert!((x.data()[r * 9 + c] - acc / 9.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn synthetic_preconditions() {
        assert!(make_synthetic_task(TaskKind::Identity, 3, 8, 1, 0).is_err());
        assert!(make_synthetic_task(TaskKind::Identity, 4, 7, 1, 0).is_err());
    }

    #[test]
    fn task_names_round_trip() {
        for k in [TaskKind::Identity, TaskKind::BlurInverse, TaskKind::NonlinearMap] {
            assert_eq!(k.to_string().parse::<TaskKind>().unwrap(), k);
        }
        assert!("denoise".parse::<TaskKind>().is_err());
    }

    #[test]
    fn single_fold_keeps_everything_in_train() {
        let f = partition(10, 1, 0.0, 3).unwrap();
        assert_eq!(f.len(), 1);
        let mut train = f[0].train.clone();
        train.sort();
        assert_eq!(train, (0..10).collect::<Vec<_>>());
        assert!(f[0].val.is_empty() && f[0].test.is_empty());
    }

    #[test]
    fn ten_folds_of_a_hundred() {
        let f = partition(100, 10, 0.1, 7).unwrap();
        let mut all: Vec<usize> = f.iter().flat_map(|s| s.test.clone()).collect();
        assert!(f.iter().all(|s| s.test.len() == 10 && s.val.len() == 9 && s.train.len() == 81));
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(partition(3, 4, 0.0, 0), Err(Error::TooFewSamples(_))));
        assert!(matches!(partition(2, 2, 0.5, 0), Err(Error::TooFewSamples(_))));
        assert!(partition(5, 0, 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn synthetic_values_in_range_and_deterministic(kind in 0usize..3, seed in any::<u64>()) {
            let kind = [TaskKind::Identity, TaskKind::BlurInverse, TaskKind::NonlinearMap][kind];
            let a = make_synthetic_task(kind, 4, 8, 1, seed).unwrap();
            prop_assert!(a.inputs.iter().chain(&a.targets).all(|t| t.data().iter().all(|v| (-1.0..=1.0).contains(v))));
            let b = make_synthetic_task(kind, 4, 8, 1, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn folds_are_disjoint_and_exhaustive(n in 2usize..60, folds in 1usize..8, val in 0.0f64..0.5, seed in any::<u64>()) {
            prop_assume!(folds <= n);
            if let Ok(splits) = partition(n, folds, val, seed) {
                let mut tests: Vec<usize> = splits.iter().flat_map(|s| s.test.clone()).collect();
                tests.sort();
                if folds > 1 {
                    prop_assert_eq!(tests, (0..n).collect::<Vec<_>>());
                }
                for s in &splits {
                    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
                    all.sort();
                    prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                }
            }
        }
    }
}
