//! Synthetic distortion corpus: procedural reference images, four graded
//! distortion families, and a linear proxy MOS that falls with severity.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{self, stream};

pub const MAX_LEVEL: u8 = 5;
pub const MIN_SIDE: usize = 8;
pub const MANIFEST_VERSION: u32 = 1;
pub const MAX_MOS_JITTER: f64 = 0.02;
pub const BLOCK_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    GaussianBlur,
    WhiteNoise,
    BlockArtifact,
    ContrastChange,
    Identity,
}

impl DistortionKind {
    /// The four graded families used to build a corpus.
    pub const GRADED: [DistortionKind; 4] = [
        DistortionKind::GaussianBlur,
        DistortionKind::WhiteNoise,
        DistortionKind::BlockArtifact,
        DistortionKind::ContrastChange,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::WhiteNoise => "white_noise",
            DistortionKind::BlockArtifact => "block_artifact",
            DistortionKind::ContrastChange => "contrast_change",
            DistortionKind::Identity => "identity",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian_blur" | "blur" | "gblur" => DistortionKind::GaussianBlur,
            "white_noise" | "noise" | "wn" => DistortionKind::WhiteNoise,
            "block_artifact" | "block" | "blocking" => DistortionKind::BlockArtifact,
            "contrast_change" | "contrast" => DistortionKind::ContrastChange,
            "identity" | "none" => DistortionKind::Identity,
            other => return Err(Error::invalid(format!("unsupported distortion kind `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: u8,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: u8) -> Self {
        DistortionSpec { kind, level }
    }

    pub fn is_identity(&self) -> bool {
        self.level == 0 || self.kind == DistortionKind::Identity
    }
}

pub fn blur_sigma(level: u8) -> f64 {
    level as f64 * 0.5
}

pub fn noise_sigma(level: u8) -> f64 {
    level as f64 * 0.05
}

pub fn contrast_gain(level: u8) -> f64 {
    1.0 - level as f64 * 0.12
}

/// Blend weight toward the 4x4 block mean.
pub fn block_weight(level: u8) -> f64 {
    level as f64 / MAX_LEVEL as f64
}

/// Apply one graded distortion. Pure: the output depends only on the arguments.
pub fn apply_distortion(reference: &Image, spec: DistortionSpec, seed: u64) -> Result<Image> {
    if spec.level > MAX_LEVEL {
        return Err(Error::invalid(format!("level {} outside 0..={MAX_LEVEL}", spec.level)));
    }
    if reference.height() < MIN_SIDE || reference.width() < MIN_SIDE {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than {MIN_SIDE}x{MIN_SIDE}",
            reference.height(),
            reference.width()
        )));
    }
    if spec.is_identity() {
        return Ok(reference.clone());
    }
    let out = match spec.kind {
        DistortionKind::GaussianBlur => gaussian_blur(reference, blur_sigma(spec.level)),
        DistortionKind::WhiteNoise => {
            let mut rng = seed::rng(seed, &[stream::CORPUS_DISTORTION, spec.kind.tag(), spec.level as u64]);
            white_noise(reference, noise_sigma(spec.level), &mut rng)
        }
        DistortionKind::BlockArtifact => block_artifact(reference, block_weight(spec.level)),
        DistortionKind::ContrastChange => contrast_change(reference, contrast_gain(spec.level)),
        DistortionKind::Identity => unreachable!(),
    };
    Ok(out.clamp(0.0, 1.0))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let [h, w, c] = img.shape();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Image::from_fn(h, w, c, |(y, x, ch)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * img.0[[y, clampi(x as isize + i as isize - r, w), ch]])
            .sum()
    });
    Image::from_fn(h, w, c, |(y, x, ch)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * horiz.0[[clampi(y as isize + i as isize - r, h), x, ch]])
            .sum()
    })
}

fn white_noise(img: &Image, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut out = img.clone();
    for v in out.0.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v += sigma * n;
    }
    out
}

fn block_artifact(img: &Image, weight: f64) -> Image {
    let [h, w, c] = img.shape();
    let mut out = img.clone();
    for by in (0..h).step_by(BLOCK_SIZE) {
        for bx in (0..w).step_by(BLOCK_SIZE) {
            let (ye, xe) = ((by + BLOCK_SIZE).min(h), (bx + BLOCK_SIZE).min(w));
            let count = ((ye - by) * (xe - bx)) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        sum += img.0[[y, x, ch]];
                    }
                }
                let mean = sum / count;
                for y in by..ye {
                    for x in bx..xe {
                        let v = img.0[[y, x, ch]];
                        out.0[[y, x, ch]] = (1.0 - weight) * v + weight * mean;
                    }
                }
            }
        }
    }
    out
}

fn contrast_change(img: &Image, gain: f64) -> Image {
    let [h, w, c] = img.shape();
    let mut out = img.clone();
    for ch in 0..c {
        let mean = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| img.0[[y, x, ch]])
            .sum::<f64>()
            / (h * w) as f64;
        for y in 0..h {
            for x in 0..w {
                out.0[[y, x, ch]] = mean + gain * (img.0[[y, x, ch]] - mean);
            }
        }
    }
    out
}

/// Proxy MOS: `1 - level / 5`.
pub fn mos_proxy(spec: DistortionSpec) -> f64 {
    if spec.kind == DistortionKind::Identity {
        return 1.0;
    }
    1.0 - spec.level as f64 / MAX_LEVEL as f64
}

/// Proxy MOS with a seeded perturbation of at most `amplitude` (capped at
/// 0.02, well below the 0.2 gap between levels), clamped to `[0, 1]`.
pub fn mos_proxy_jittered(spec: DistortionSpec, amplitude: f64, seed: u64) -> f64 {
    let amp = amplitude.clamp(0.0, MAX_MOS_JITTER);
    let base = mos_proxy(spec);
    if amp == 0.0 {
        return base;
    }
    let mut rng = seed::rng(seed, &[stream::CORPUS_JITTER]);
    (base + rng.random_range(-amp..=amp)).clamp(0.0, 1.0)
}

/// Procedural reference: a colour gradient under a fine full-frame
/// checkerboard, checkerboard patches and Gaussian blobs, stretched to span
/// `[0.05, 0.95]`.
pub fn reference_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = seed::rng(seed, &[stream::CORPUS_REFERENCE]);
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = Image::from_fn(h, w, 3, |(y, x, ch)| {
        let u = ((x as f64 / w as f64 - 0.5) * dx + (y as f64 / h as f64 - 0.5) * dy + 0.75) / 1.5;
        let u = u.clamp(0.0, 1.0);
        c0[ch] * (1.0 - u) + c1[ch] * u
    });

    let cell = rng.random_range(2..=4usize);
    let tex = color(&mut rng).map(|v| 0.2 + 0.15 * v);
    for y in 0..h {
        for x in 0..w {
            let sign = if (y / cell + x / cell) % 2 == 0 { 1.0 } else { -1.0 };
            for ch in 0..3 {
                img.0[[y, x, ch]] += sign * tex[ch];
            }
        }
    }

    let patches = rng.random_range(1..=2);
    for _ in 0..patches {
        let cell = rng.random_range(2..=5usize);
        let (ph, pw) = (rng.random_range(h / 4..=h / 2), rng.random_range(w / 4..=w / 2));
        let (py, px) = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
        let (a, b) = (color(&mut rng), color(&mut rng));
        for y in py..py + ph {
            for x in px..px + pw {
                let on = ((y - py) / cell + (x - px) / cell) % 2 == 0;
                for ch in 0..3 {
                    img.0[[y, x, ch]] = if on { a[ch] } else { b[ch] };
                }
            }
        }
    }

    let blobs = rng.random_range(2..=4);
    for _ in 0..blobs {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let s = rng.random_range(0.06..0.25) * h.min(w) as f64;
        let amp = color(&mut rng).map(|v| v * 1.6 - 0.8);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * s * s)).exp();
                for ch in 0..3 {
                    img.0[[y, x, ch]] += amp[ch] * g;
                }
            }
        }
    }

    let (lo, hi) = img
        .0
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-9);
    Image(img.0.mapv(|v| 0.05 + 0.9 * (v - lo) / span))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub reference_id: String,
    pub reference: Image,
    pub distorted: Image,
    pub distortion: DistortionSpec,
    pub mos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub reference_path: String,
    pub distorted_path: String,
    pub kind: DistortionKind,
    pub level: u8,
    pub mos: f64,
}

impl ManifestSample {
    /// Reference id, taken from the reference file stem.
    pub fn reference_id(&self) -> String {
        Path::new(&self.reference_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub samples: Vec<ManifestSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_references: usize,
    pub image_size: (usize, usize),
    pub kinds: Vec<DistortionKind>,
    pub levels: Vec<u8>,
    pub seed: u64,
    #[serde(default)]
    pub mos_jitter: f64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_references == 0 {
            return Err(Error::invalid("n_references must be at least 1"));
        }
        if self.kinds.is_empty() || self.levels.is_empty() {
            return Err(Error::invalid("kinds and levels must be non-empty"));
        }
        if self.image_size.0 < MIN_SIDE || self.image_size.1 < MIN_SIDE {
            return Err(Error::invalid(format!("image size must be at least {MIN_SIDE}x{MIN_SIDE}")));
        }
        if let Some(l) = self.levels.iter().find(|l| **l > MAX_LEVEL) {
            return Err(Error::invalid(format!("level {l} outside 0..={MAX_LEVEL}")));
        }
        Ok(())
    }

    fn kinds_sorted(&self) -> Vec<DistortionKind> {
        self.kinds.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn levels_sorted(&self) -> Vec<u8> {
        self.levels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

pub fn reference_name(i: usize) -> String {
    format!("ref{i:03}")
}

/// Build the corpus in memory. Images are rounded to the 8-bit grid so the
/// result equals what [`load_corpus`] reads back from disk.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut out = Vec::new();
    for r in 0..spec.n_references {
        let ref_id = reference_name(r);
        let reference = reference_image(h, w, seed::derive(spec.seed, &[r as u64])).quantized();
        for kind in spec.kinds_sorted() {
            for level in spec.levels_sorted() {
                let ds = DistortionSpec::new(kind, level);
                let sample_seed = seed::derive(spec.seed, &[r as u64, kind.tag(), level as u64]);
                let distorted = apply_distortion(&reference, ds, sample_seed)?.quantized();
                out.push(ImageSample {
                    id: format!("{ref_id}_{kind}_l{level}"),
                    reference_id: ref_id.clone(),
                    reference: reference.clone(),
                    distorted,
                    distortion: ds,
                    mos: mos_proxy_jittered(ds, spec.mos_jitter, sample_seed),
                });
            }
        }
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write samples as PNGs plus `manifest.json` under `out_dir`.
pub fn write_corpus(samples: &[ImageSample], out_dir: &Path) -> Result<CorpusManifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot write an empty corpus"))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written_refs = BTreeSet::new();
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let ref_rel = format!("reference/{}.png", s.reference_id);
        if written_refs.insert(s.reference_id.clone()) {
            s.reference.save_png(&out_dir.join(&ref_rel))?;
        }
        let dis_rel = format!("distorted/{}.png", s.id);
        s.distorted.save_png(&out_dir.join(&dis_rel))?;
        entries.push(ManifestSample {
            id: s.id.clone(),
            reference_path: ref_rel,
            distorted_path: dis_rel,
            kind: s.distortion.kind,
            level: s.distortion.level,
            mos: s.mos,
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        image_size: (first.reference.height(), first.reference.width()),
        samples: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn gen_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<CorpusManifest> {
    let samples = generate(spec)?;
    write_corpus(&samples, out_dir)
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load a corpus, checking that ids are unique and every file exists.
pub fn load_corpus(manifest_path: &Path) -> Result<(CorpusManifest, Vec<ImageSample>)> {
    let manifest = read_manifest(manifest_path)?;
    let root: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ids = BTreeSet::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for m in &manifest.samples {
        if !ids.insert(m.id.clone()) {
            return Err(Error::invalid(format!("duplicate sample id `{}`", m.id)));
        }
        let reference = Image::load_png(&root.join(&m.reference_path))?;
        let distorted = Image::load_png(&root.join(&m.distorted_path))?;
        if reference.shape() != distorted.shape() {
            return Err(Error::ShapeMismatch {
                expected: reference.shape().to_vec(),
                actual: distorted.shape().to_vec(),
            });
        }
        samples.push(ImageSample {
            id: m.id.clone(),
            reference_id: m.reference_id(),
            reference,
            distorted,
            distortion: DistortionSpec::new(m.kind, m.level),
            mos: m.mos,
        });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize, lo: f64, hi: f64) -> Image {
        Image::from_fn(h, w, 3, |(y, x, _)| if (y + x) % 2 == 0 { lo } else { hi })
    }

    #[test]
    fn level_zero_is_identity_for_every_kind() {
        let r = reference_image(16, 16, 3);
        for kind in DistortionKind::GRADED {
            assert_eq!(apply_distortion(&r, DistortionSpec::new(kind, 0), 9).unwrap(), r);
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let r = Image::constant(16, 16, 3, 0.5);
        let out = apply_distortion(&r, DistortionSpec::new(DistortionKind::GaussianBlur, 3), 0).unwrap();
        for v in out.0.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn white_noise_variance_matches_configured_sigma() {
        // Pool deviations over many seeds: 200 x 8x8x3 = 38400 samples. The
        // checkerboard sits near mid-gray because clamping to [0, 1] at
        // sigma = 0.25 already removes ~8% of the variance there.
        let r = checker(8, 8, 0.48, 0.52);
        let spec = DistortionSpec::new(DistortionKind::WhiteNoise, 5);
        let mut devs = Vec::new();
        for s in 0..200u64 {
            let out = apply_distortion(&r, spec, 7 + s).unwrap();
            devs.extend(out.0.iter().zip(r.0.iter()).map(|(a, b)| a - b));
        }
        assert!(devs.len() >= 10_000);
        let n = devs.len() as f64;
        let mean = devs.iter().sum::<f64>() / n;
        let var = devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = noise_sigma(5).powi(2);
        assert!((var / target - 1.0).abs() < 0.10, "variance {var} vs {target}");
    }

    #[test]
    fn distortion_is_deterministic_and_pure() {
        let r = reference_image(16, 16, 11);
        for kind in DistortionKind::GRADED {
            let s = DistortionSpec::new(kind, 4);
            let a = apply_distortion(&r, s, 5).unwrap();
            let b = apply_distortion(&r, s, 5).unwrap();
            assert_eq!(a, b);
            assert!(a.0.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.shape(), r.shape());
        }
    }

    #[test]
    fn rejects_small_images_and_bad_levels() {
        let small = Image::constant(7, 16, 3, 0.5);
        assert!(apply_distortion(&small, DistortionSpec::new(DistortionKind::WhiteNoise, 1), 0).is_err());
        let ok = Image::constant(8, 8, 3, 0.5);
        assert!(apply_distortion(&ok, DistortionSpec::new(DistortionKind::WhiteNoise, 6), 0).is_err());
        assert!("sharpen".parse::<DistortionKind>().is_err());
    }

    #[test]
    fn severity_increases_distance_from_reference() {
        let r = reference_image(32, 32, 21);
        for kind in DistortionKind::GRADED {
            let d: Vec<f64> = (1..=5)
                .map(|l| apply_distortion(&r, DistortionSpec::new(kind, l), 1).unwrap().mean_abs_diff(&r))
                .collect();
            for pair in d.windows(2) {
                assert!(pair[1] > pair[0], "{kind}: {d:?}");
            }
        }
    }

    #[test]
    fn mos_proxy_endpoints_and_order() {
        let k = DistortionKind::WhiteNoise;
        assert_eq!(mos_proxy(DistortionSpec::new(k, 0)), 1.0);
        assert_eq!(mos_proxy(DistortionSpec::new(k, 5)), 0.0);
        for seed in 0..20 {
            let m: Vec<f64> = (0..=5)
                .map(|l| mos_proxy_jittered(DistortionSpec::new(k, l), 0.02, seed * 31 + l as u64))
                .collect();
            assert!(m.windows(2).all(|p| p[1] < p[0]), "{m:?}");
            assert!((m[5] - 0.0).abs() <= 0.02);
        }
    }

    #[test]
    fn corpus_product_count_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            n_references: 2,
            image_size: (16, 16),
            kinds: vec![DistortionKind::GaussianBlur, DistortionKind::WhiteNoise],
            levels: vec![1, 3, 5],
            seed: 4,
            mos_jitter: 0.0,
        };
        let samples = generate(&spec).unwrap();
        let manifest = write_corpus(&samples, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 12);
        let (m2, loaded) = load_corpus(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(loaded, samples);
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let spec = CorpusSpec {
            n_references: 1,
            image_size: (8, 8),
            kinds: vec![DistortionKind::BlockArtifact],
            levels: vec![2],
            seed: 77,
            mos_jitter: 0.01,
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_corpus(&spec, a.path()).unwrap();
        gen_corpus(&spec, b.path()).unwrap();
        for rel in [MANIFEST_FILE, "reference/ref000.png", "distorted/ref000_block_artifact_l2.png"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn empty_kinds_or_refs_rejected() {
        let mut spec = CorpusSpec {
            n_references: 1,
            image_size: (8, 8),
            kinds: vec![],
            levels: vec![1],
            seed: 0,
            mos_jitter: 0.0,
        };
        assert!(generate(&spec).is_err());
        spec.kinds = vec![DistortionKind::WhiteNoise];
        spec.n_references = 0;
        assert!(generate(&spec).is_err());
    }
}
