//! Paired low-light / reference images: JSON manifests, aligned patch
//! sampling, and a synthetic pair generator for offline runs.
//!
//! Manifest format:
//!
//! ```json
//! {"split": "train", "entries": [{"low": "a_low.png", "ref": "a_ref.png", "spectrum": "ir_rgb"}]}
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_png, png_dimensions, save_png, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Whether the low-light capture includes near-infrared light.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    IrRgb,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub low: PathBuf,
    #[serde(rename = "ref")]
    pub reference: PathBuf,
    pub spectrum: Spectrum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairManifest {
    pub split: Split,
    pub entries: Vec<PairEntry>,
}

impl PairManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// One aligned pair: `low` is the degraded capture, `reference` the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub low: Image,
    pub reference: Image,
}

/// Reads and validates a manifest. Entry paths come back joined onto the
/// manifest directory; every file must exist and each low/ref pair must have
/// the same dimensions.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<PairManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: PairManifest = serde_json::from_str(&text).map_err(|e| Error::ManifestFormat {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for (index, entry) in manifest.entries.iter_mut().enumerate() {
        entry.low = base.join(&entry.low);
        entry.reference = base.join(&entry.reference);
        let dims = |p: &Path, role: &str| -> Result<(usize, usize)> {
            if !p.is_file() {
                return Err(Error::ManifestEntry {
                    index,
                    message: format!("{role} file {} does not exist", p.display()),
                });
            }
            png_dimensions(p).map_err(|e| Error::ManifestEntry {
                index,
                message: e.to_string(),
            })
        };
        let low = dims(&entry.low, "low")?;
        let reference = dims(&entry.reference, "ref")?;
        if low != reference {
            return Err(Error::ManifestEntry {
                index,
                message: format!(
                    "low is {}x{} but ref is {}x{}",
                    low.0, low.1, reference.0, reference.1
                ),
            });
        }
    }
    Ok(manifest)
}

/// Decodes every pair of a loaded manifest, in entry order.
pub fn load_pairs(manifest: &PairManifest) -> Result<Vec<Pair>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(Pair {
                low: load_png(&e.low)?,
                reference: load_png(&e.reference)?,
            })
        })
        .collect()
}

/// Draws `batch` aligned square crops. Each draw picks a pair uniformly,
/// then a top-left corner uniformly among the positions that fit.
pub fn sample_patches_with(pairs: &[Pair], patch: usize, batch: usize, rng: &mut impl Rng) -> Result<Vec<Pair>> {
    if pairs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if patch == 0 {
        return Err(Error::invalid("patch", "patch size must be positive"));
    }
    for (index, p) in pairs.iter().enumerate() {
        if p.low.height() < patch || p.low.width() < patch {
            return Err(Error::invalid(
                "patch",
                format!(
                    "patch {patch} does not fit pair {index} ({}x{})",
                    p.low.height(),
                    p.low.width()
                ),
            ));
        }
        p.low.check_same_shape(&p.reference, "low vs ref")?;
    }
    (0..batch)
        .map(|_| {
            let pair = &pairs[rng.random_range(0..pairs.len())];
            let top = rng.random_range(0..=pair.low.height() - patch);
            let left = rng.random_range(0..=pair.low.width() - patch);
            Ok(Pair {
                low: pair.low.crop(top, left, patch, patch)?,
                reference: pair.reference.crop(top, left, patch, patch)?,
            })
        })
        .collect()
}

pub fn sample_patches(pairs: &[Pair], patch: usize, batch: usize, seed: u64) -> Result<Vec<Pair>> {
    sample_patches_with(pairs, patch, batch, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A smooth random test scene: a colored gradient, a few soft discs and a
/// low-frequency texture, kept inside `[0.05, 0.95]`.
pub fn synthetic_scene(height: usize, width: usize, rng: &mut impl Rng) -> Image {
    let base: [[f64; 3]; 2] = [
        std::array::from_fn(|_| rng.random_range(0.2..0.8)),
        std::array::from_fn(|_| rng.random_range(0.2..0.8)),
    ];
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                std::array::from_fn(|_| rng.random_range(0.05..0.95)),
            )
        })
        .collect();
    let freq = rng.random_range(2.0..6.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    Image::from_fn(3, height, width, |c, y, x| {
        let v = y as f64 / height.max(2) as f64;
        let u = x as f64 / width.max(2) as f64;
        let t = 0.5 * (u + v);
        let mut value = base[0][c] * (1.0 - t) + base[1][c] * t;
        for (cy, cx, r, color) in &discs {
            let d2 = ((v - cy) * (v - cy) + (u - cx) * (u - cx)) / (r * r);
            let w = (-d2 * d2).exp();
            value = value * (1.0 - w) + color[c] * w;
        }
        value += 0.05 * (std::f64::consts::TAU * freq * u + phase).sin() * (std::f64::consts::TAU * freq * v).cos();
        value.clamp(0.05, 0.95)
    })
}

/// Stand-in degradation used to make synthetic pairs: per-channel gain
/// (red raised to mimic infrared leakage), darkening, gamma, Gaussian noise,
/// clamped to `[0, 1]`. It is a test fixture, not a model of any sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowLightModel {
    pub darken: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub red_gain: f64,
}

impl Default for LowLightModel {
    fn default() -> Self {
        LowLightModel {
            darken: 0.25,
            gamma: 1.0,
            noise_std: 0.01,
            red_gain: 1.5,
        }
    }
}

impl LowLightModel {
    pub fn degrade(&self, reference: &Image, rng: &mut impl Rng) -> Result<Image> {
        if !(self.darken > 0.0 && self.gamma > 0.0 && self.noise_std >= 0.0 && self.red_gain > 0.0) {
            return Err(Error::invalid("low-light model", "darken, gamma and red gain must be positive"));
        }
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::invalid("noise_std", e.to_string()))?;
        let mut low = reference.clone();
        for c in 0..low.channels() {
            let gain = if c == 0 { self.red_gain } else { 1.0 };
            for v in low.channel_mut(c) {
                let clean = gain * self.darken * v.clamp(0.0, 1.0).powf(self.gamma);
                *v = (clean + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        Ok(low)
    }
}

/// `count` synthetic pairs of size `height x width`, deterministic in `seed`.
pub fn synthetic_pairs(count: usize, height: usize, width: usize, model: &LowLightModel, seed: u64) -> Result<Vec<Pair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let reference = synthetic_scene(height, width, &mut rng);
            let low = model.degrade(&reference, &mut rng)?;
            Ok(Pair { low, reference })
        })
        .collect()
}

/// Writes pairs as `pair{i}_low.png` / `pair{i}_ref.png` plus `manifest.json`
/// into `dir`, and returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, pairs: &[Pair], split: Split, spectrum: Spectrum) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let low = PathBuf::from(format!("pair{i:03}_low.png"));
        let reference = PathBuf::from(format!("pair{i:03}_ref.png"));
        save_png(&pair.low, dir.join(&low))?;
        save_png(&pair.reference, dir.join(&reference))?;
        entries.push(PairEntry {
            low,
            reference,
            spectrum,
        });
    }
    let path = dir.join("manifest.json");
    let manifest = PairManifest { split, entries };
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(count: usize, h: usize, w: usize) -> Vec<Pair> {
        synthetic_pairs(count, h, w, &LowLightModel::default(), 3).unwrap()
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"split": "eval", "entries": []}"#).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 0);
        assert_eq!(m.split, Split::Eval);
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ps = pairs(3, 12, 10);
        let path = write_dataset(dir.path(), &ps, Split::Train, Spectrum::IrRgb).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.entries.iter().all(|e| e.spectrum == Spectrum::IrRgb && e.low.starts_with(dir.path())));
        let loaded = load_pairs(&m).unwrap();
        for (a, b) in loaded.iter().zip(&ps) {
            assert_eq!(a.low.to_rgb8().unwrap(), b.low.to_rgb8().unwrap());
            assert_eq!(a.reference.to_rgb8().unwrap(), b.reference.to_rgb8().unwrap());
        }
    }

    #[test]
    fn missing_file_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), &pairs(3, 8, 8), Split::Train, Spectrum::Rgb).unwrap();
        std::fs::remove_file(dir.path().join("pair002_ref.png")).unwrap();
        match load_manifest(&path) {
            Err(Error::ManifestEntry { index, message }) => {
                assert_eq!(index, 2);
                assert!(message.contains("ref"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), &pairs(2, 8, 8), Split::Train, Spectrum::Rgb).unwrap();
        save_png(&Image::zeros(3, 8, 9), dir.path().join("pair001_low.png")).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::ManifestEntry { index: 1, .. })));
    }

    #[test]
    fn malformed_json_and_unknown_spectrum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, "{").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::ManifestFormat { .. })));
        std::fs::write(&path, r#"{"split": "train", "entries": [{"low": "a", "ref": "b", "spectrum": "uv"}]}"#).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::ManifestFormat { .. })));
    }

    #[test]
    fn large_manifest_length() {
        let dir = tempfile::tempdir().unwrap();
        save_png(&Image::zeros(3, 2, 2), dir.path().join("x.png")).unwrap();
        let entries: Vec<String> = (0..236)
            .map(|_| r#"{"low": "x.png", "ref": "x.png", "spectrum": "rgb"}"#.to_string())
            .collect();
        let path = dir.path().join("m.json");
        std::fs::write(&path, format!(r#"{{"split": "train", "entries": [{}]}}"#, entries.join(","))).unwrap();
        assert_eq!(load_manifest(&path).unwrap().len(), 236);
    }

    #[test]
    fn patches_are_aligned_and_deterministic() {
        let ps = pairs(2, 20, 24);
        let a = sample_patches(&ps, 8, 16, 9).unwrap();
        assert_eq!(a, sample_patches(&ps, 8, 16, 9).unwrap());
        assert_ne!(a, sample_patches(&ps, 8, 16, 10).unwrap());
        // Every low patch sits at the same coordinates as its ref patch.
        for p in &a {
            let found = ps.iter().any(|src| {
                (0..=12).any(|top| {
                    (0..=16).any(|left| {
                        src.low.crop(top, left, 8, 8).unwrap() == p.low
                            && src.reference.crop(top, left, 8, 8).unwrap() == p.reference
                    })
                })
            });
            assert!(found);
        }
    }

    #[test]
    fn full_size_patch_and_bounds() {
        let ps = pairs(1, 10, 12);
        assert!(sample_patches(&ps, 13, 1, 0).is_err());
        assert!(sample_patches(&ps, 11, 1, 0).is_err());
        let whole = Pair {
            low: ps[0].low.crop(0, 0, 10, 10).unwrap(),
            reference: ps[0].reference.crop(0, 0, 10, 10).unwrap(),
        };
        let got = sample_patches(std::slice::from_ref(&whole), 10, 3, 1).unwrap();
        assert!(got.iter().all(|p| *p == whole));
        assert!(sample_patches(&[], 4, 1, 0).is_err());
    }

    #[test]
    fn coordinate_audit_on_large_image() {
        let big = Pair {
            low: Image::zeros(3, 400, 600),
            reference: Image::zeros(3, 400, 600),
        };
        // crop() rejects any window that does not fit, so success is the audit.
        let got = sample_patches(std::slice::from_ref(&big), 64, 1000, 5).unwrap();
        assert_eq!(got.len(), 1000);
    }

    #[test]
    fn degradation_darkens_and_tints() {
        let ps = pairs(4, 16, 16);
        for p in &ps {
            let mean = |img: &Image, c: usize| img.channel(c).iter().sum::<f64>() / img.plane_len() as f64;
            for c in 0..3 {
                assert!(mean(&p.low, c) < mean(&p.reference, c));
            }
            let ratio_r = mean(&p.low, 0) / mean(&p.reference, 0);
            let ratio_g = mean(&p.low, 1) / mean(&p.reference, 1);
            assert!(ratio_r > ratio_g);
        }
    }
}
