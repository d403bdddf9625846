//! Dataset persistence: the manifest, the synthesis pipeline that fills it,
//! channel statistics over its 0 EV frames, and whole-dataset evaluation.
//!
//! Manifest paths are stored relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera_sim::{bracket, render_scene_with, CameraProfile, SceneOptions, DEFAULT_EVS};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::formats::{read_hdr, read_json, read_raw, write_hdr, write_json, write_pgm8, write_raw};
use crate::hdr_merge::merge;
use crate::metrics::{evaluate, MetricReport};
use crate::net::{forward, NetConfig, NetParams};
use crate::raw_model::{pack, CH_B, CH_G1, CH_G2, CH_R};
use crate::training::TrainingPair;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene_id: String,
    /// The 0 EV frame, the network input.
    pub raw_path: PathBuf,
    pub hdr_path: PathBuf,
    pub bracket_paths: Vec<PathBuf>,
    pub profile: CameraProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Reads a manifest, checking its version and that every file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: DatasetManifest = read_json(path)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for e in &m.entries {
            for p in std::iter::once(&e.raw_path).chain([&e.hdr_path]).chain(&e.bracket_paths) {
                if !m.resolve(p).exists() {
                    return Err(Error::Format(format!("{}: missing file {}", e.scene_id, p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Loads every (0 EV frame, target) pair.
    pub fn pairs(&self) -> Result<Vec<TrainingPair>> {
        self.entries
            .iter()
            .map(|e| {
                let raw = read_raw(&self.resolve(&e.raw_path))?;
                let hdr = read_hdr(&self.resolve(&e.hdr_path))?;
                TrainingPair::new(e.scene_id.clone(), raw, hdr)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scenes: usize,
    /// Raw frame size `(H, W)`.
    pub size: (usize, usize),
    pub seed: u64,
    pub profile: CameraProfile,
    pub scene: SceneOptions,
    /// Must contain 0.
    pub evs: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            size: (64, 64),
            seed: 0,
            profile: CameraProfile::default(),
            scene: SceneOptions::default(),
            evs: DEFAULT_EVS.to_vec(),
        }
    }
}

fn ev_tag(ev: f64) -> String {
    format!("{ev:+}").replace('.', "p")
}

/// Renders, brackets and merges `cfg.scenes` scenes into `out`, writing a
/// manifest alongside.
pub fn synthesize(out: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.scenes == 0 {
        return arg_err("scenes must be at least 1");
    }
    if !cfg.evs.contains(&0.0) {
        return arg_err("the bracket must contain 0 EV");
    }
    cfg.profile.validate_levels()?;
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let scene_id = format!("scene{i:04}");
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let scene = render_scene_with(seed, cfg.size, &cfg.scene)?;
        let stack = bracket(&scene, &cfg.profile, &cfg.evs, seed)?;
        let hdr = merge(&stack)?;
        let mut bracket_paths = Vec::with_capacity(stack.len());
        let mut raw_path = None;
        for (m, &ev) in stack.mosaics.iter().zip(&stack.evs) {
            let name = PathBuf::from(format!("{scene_id}_ev{}.pgm", ev_tag(ev)));
            write_raw(&out.join(&name), m)?;
            if ev == 0.0 {
                raw_path = Some(name.clone());
            }
            bracket_paths.push(name);
        }
        let hdr_path = PathBuf::from(format!("{scene_id}.rhdr"));
        write_hdr(&out.join(&hdr_path), &hdr)?;
        entries.push(ManifestEntry {
            scene_id,
            raw_path: raw_path.expect("0 EV checked above"),
            hdr_path,
            bracket_paths,
            profile: cfg.profile.clone(),
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        entries,
        root: out.to_path_buf(),
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const DOMINANT_R: u8 = 0;
pub const DOMINANT_G: u8 = 1;
pub const DOMINANT_B: u8 = 2;

/// Index of the largest of `(r, g, b)`; green wins any tie, then red.
pub fn dominant_channel(r: f64, g: f64, b: f64) -> u8 {
    if g >= r && g >= b {
        DOMINANT_G
    } else if r >= b {
        DOMINANT_R
    } else {
        DOMINANT_B
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneChannels {
    pub scene_id: String,
    /// `[R, G, B]` mean sensor counts (black level included).
    pub means_counts: [f64; 3],
    /// `[R, G, B]` means after black-level normalization.
    pub means_normalized: [f64; 3],
    /// Fraction of packed pixels dominated by R, G, B.
    pub dominant_fraction: [f64; 3],
    pub map_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub scenes: usize,
    pub means_counts: [f64; 3],
    pub means_normalized: [f64; 3],
    pub dominant_fraction: [f64; 3],
    pub per_scene: Vec<SceneChannels>,
}

impl ChannelReport {
    /// True when the mean ordering is G > B > R.
    pub fn green_blue_red_order(&self) -> bool {
        let [r, g, b] = self.means_counts;
        g > b && b > r
    }
}

pub const CHANNEL_REPORT_FILE: &str = "channels.json";

/// Channel means over every 0 EV frame, pooled over pixels, and per-scene
/// dominant-channel index maps (0 = R, 1 = G, 2 = B) written as 8-bit PGM.
pub fn analyze_channels(manifest: &DatasetManifest, out: &Path) -> Result<ChannelReport> {
    if manifest.entries.is_empty() {
        return arg_err("empty manifest");
    }
    std::fs::create_dir_all(out)?;
    let mut sums = [[0.0; 3]; 2];
    let mut counts = [0usize; 3];
    let mut dominant_total = [0usize; 3];
    let mut pixels_total = 0;
    let mut per_scene = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let raw = read_raw(&manifest.resolve(&e.raw_path))?;
        let mut s = [[0.0; 3]; 2];
        let mut n = [0usize; 3];
        for y in 0..raw.height() {
            for x in 0..raw.width() {
                let c = crate::camera_sim::cfa_color(y, x);
                let v = raw.at(y, x);
                s[0][c] += v as f64;
                s[1][c] += raw.normalize_value(v);
                n[c] += 1;
            }
        }
        let packed = pack(&raw)?;
        let (h, w) = (packed.height(), packed.width());
        let mut map = Vec::with_capacity(h * w);
        let mut dom = [0usize; 3];
        for px in packed.tensor().data().chunks_exact(4) {
            let d = dominant_channel(px[CH_R], 0.5 * (px[CH_G1] + px[CH_G2]), px[CH_B]);
            dom[d as usize] += 1;
            map.push(d);
        }
        let map_path = PathBuf::from(format!("{}_dominant.pgm", e.scene_id));
        write_pgm8(&out.join(&map_path), w, h, &map)?;
        for c in 0..3 {
            sums[0][c] += s[0][c];
            sums[1][c] += s[1][c];
            counts[c] += n[c];
            dominant_total[c] += dom[c];
        }
        pixels_total += h * w;
        per_scene.push(SceneChannels {
            scene_id: e.scene_id.clone(),
            means_counts: [0, 1, 2].map(|c| s[0][c] / n[c] as f64),
            means_normalized: [0, 1, 2].map(|c| s[1][c] / n[c] as f64),
            dominant_fraction: dom.map(|d| d as f64 / (h * w) as f64),
            map_path,
        });
    }
    let report = ChannelReport {
        scenes: manifest.entries.len(),
        means_counts: [0, 1, 2].map(|c| sums[0][c] / counts[c] as f64),
        means_normalized: [0, 1, 2].map(|c| sums[1][c] / counts[c] as f64),
        dominant_fraction: dominant_total.map(|d| d as f64 / pixels_total as f64),
        per_scene,
    };
    write_json(&out.join(CHANNEL_REPORT_FILE), &report)?;
    Ok(report)
}

/// Scores the network on every manifest entry.
pub fn evaluate_manifest(
    manifest: &DatasetManifest,
    params: &NetParams,
    config: &NetConfig,
    mu: f64,
) -> Result<Vec<MetricReport>> {
    if manifest.entries.is_empty() {
        return arg_err("empty manifest");
    }
    manifest
        .pairs()?
        .iter()
        .map(|p| {
            let pred = forward(&p.raw, params, config)?;
            if pred.shape() != p.hdr.shape() {
                return shape_err("prediction and target shapes differ");
            }
            evaluate(&p.scene_id, &pred, &p.hdr, mu)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera_sim::SceneOptions;
    use crate::formats::read_pgm8;

    fn small(scenes: usize, neutral: bool) -> SynthConfig {
        SynthConfig {
            scenes,
            size: (16, 24),
            seed: 4,
            scene: SceneOptions {
                neutral,
                ..SceneOptions::default()
            },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let written = synthesize(dir.path(), &small(2, false)).unwrap();
        let loaded = DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, written);
        assert_eq!(loaded.entries[0].bracket_paths.len(), 3);
        let pairs = loaded.pairs().unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].hdr.shape(), [8, 12, 4]);
        assert_eq!(pairs[1].raw.exposure_ev, 0.0);
        // deterministic given the seed
        let again = tempfile::tempdir().unwrap();
        synthesize(again.path(), &small(2, false)).unwrap();
        let other = DatasetManifest::load(&again.path().join(MANIFEST_FILE)).unwrap().pairs().unwrap();
        assert_eq!(other, pairs);
    }

    #[test]
    fn manifest_checks_version_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = synthesize(dir.path(), &small(1, false)).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        m.format_version = 2;
        m.save(&path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Version { found: 2, .. })));
        m.format_version = MANIFEST_VERSION;
        m.save(&path).unwrap();
        std::fs::remove_file(dir.path().join(&m.entries[0].hdr_path)).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }

    #[test]
    fn dominant_ties_go_to_green() {
        assert_eq!(dominant_channel(0.5, 0.5, 0.5), DOMINANT_G);
        assert_eq!(dominant_channel(0.0, 0.0, 0.0), DOMINANT_G);
        assert_eq!(dominant_channel(0.6, 0.5, 0.6), DOMINANT_R);
        assert_eq!(dominant_channel(0.1, 0.5, 0.6), DOMINANT_B);
    }

    #[test]
    fn channel_means_match_loop_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthesize(dir.path(), &small(1, false)).unwrap();
        let out = dir.path().join("analysis");
        let report = analyze_channels(&m, &out).unwrap();
        let raw = read_raw(&m.resolve(&m.entries[0].raw_path)).unwrap();
        let mut sum = [0.0; 3];
        let mut n = [0.0; 3];
        for y in 0..raw.height() {
            for x in 0..raw.width() {
                let c = match (y % 2, x % 2) {
                    (0, 0) => 0,
                    (1, 1) => 2,
                    _ => 1,
                };
                sum[c] += raw.at(y, x) as f64;
                n[c] += 1.0;
            }
        }
        for c in 0..3 {
            assert!((report.means_counts[c] - sum[c] / n[c]).abs() < 1e-9);
        }
        let (w, h, map) = read_pgm8(&out.join(&report.per_scene[0].map_path)).unwrap();
        assert_eq!((w, h, map.len()), (12, 8, 96));
        assert!(map.iter().all(|&d| d <= 2));
        assert!(out.join(CHANNEL_REPORT_FILE).exists());
    }

    #[test]
    fn neutral_scenes_are_green_dominant() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthesize(dir.path(), &small(2, true)).unwrap();
        let report = analyze_channels(&m, &dir.path().join("a")).unwrap();
        assert!(report.dominant_fraction[1] >= 0.9, "{report:?}");
        assert!(report.green_blue_red_order());
    }

    #[test]
    fn uniform_grey_with_equal_sensitivity_is_all_green() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            scenes: 1,
            size: (8, 8),
            profile: CameraProfile {
                sensitivity: [1.0, 1.0, 1.0],
                ..CameraProfile::default()
            },
            scene: SceneOptions {
                constant: Some(0.25),
                ..SceneOptions::default()
            },
            ..SynthConfig::default()
        };
        let m = synthesize(dir.path(), &cfg).unwrap();
        let out = dir.path().join("a");
        let report = analyze_channels(&m, &out).unwrap();
        assert_eq!(report.dominant_fraction, [0.0, 1.0, 0.0]);
        let (_, _, map) = read_pgm8(&out.join(&report.per_scene[0].map_path)).unwrap();
        assert!(map.iter().all(|&d| d == DOMINANT_G));
    }

    #[test]
    fn analyze_rejects_empty_manifest() {
        let m = DatasetManifest {
            format_version: MANIFEST_VERSION,
            entries: vec![],
            root: PathBuf::new(),
        };
        assert!(analyze_channels(&m, Path::new("/tmp/unused")).is_err());
    }
}
