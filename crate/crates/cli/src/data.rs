use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use hfm_core::data::{
    collocate_labels, fnv1a, masks_sample, parse_year_range, read_container, sample_file_name, synth_generate,
    tile_scene, write_container, Location, Manifest, ManifestEntry, PatchSample, Scene, SplitRules, SynthConfig,
    DEFAULT_TOLERANCE_S,
};
use hfm_core::encodings::Timestamp;
use hfm_core::numerics::Tensor;
use serde_json::json;

const EXT: &str = "hfmp";
const MASKS_EXT: &str = "masks.hfmp";
pub const UNASSIGNED: &str = "unassigned";

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory; receives `scenes/` and `labels/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub scenes: usize,
    /// Acquisitions per region, 15 minutes apart.
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 11)]
    pub bands: usize,
    #[arg(long, default_value_t = 2020)]
    pub first_year: i32,
    #[arg(long, default_value_t = 2024)]
    pub last_year: i32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Label products are stamped up to this many seconds away from their image.
    #[arg(long, default_value_t = 300)]
    pub label_offset_s: i64,
}

/// Deterministic offset in `[-max, max]` derived from the scene id.
fn label_offset(scene_id: &str, max: i64) -> i64 {
    if max <= 0 {
        return 0;
    }
    (fnv1a(scene_id.as_bytes()) % (2 * max as u64 + 1)) as i64 - max
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        scenes: a.scenes,
        frames: a.frames,
        height: a.size,
        width: a.size,
        bands: a.bands,
        first_year: a.first_year,
        last_year: a.last_year,
        ..SynthConfig::default()
    };
    let scenes = synth_generate(&cfg)?;
    let (scene_dir, label_dir) = (a.out.join("scenes"), a.out.join("labels"));
    fs::create_dir_all(&scene_dir).with_context(|| format!("creating {}", scene_dir.display()))?;
    fs::create_dir_all(&label_dir).with_context(|| format!("creating {}", label_dir.display()))?;
    for s in &scenes {
        let sh = s.scene.data.shape();
        let image = PatchSample {
            data: s.scene.data.clone().reshape(&[1, sh[0], sh[1], sh[2]])?,
            timestamps: vec![s.scene.timestamp],
            label: None,
            location: Location { scene_id: s.scene.scene_id.clone(), ..Location::default() },
        };
        write_container(&scene_dir.join(sample_file_name(&image, EXT)), &image)?;
        let masks = masks_sample(s)?;
        write_container(&scene_dir.join(sample_file_name(&masks, MASKS_EXT)), &masks)?;

        // Label product: fire and cloud channels, stamped near the image time.
        let (h, w) = (s.scene.height(), s.scene.width());
        let mut channels = s.fire.data().to_vec();
        channels.extend_from_slice(&masks.data.data()[h * w..]);
        let t = s.scene.timestamp.epoch_seconds() + label_offset(&s.scene.scene_id, a.label_offset_s);
        let product = PatchSample {
            data: Tensor::new(vec![1, 2, h, w], channels)?,
            timestamps: vec![Timestamp::from_epoch(t)?],
            label: None,
            location: image.location.clone(),
        };
        write_container(&label_dir.join(sample_file_name(&product, EXT)), &product)?;
    }
    println!("{}", json!({ "scenes": scenes.len(), "out": a.out }));
    Ok(())
}

/// Container files in `dir`, sorted by name, excluding mask companions.
pub fn list_containers(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(&format!(".{EXT}")) && !name.ends_with(&format!(".{MASKS_EXT}")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn masks_path(scene: &Path) -> PathBuf {
    let name = scene.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let stem = name.strip_suffix(&format!(".{EXT}")).unwrap_or(name);
    scene.with_file_name(format!("{stem}.{MASKS_EXT}"))
}

#[derive(Args)]
pub struct TileArgs {
    /// Directory of scene containers, optionally with `.masks.hfmp` companions.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum land pixels per kept patch; needs mask companions.
    #[arg(long, default_value_t = 1)]
    pub min_land: usize,
    /// Drop patches whose every pixel is cloud.
    #[arg(long)]
    pub drop_full_cloud: bool,
}

pub fn tile(a: TileArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (mut scenes, mut total, mut kept) = (0, 0, 0);
    for path in list_containers(&a.scenes)? {
        let s = read_container(&path).with_context(|| format!("reading {}", path.display()))?;
        let sh = s.data.shape().to_vec();
        if sh[0] != 1 {
            anyhow::bail!(hfm_core::Error::invalid(format!("{} holds {} timesteps, expected one scene", path.display(), sh[0])));
        }
        let (h, w) = (sh[2], sh[3]);
        let mp = masks_path(&path);
        let masks = mp.exists().then(|| read_container(&mp)).transpose()?;
        let (land_mask, cloud_mask) = match &masks {
            Some(m) => {
                let d = m.data.data();
                (Tensor::new(vec![h, w], d[..h * w].to_vec())?, Some(Tensor::new(vec![h, w], d[h * w..2 * h * w].to_vec())?))
            }
            None => (Tensor::ones(&[h, w]), None),
        };
        let scene = Scene {
            data: s.data.clone().reshape(&sh[1..])?,
            timestamp: s.timestamps[0],
            land_mask,
            cloud_mask,
            scene_id: s.location.scene_id.clone(),
        };
        scenes += 1;
        for t in tile_scene(&scene, s.label.as_ref())? {
            total += 1;
            let land = t.land.data().iter().filter(|&&v| v > 0.0).count();
            let full_cloud = t.cloud.as_ref().is_some_and(|c| c.data().iter().all(|&v| v == 1.0));
            if masks.is_some() && (land < a.min_land || (a.drop_full_cloud && full_cloud)) {
                continue;
            }
            write_container(&a.out.join(sample_file_name(&t.sample, EXT)), &t.sample)?;
            kept += 1;
        }
    }
    println!("{}", json!({ "scenes": scenes, "patches": total, "kept": kept }));
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Task {
    Fire,
    Cloud,
}

impl Task {
    fn channel(self) -> usize {
        match self {
            Task::Fire => 0,
            Task::Cloud => 1,
        }
    }
}

#[derive(Args)]
pub struct CollocateArgs {
    /// Directory of image patches.
    #[arg(long)]
    pub images: PathBuf,
    /// Directory of label patches; omit to index unlabeled images.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_S)]
    pub tolerance_s: i64,
    /// Label channel to attach.
    #[arg(long, value_enum, default_value_t = Task::Fire)]
    pub task: Task,
    /// Manifest path; samples go to a sibling `<stem>.samples/` directory.
    #[arg(long)]
    pub out: PathBuf,
}

type ByLocation = BTreeMap<Location, Vec<(Timestamp, PathBuf)>>;

fn index_by_location(dir: &Path) -> Result<ByLocation> {
    let mut out: ByLocation = BTreeMap::new();
    for path in list_containers(dir)? {
        let s = read_container(&path).with_context(|| format!("reading {}", path.display()))?;
        out.entry(s.location.clone()).or_default().push((s.last_timestamp(), path));
    }
    for v in out.values_mut() {
        v.sort();
    }
    Ok(out)
}

pub fn collocate(a: CollocateArgs) -> Result<()> {
    let base = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    let rel_dir = PathBuf::from(format!("{stem}.samples"));
    fs::create_dir_all(base.join(&rel_dir)).with_context(|| format!("creating {}", rel_dir.display()))?;

    let images = index_by_location(&a.images)?;
    let labels = a.labels.as_deref().map(index_by_location).transpose()?;
    let mut manifest = Manifest::default();
    let mut add = |sample: &PatchSample| -> Result<()> {
        let rel = rel_dir.join(sample_file_name(sample, EXT));
        let digest = write_container(&base.join(&rel), sample)?;
        manifest.entries.push(ManifestEntry {
            path: rel,
            digest,
            year: sample.last_timestamp().year(),
            split: UNASSIGNED.into(),
        });
        Ok(())
    };
    let mut unmatched = 0;
    for (loc, imgs) in &images {
        let Some(labels) = &labels else {
            for (_, p) in imgs {
                add(&read_container(p)?)?;
            }
            continue;
        };
        let Some(lbls) = labels.get(loc) else {
            unmatched += imgs.len();
            continue;
        };
        let pairs = collocate_labels(imgs, lbls, a.tolerance_s)?;
        unmatched += imgs.len() - pairs.len();
        for (img, lbl) in pairs {
            let mut sample = read_container(&img)?;
            let product = read_container(&lbl)?;
            let sh = product.data.shape();
            let (h, w) = (sh[2], sh[3]);
            let c = a.task.channel();
            if sh[1] <= c {
                anyhow::bail!(hfm_core::Error::invalid(format!("{} has no channel {c}", lbl.display())));
            }
            sample.label = Some(Tensor::new(vec![h, w], product.data.data()[c * h * w..(c + 1) * h * w].to_vec())?);
            add(&sample)?;
        }
    }
    manifest.write(&a.out)?;
    println!("{}", json!({ "samples": manifest.entries.len(), "unmatched": unmatched, "manifest": a.out }));
    Ok(())
}

#[derive(Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pretraining years `a-b`; the following year becomes `eval`.
    #[arg(long, conflicts_with = "rules")]
    pub pretrain_years: Option<String>,
    /// File of `name years` lines.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Drop entries whose year no rule covers instead of failing.
    #[arg(long)]
    pub skip_uncovered: bool,
    /// Write here instead of rewriting the manifest in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn split(a: SplitArgs) -> Result<()> {
    let rules = match (&a.pretrain_years, &a.rules) {
        (Some(y), _) => SplitRules::pretrain_with(parse_year_range(y)?),
        (None, Some(path)) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?.parse()?,
        (None, None) => SplitRules::finetune(),
    };
    let mut manifest = Manifest::read(&a.manifest)?;
    if a.skip_uncovered {
        manifest.entries.retain(|e| rules.split_for_year(e.year).is_ok());
    }
    manifest.assign(&rules)?;
    manifest.write(a.out.as_ref().unwrap_or(&a.manifest))?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &manifest.entries {
        *counts.entry(e.split.as_str()).or_default() += 1;
    }
    println!("{}", json!({ "splits": counts }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_offsets_stay_in_range() {
        for id in ["r00000", "r00001", "abc"] {
            assert!(label_offset(id, 300).abs() <= 300);
        }
        assert_eq!(label_offset("r00000", 0), 0);
    }

    #[test]
    fn mask_companion_path() {
        assert_eq!(masks_path(Path::new("d/a__0_0__5.hfmp")), Path::new("d/a__0_0__5.masks.hfmp"));
    }
}
