//! On-disk dataset: `manifest.json` plus one `sample_NNNNN.bin` per scene.
//!
//! Sample layout (little-endian): magic `PPS1`; the image as one tensor
//! record (`image`, `H x W x 3`, f32); `u32` mask count; then per mask
//! `category: u32`, `part: u32` (`u32::MAX` for the whole mask),
//! `occluded: u8` and `ceil(H*W/8)` bytes of bits, LSB first.

use std::fs;
use std::path::{Path, PathBuf};

use gradkit::checkpoint::{read_record, read_u32, write_record};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{generate_scene, CategorySpec, Instance, Mask, SceneConfig, SceneSample};

const SAMPLE_MAGIC: &[u8; 4] = b"PPS1";
const WHOLE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_categories: usize,
    pub num_parts: usize,
    pub vocab: Vec<String>,
    pub categories: Vec<CategorySpec>,
    pub max_instruments: usize,
    pub occlusion_prob: f64,
    pub clutter_level: f64,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(split: &str, count: usize, cfg: &SceneConfig, seed: u64) -> Self {
        Self {
            split: split.to_string(),
            count,
            height: cfg.height,
            width: cfg.width,
            num_categories: cfg.categories.len(),
            num_parts: cfg.vocab.len(),
            vocab: cfg.vocab.clone(),
            categories: cfg.categories.clone(),
            max_instruments: cfg.max_instruments,
            occlusion_prob: cfg.occlusion_prob,
            clutter_level: cfg.clutter_level,
            seed,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            vocab: self.vocab.clone(),
            categories: self.categories.clone(),
            max_instruments: self.max_instruments,
            occlusion_prob: self.occlusion_prob,
            clutter_level: self.clutter_level,
        }
    }
}

/// SplitMix64 finaliser; decorrelates per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_seed(seed: u64, split: &str, index: usize) -> u64 {
    let stream = split.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
    mix(mix(seed ^ stream).wrapping_add(index as u64))
}

pub fn generate_split(cfg: &SceneConfig, seed: u64, split: &str, count: usize) -> Result<Vec<SceneSample>> {
    (0..count).map(|i| generate_scene(sample_seed(seed, split, i), cfg)).collect()
}

fn sample_name(index: usize) -> String {
    format!("sample_{index:05}.bin")
}

fn pack(mask: &Mask, buf: &mut Vec<u8>) {
    let mut byte = 0u8;
    for (i, &b) in mask.data().iter().enumerate() {
        if b {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            buf.push(byte);
            byte = 0;
        }
    }
    if !mask.data().len().is_multiple_of(8) {
        buf.push(byte);
    }
}

pub fn encode_sample(sample: &SceneSample) -> Vec<u8> {
    let mut buf = SAMPLE_MAGIC.to_vec();
    write_record(&mut buf, "image", &sample.image);
    let masks: usize = sample.instances.iter().map(|i| 1 + i.parts.len()).sum();
    buf.extend_from_slice(&(masks as u32).to_le_bytes());
    for inst in &sample.instances {
        let mut put = |part: u32, occluded: bool, mask: &Mask| {
            buf.extend_from_slice(&(inst.category as u32).to_le_bytes());
            buf.extend_from_slice(&part.to_le_bytes());
            buf.push(occluded as u8);
            pack(mask, &mut buf);
        };
        put(WHOLE, false, &inst.whole);
        for (p, m) in inst.parts.iter().enumerate() {
            put(p as u32, inst.occluded[p], m);
        }
    }
    buf
}

pub fn decode_sample(bytes: &[u8], num_parts: usize) -> Result<SceneSample, String> {
    let mut cursor = bytes;
    if cursor.len() < 4 || &cursor[..4] != SAMPLE_MAGIC {
        return Err("bad magic (expected PPS1)".into());
    }
    cursor = &cursor[4..];
    let (name, image) = read_record::<f32>(&mut cursor)?;
    if name != "image" || image.rank() != 3 || image.shape()[2] != 3 {
        return Err(format!("expected an H x W x 3 `image` record, got `{name}` {:?}", image.shape()));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let masks = read_u32(&mut cursor, "mask count")? as usize;
    let bytes_per = (h * w).div_ceil(8);
    let mut instances: Vec<Instance> = Vec::new();
    for k in 0..masks {
        let category = read_u32(&mut cursor, "mask category")? as usize;
        let part = read_u32(&mut cursor, "mask part")?;
        if cursor.len() < 1 + bytes_per {
            return Err(format!("truncated in mask {k} of {masks}"));
        }
        let occluded = cursor[0] != 0;
        let bits = &cursor[1..1 + bytes_per];
        cursor = &cursor[1 + bytes_per..];
        let data = (0..h * w).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let mask = Mask::from_vec(h, w, data).map_err(|e| e.to_string())?;
        if part == WHOLE {
            instances.push(Instance {
                category,
                whole: mask,
                parts: Vec::with_capacity(num_parts),
                occluded: Vec::with_capacity(num_parts),
            });
        } else {
            let inst = instances
                .last_mut()
                .filter(|i| i.category == category && i.parts.len() == part as usize && (part as usize) < num_parts)
                .ok_or_else(|| format!("mask {k}: unexpected (category {category}, part {part})"))?;
            inst.parts.push(mask);
            inst.occluded.push(occluded);
        }
    }
    if !cursor.is_empty() {
        return Err(format!("{} trailing bytes", cursor.len()));
    }
    if let Some(inst) = instances.iter().find(|i| i.parts.len() != num_parts) {
        return Err(format!("category {} has {} part masks, expected {num_parts}", inst.category, inst.parts.len()));
    }
    Ok(SceneSample { image, instances })
}

pub fn write_dataset(samples: &[SceneSample], manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    if manifest.count != samples.len() {
        return Err(Error::Usage(format!(
            "manifest says {} samples, got {}",
            manifest.count,
            samples.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    for (i, s) in samples.iter().enumerate() {
        fs::write(dir.join(sample_name(i)), encode_sample(s))?;
    }
    Ok(())
}

/// A dataset directory whose samples are parsed on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    dir: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn load(&self, index: usize) -> Result<SceneSample> {
        if index >= self.len() {
            return Err(Error::Lookup(format!("sample {index} of {}", self.len())));
        }
        let path = self.dir.join(sample_name(index));
        let bytes = fs::read(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let sample = decode_sample(&bytes, self.manifest.num_parts).map_err(|msg| Error::format(&path, msg))?;
        if sample.height() != self.manifest.height || sample.width() != self.manifest.width {
            return Err(Error::format(&path, "image size differs from the manifest"));
        }
        Ok(sample)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SceneSample>> + '_ {
        (0..self.len()).map(|i| self.load(i))
    }

    pub fn load_all(&self) -> Result<Vec<SceneSample>> {
        self.iter().collect()
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let on_disk = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("sample_") && name.ends_with(".bin")
        })
        .count();
    if on_disk != manifest.count {
        return Err(Error::format(
            &manifest_path,
            format!("manifest lists {} samples but {on_disk} sample files exist", manifest.count),
        ));
    }
    if let Some(missing) = (0..manifest.count).map(sample_name).find(|n| !dir.join(n).is_file()) {
        return Err(Error::format(&manifest_path, format!("missing sample file {missing}")));
    }
    Ok(Dataset {
        manifest,
        dir: dir.to_path_buf(),
    })
}
