//! On-disk dataset shards: `NNNN/{source.png, target.png, meta.json}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Provenance, TrainingSample};
use crate::homography::{homography_to_offsets, CornerOffsets, Homography};
use crate::imaging::{io, PlaneMask};

/// Per-sample `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub h_gt: Homography,
    pub h_ts_used: Homography,
    pub corner_offsets_gt: CornerOffsets,
    pub quality_score: Option<f64>,
    pub accepted: Option<bool>,
    pub seed: u64,
    pub iteration: u32,
    pub provenance: Provenance,
}

impl SampleMeta {
    pub fn from_sample(s: &TrainingSample) -> Result<Self> {
        Ok(Self {
            h_gt: s.h_gt,
            h_ts_used: s.provenance.h_ts_used,
            corner_offsets_gt: homography_to_offsets(&s.h_gt, s.frame())?,
            quality_score: s.provenance.quality_score,
            accepted: s.provenance.accepted,
            seed: s.provenance.seed,
            iteration: s.provenance.iteration,
            provenance: s.provenance.clone(),
        })
    }
}

/// Optional masks stored next to a sample.
#[derive(Clone, Debug)]
pub struct SampleMasks {
    pub m_s: PlaneMask,
    pub m_t: PlaneMask,
}

pub fn sample_dir_name(index: usize) -> String {
    format!("{index:04}")
}

/// Writes one directory per sample, in order.
pub fn save_shard(samples: &[TrainingSample], masks: Option<&[SampleMasks]>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let sub = dir.join(sample_dir_name(i));
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        io::save_image(&s.i_s, sub.join("source.png"))?;
        io::save_image(&s.i_t_prime, sub.join("target.png"))?;
        let meta = SampleMeta::from_sample(s)?;
        let path = sub.join("meta.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
        if let Some(m) = masks.and_then(|m| m.get(i)) {
            io::save_mask(&m.m_s, sub.join("mask_source.png"))?;
            io::save_mask(&m.m_t, sub.join("mask_target.png"))?;
        }
    }
    Ok(())
}

/// Reads every sample directory under `dir` in name order.
pub fn load_shard(dir: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    let dir = dir.as_ref();
    let mut subdirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    subdirs.sort();
    subdirs.iter().map(|sub| load_sample(sub)).collect()
}

pub fn load_sample(sub: &Path) -> Result<TrainingSample> {
    let path = sub.join("meta.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SampleMeta = serde_json::from_slice(&bytes)?;
    let i_s = io::load_image(sub.join("source.png"))?;
    let i_t_prime = io::load_image(sub.join("target.png"))?;
    i_s.same_shape(&i_t_prime)?;
    let mut provenance = meta.provenance;
    provenance.quality_score = meta.quality_score;
    provenance.accepted = meta.accepted;
    Ok(TrainingSample {
        i_s,
        i_t_prime,
        h_gt: meta.h_gt,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ImageBuf;

    fn sample(k: u64) -> TrainingSample {
        let level = |m: usize| move |x: usize, y: usize| ((x * 7 + y * 3 + k as usize) % 17 * m) as f32 / 255.0;
        TrainingSample {
            i_s: ImageBuf::from_fn(24, 16, level(15)),
            i_t_prime: ImageBuf::from_fn(24, 16, level(13)),
            h_gt: Homography::translation(k as f64, -1.5),
            provenance: Provenance {
                pair_id: k,
                iteration: 1,
                seed: 99 + k,
                h_ts_used: Homography::identity(),
                quality_score: Some(0.75),
                accepted: Some(true),
                empty_dominant_plane: false,
            },
        }
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sample(1), sample(2)];
        save_shard(&samples, None, dir.path()).unwrap();
        let back = load_shard(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.i_s, b.i_s);
            assert_eq!(a.i_t_prime, b.i_t_prime);
            assert_eq!(a.h_gt, b.h_gt);
            assert_eq!(a.provenance, b.provenance);
        }
        let meta: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("0000/meta.json")).unwrap()).unwrap();
        assert_eq!(meta["h_gt"].as_array().unwrap().len(), 9);
        assert_eq!(meta["corner_offsets_gt"]["offsets"].as_array().unwrap().len(), 8);
    }
}
