//! Clip-on-disk layout: `frame_%05d.png`, `mask_%05d.png`, `factors.json`.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::clip::VideoClip;
use super::dataset::ClipSource;
use super::factors::SyntheticFactors;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorsFile {
    pub identity_id: u32,
    pub pose: Vec<f32>,
    pub lighting: Vec<f32>,
    pub expression: Vec<f32>,
    pub makeup_marker: Vec<bool>,
}

impl FactorsFile {
    pub fn from_factors(fs: &[SyntheticFactors]) -> Self {
        Self {
            identity_id: fs.first().map(|f| f.identity_id).unwrap_or(0),
            pose: fs.iter().map(|f| f.pose).collect(),
            lighting: fs.iter().map(|f| f.lighting).collect(),
            expression: fs.iter().map(|f| f.expression).collect(),
            makeup_marker: fs.iter().map(|f| f.makeup_marker).collect(),
        }
    }

    pub fn to_factors(&self) -> Result<Vec<SyntheticFactors>> {
        let n = self.pose.len();
        if self.lighting.len() != n || self.expression.len() != n || self.makeup_marker.len() != n {
            return Err(Error::invalid("factors.json", "per-frame arrays differ in length"));
        }
        (0..n)
            .map(|i| {
                let f = SyntheticFactors {
                    identity_id: self.identity_id,
                    pose: self.pose[i],
                    lighting: self.lighting[i],
                    expression: self.expression[i],
                    makeup_marker: self.makeup_marker[i],
                };
                f.validate(super::factors::CODEBOOK_SIZE)?;
                Ok(f)
            })
            .collect()
    }
}

pub fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:05}.png"))
}

pub fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("mask_{i:05}.png"))
}

fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Writes a clip in the standard layout.
pub fn write_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = clip.size();
    let frames = clip.frames.to_dtype(candle_core::DType::F32)?;
    for i in 0..clip.len() {
        let data = frames.get(i)?.flatten_all()?.to_vec1::<f32>()?;
        let hw = h * w;
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            image::Rgb([to_u8(data[p]), to_u8(data[hw + p]), to_u8(data[2 * hw + p])])
        });
        img.save(frame_path(dir, i))?;
        if let Some(m) = &clip.masks {
            let md = m.get(i)?.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([if md[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
            });
            img.save(mask_path(dir, i))?;
        }
    }
    if let Some(fs) = &clip.factors {
        let json = serde_json::to_string_pretty(&FactorsFile::from_factors(fs))?;
        std::fs::write(dir.join("factors.json"), json)?;
    }
    Ok(())
}

/// Reads a clip directory. Frames are read until the first missing index.
/// With `require_masks`, every frame must have a matching mask file.
pub fn read_clip(dir: &Path, require_masks: bool) -> Result<VideoClip> {
    let mut pixels = Vec::new();
    let mut masks = Vec::new();
    let mut have_masks = true;
    let mut size = None;
    let mut n = 0;
    loop {
        let fp = frame_path(dir, n);
        if !fp.exists() {
            break;
        }
        let img = image::open(&fp)?.to_rgb8();
        let (w, h) = img.dimensions();
        match size {
            None => size = Some((h as usize, w as usize)),
            Some(s) if s != (h as usize, w as usize) => {
                return Err(Error::invalid("frames", format!("{} has a different size", fp.display())))
            }
            _ => {}
        }
        for c in 0..3 {
            pixels.extend(img.pixels().map(|p| from_u8(p.0[c])));
        }
        let mp = mask_path(dir, n);
        if mp.exists() {
            let m = image::open(&mp)?.to_luma8();
            if m.dimensions() != (w, h) {
                return Err(Error::invalid("masks", format!("{} has a different size", mp.display())));
            }
            masks.extend(m.pixels().map(|p| if p.0[0] >= 128 { 1.0f32 } else { 0.0 }));
        } else if require_masks {
            return Err(Error::MissingFile(mp));
        } else {
            have_masks = false;
        }
        n += 1;
    }
    let (h, w) = size.ok_or_else(|| Error::MissingFile(frame_path(dir, 0)))?;
    let frames = Tensor::from_vec(pixels, (n, 3, h, w), &Device::Cpu)?;
    let masks = if have_masks {
        Some(Tensor::from_vec(masks, (n, 1, h, w), &Device::Cpu)?)
    } else {
        None
    };
    let fpath = dir.join("factors.json");
    let factors = if fpath.exists() {
        let ff: FactorsFile = serde_json::from_str(&std::fs::read_to_string(&fpath)?)?;
        let fs = ff.to_factors()?;
        if fs.len() != n {
            return Err(Error::invalid("factors.json", format!("{} entries for {n} frames", fs.len())));
        }
        Some(fs)
    } else {
        None
    };
    VideoClip::new(frames, masks, factors)
}

/// Reads a single image file as a `[C, H, W]` tensor in `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((3 * w * h) as usize);
    for c in 0..3 {
        data.extend(img.pixels().map(|p| from_u8(p.0[c])));
    }
    Ok(Tensor::from_vec(data, (3, h as usize, w as usize), &Device::Cpu)?)
}

pub fn clip_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("clip_{i:05}"))
}

/// Writes every clip of `data` under `root` as `clip_%05d/`.
pub fn write_dataset<D: ClipSource + ?Sized>(data: &D, root: &Path) -> Result<()> {
    for i in 0..data.len() {
        write_clip(&data.clip(i)?, &clip_dir(root, i))?;
    }
    Ok(())
}

/// A dataset of clip directories, read on demand.
#[derive(Debug, Clone)]
pub struct DiskDataset {
    dirs: Vec<PathBuf>,
    identities: Vec<Option<u32>>,
    require_masks: bool,
}

impl DiskDataset {
    /// Every subdirectory of `root` holding `frame_00000.png`, in name order.
    pub fn open(root: &Path, require_masks: bool) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::MissingFile(root.to_path_buf()));
        }
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| frame_path(p, 0).exists())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Empty("dataset directory"));
        }
        let identities = dirs
            .iter()
            .map(|d| {
                let f = d.join("factors.json");
                if !f.exists() {
                    return Ok(None);
                }
                let ff: FactorsFile = serde_json::from_str(&std::fs::read_to_string(f)?)?;
                Ok(Some(ff.identity_id))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dirs,
            identities,
            require_masks,
        })
    }

    pub fn dirs(&self) -> &[PathBuf] {
        &self.dirs
    }
}

impl ClipSource for DiskDataset {
    fn len(&self) -> usize {
        self.dirs.len()
    }

    fn clip(&self, index: usize) -> Result<VideoClip> {
        let dir = self
            .dirs
            .get(index)
            .ok_or_else(|| Error::invalid("index", format!("{index} >= {}", self.dirs.len())))?;
        read_clip(dir, self.require_masks)
    }

    fn identity(&self, index: usize) -> Option<u32> {
        self.identities.get(index).copied().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videodata::{generate_synthetic_clip, IdentityCodebook};

    #[test]
    fn write_then_read_quantises_to_8_bit() {
        let cb = IdentityCodebook::default();
        let f = SyntheticFactors {
            identity_id: 7,
            pose: 0.1,
            lighting: 0.3,
            expression: 0.5,
            makeup_marker: false,
        };
        let clip = generate_synthetic_clip(&cb, &f, &[], 3, (32, 32), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_clip(&clip, dir.path()).unwrap();
        let back = read_clip(dir.path(), true).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.factors.as_ref().unwrap()[0], f);
        let err = crate::tensor::max_abs_diff(&back.frames, &clip.frames).unwrap();
        assert!(err <= 1.0 / 127.5 * 0.5 + 1e-6, "{err}");
        assert!(crate::tensor::bit_equal(back.masks.as_ref().unwrap(), clip.masks.as_ref().unwrap()).unwrap());
    }

    #[test]
    fn missing_mask_names_path() {
        let cb = IdentityCodebook::default();
        let f = SyntheticFactors {
            identity_id: 1,
            pose: 0.0,
            lighting: 0.0,
            expression: 0.0,
            makeup_marker: false,
        };
        let clip = generate_synthetic_clip(&cb, &f, &[], 2, (16, 16), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_clip(&clip, dir.path()).unwrap();
        std::fs::remove_file(mask_path(dir.path(), 1)).unwrap();
        match read_clip(dir.path(), true) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("mask_00001.png")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_clip(dir.path(), false).unwrap().masks.is_none());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = crate::videodata::SyntheticDataset::new(crate::videodata::SyntheticDatasetConfig {
            clips: 3,
            frames: 2,
            height: 16,
            width: 16,
            identities: 2,
            seed: 1,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        std::fs::create_dir(dir.path().join("notes")).unwrap();
        let disk = DiskDataset::open(dir.path(), true).unwrap();
        assert_eq!(disk.len(), 3);
        assert_eq!((0..3).map(|i| disk.identity(i)).collect::<Vec<_>>(), vec![Some(0), Some(1), Some(0)]);
        assert_eq!(disk.clip(2).unwrap().factors, ds.clip(2).unwrap().factors);
        assert!(DiskDataset::open(&dir.path().join("notes"), true).is_err());
    }
}
