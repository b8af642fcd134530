//! On-disk dataset: a JSON manifest next to PNG colour images, 8-bit label
//! masks and `t x y` trajectory files. Paths are relative to the manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{CameraModel, ImageRecord, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::nav::GuidanceTrajectory;
use crate::semantics::{LabelTable, SemanticMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub trip: u32,
    pub camera: u32,
    pub timestamp: f64,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub prior_pose: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_pose: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub trip: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cameras: Vec<CameraModel>,
    #[serde(default)]
    pub labels: LabelTable,
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub trajectories: Vec<TrajectoryEntry>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
}

fn ingest(id: &str, message: impl ToString) -> Error {
    Error::Ingest {
        image_id: id.to_string(),
        message: message.to_string(),
    }
}

pub fn read_png_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    RgbImage::from_rgb8(img.width(), img.height(), img.as_raw())
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width(), img.height(), img.to_rgb8())
        .ok_or_else(|| Error::InvalidArgument("raster size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Encodes an image as PNG bytes in memory.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        &img.to_rgb8(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )?;
    Ok(out.into_inner())
}

fn write_png_labels(path: &Path, mask: &SemanticMask) -> Result<()> {
    let buf = image::GrayImage::from_raw(mask.width(), mask.height(), mask.labels().to_vec())
        .ok_or_else(|| Error::InvalidArgument("mask size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, root })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Loads every image and mask; failures name the offending image id.
    pub fn load_images(&self) -> Result<Vec<ImageRecord>> {
        let cameras: BTreeMap<u32, Arc<CameraModel>> =
            self.manifest.cameras.iter().map(|c| (c.id, Arc::new(c.clone()))).collect();
        let labels = Arc::new(self.manifest.labels.clone());
        let mut out = Vec::with_capacity(self.manifest.images.len());
        for e in &self.manifest.images {
            let camera = cameras
                .get(&e.camera)
                .ok_or_else(|| ingest(&e.id, format!("unknown camera {}", e.camera)))?
                .clone();
            let pixels = read_png_rgb(&self.resolve(&e.image)).map_err(|err| ingest(&e.id, format!("image: {err}")))?;
            let mask_path = self.resolve(&e.mask);
            let mask_img = image::open(&mask_path)
                .map_err(|err| ingest(&e.id, format!("mask {}: {err}", mask_path.display())))?
                .to_luma8();
            let mask = SemanticMask::new(mask_img.width(), mask_img.height(), mask_img.into_raw(), labels.clone())
                .map_err(|err| ingest(&e.id, format!("mask: {err}")))?;
            let rec = ImageRecord {
                id: e.id.clone(),
                trip: e.trip,
                camera,
                timestamp: e.timestamp,
                pixels,
                mask,
                prior_pose: e.prior_pose,
                refined_pose: e.refined_pose,
            };
            rec.validate()?;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn load_trajectories(&self) -> Result<Vec<GuidanceTrajectory>> {
        self.manifest
            .trajectories
            .iter()
            .map(|t| {
                let f = File::open(self.resolve(&t.path))?;
                GuidanceTrajectory::read(BufReader::new(f), t.trip)
            })
            .collect()
    }
}

/// Writes images, masks, trajectories and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, images: &[ImageRecord], trajectories: &[GuidanceTrajectory]) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    std::fs::create_dir_all(dir.join("trajectories"))?;
    let mut cameras: BTreeMap<u32, CameraModel> = BTreeMap::new();
    let mut labels = None;
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        cameras.entry(img.camera.id).or_insert_with(|| (*img.camera).clone());
        labels.get_or_insert_with(|| img.mask.table().as_ref().clone());
        let image = PathBuf::from("images").join(format!("{}.png", img.id));
        let mask = PathBuf::from("masks").join(format!("{}.png", img.id));
        write_png_rgb(&dir.join(&image), &img.pixels)?;
        write_png_labels(&dir.join(&mask), &img.mask)?;
        entries.push(ImageEntry {
            id: img.id.clone(),
            trip: img.trip,
            camera: img.camera.id,
            timestamp: img.timestamp,
            image,
            mask,
            prior_pose: img.prior_pose,
            refined_pose: img.refined_pose,
        });
    }
    let mut traj_entries = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let path = PathBuf::from("trajectories").join(format!("trip{:03}.txt", t.trip));
        t.write(BufWriter::new(File::create(dir.join(&path))?))?;
        traj_entries.push(TrajectoryEntry { trip: t.trip, path });
    }
    let manifest = Manifest {
        cameras: cameras.into_values().collect(),
        labels: labels.unwrap_or_default(),
        images: entries,
        trajectories: traj_entries,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("manifest.json"))?), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_trips, Scene, SynthConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            n_trips: 2,
            images_per_trip: 3,
            width: 16,
            height: 12,
            focal: 12.0,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = make_trips(&Scene::street(0), &small()).unwrap();
        write_dataset(dir.path(), &data.images, &data.trajectories).unwrap();
        let ds = Dataset::open(dir.path().join("manifest.json")).unwrap();
        let loaded = ds.load_images().unwrap();
        assert_eq!(loaded.len(), data.images.len());
        for (a, b) in loaded.iter().zip(&data.images) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask.labels(), b.mask.labels());
            assert_eq!(a.pixels.to_rgb8(), b.pixels.to_rgb8());
            assert_eq!(a.refined_pose, b.refined_pose);
            assert_eq!(*a.camera, *b.camera);
        }
        assert_eq!(ds.load_trajectories().unwrap(), data.trajectories);
    }

    #[test]
    fn missing_mask_names_image() {
        let dir = tempfile::tempdir().unwrap();
        let (_, data) = make_trips(&Scene::street(0), &small()).unwrap();
        let m = write_dataset(dir.path(), &data.images, &[]).unwrap();
        std::fs::remove_file(dir.path().join(&m.images[1].mask)).unwrap();
        let err = Dataset::open(dir.path().join("manifest.json")).unwrap().load_images().unwrap_err();
        match err {
            Error::Ingest { image_id, .. } => assert_eq!(image_id, m.images[1].id),
            other => panic!("unexpected {other}"),
        }
    }
}
