//! Block partitioning and crowd-data image filtering.
//!
//! Filters run in a fixed order: moving-object proportion, pose stability,
//! then diversity clustering. Diversity clusters are formed over the whole
//! input so that removing an image earlier can never split a cluster and
//! raise the number of retained frames.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub center: [f64; 2],
    pub side: f64,
    pub members: Vec<String>,
}

impl Block {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let h = self.side / 2.0 + 1e-9;
        (x - self.center[0]).abs() <= h && (y - self.center[1]).abs() <= h
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let h = self.side / 2.0;
        (
            [self.center[0] - h, self.center[1] - h],
            [self.center[0] + h, self.center[1] + h],
        )
    }
}

fn axis_tiles(min: f64, max: f64, side: f64, stride: f64) -> (usize, f64) {
    let extent = max - min;
    let n = if extent <= side {
        1
    } else {
        ((extent - side) / stride).ceil() as usize + 1
    };
    let coverage = side + (n - 1) as f64 * stride;
    let start = (min + max) / 2.0 - coverage / 2.0;
    (n, start)
}

/// Tiles the xy bounding box of all image positions with overlapping squares.
///
/// The grid is centred on the data and its stride is
/// `block_side * (1 - overlap_fraction)`. Images join every block that
/// contains them; blocks left without members are dropped.
pub fn partition_blocks(images: &[ImageRecord], block_side: f64, overlap_fraction: f64) -> Result<Vec<Block>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(block_side > 0.0) || !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::InvalidArgument(format!(
            "block side {block_side} / overlap {overlap_fraction}"
        )));
    }
    let stride = block_side * (1.0 - overlap_fraction);
    let pos: Vec<_> = images.iter().map(|i| i.position()).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pos {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let (nx, sx) = axis_tiles(lo[0], hi[0], block_side, stride);
    let (ny, sy) = axis_tiles(lo[1], hi[1], block_side, stride);

    let mut blocks = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            let mut block = Block {
                id: format!("b{ix}_{iy}"),
                center: [
                    sx + ix as f64 * stride + block_side / 2.0,
                    sy + iy as f64 * stride + block_side / 2.0,
                ],
                side: block_side,
                members: Vec::new(),
            };
            for (img, p) in images.iter().zip(&pos) {
                if block.contains(p.x, p.y) {
                    block.members.push(img.id.clone());
                }
            }
            if !block.members.is_empty() {
                blocks.push(block);
            }
        }
    }
    Ok(blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    DynamicProportion,
    PoseInstability,
    Redundancy,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::DynamicProportion => "dynamic_proportion",
            RejectReason::PoseInstability => "pose_instability",
            RejectReason::Redundancy => "redundancy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision", content = "reason")]
pub enum Decision {
    Kept,
    Rejected(RejectReason),
}

impl Decision {
    pub fn is_kept(self) -> bool {
        matches!(self, Decision::Kept)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDecision {
    pub id: String,
    pub decision: Decision,
    /// Set when the pose-stability filter could not judge the image.
    #[serde(default)]
    pub unjudged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub decisions: Vec<ImageDecision>,
}

impl FilterReport {
    pub fn kept_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.decision.is_kept()).count()
    }

    pub fn rejected_count(&self) -> usize {
        self.decisions.len() - self.kept_count()
    }

    pub fn counts_by_reason(&self) -> BTreeMap<RejectReason, usize> {
        let mut m = BTreeMap::new();
        for d in &self.decisions {
            if let Decision::Rejected(r) = d.decision {
                *m.entry(r).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn kept_ids(&self) -> Vec<&str> {
        self.decisions
            .iter()
            .filter(|d| d.decision.is_kept())
            .map(|d| d.id.as_str())
            .collect()
    }

    /// One tab-separated record per image: `id decision reason`.
    pub fn write_text(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "# id\tdecision\treason")?;
        for d in &self.decisions {
            match d.decision {
                Decision::Kept if d.unjudged => writeln!(w, "{}\tkept\tunjudged", d.id)?,
                Decision::Kept => writeln!(w, "{}\tkept\t-", d.id)?,
                Decision::Rejected(r) => writeln!(w, "{}\trejected\t{r}", d.id)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub dynamic_threshold: f64,
    pub max_translation: f64,
    pub max_rotation: f64,
    pub pos_radius: f64,
    pub time_window: f64,
    pub view_angle: f64,
    pub keep_per_cluster: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            dynamic_threshold: 0.40,
            max_translation: 5.0,
            max_rotation: 5f64.to_radians(),
            pos_radius: 2.0,
            time_window: 2.0,
            view_angle: 10f64.to_radians(),
            keep_per_cluster: 1,
        }
    }
}

/// Rejects images whose share of moving-object pixels exceeds `threshold`.
pub fn filter_dynamic_proportion(img: &ImageRecord, threshold: f64) -> Decision {
    if img.mask.dynamic_fraction() > threshold {
        Decision::Rejected(RejectReason::DynamicProportion)
    } else {
        Decision::Kept
    }
}

/// Rejects images whose pose moved too far during refinement.
pub fn filter_pose_stability(img: &ImageRecord, max_translation: f64, max_rotation: f64) -> Result<Decision> {
    let refined = img
        .refined_pose
        .as_ref()
        .ok_or_else(|| Error::MissingRefinedPose(img.id.clone()))?;
    let dt = img.prior_pose.translation_distance_to(refined);
    let dr = img.prior_pose.rotation_angle_to(refined);
    Ok(if dt > max_translation || dr > max_rotation {
        Decision::Rejected(RejectReason::PoseInstability)
    } else {
        Decision::Kept
    })
}

fn linked(a: &ImageRecord, b: &ImageRecord, cfg: &SelectionConfig) -> bool {
    if (a.timestamp - b.timestamp).abs() > cfg.time_window {
        return false;
    }
    if (a.position() - b.position()).norm() > cfg.pos_radius {
        return false;
    }
    let cos = a.view_direction().dot(&b.view_direction()).clamp(-1.0, 1.0);
    cos.acos() <= cfg.view_angle
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the similarity graph, each sorted by input index.
pub fn cluster_images(images: &[ImageRecord], cfg: &SelectionConfig) -> Vec<Vec<usize>> {
    let n = images.len();
    let mut ds = DisjointSet((0..n).collect());
    for i in 0..n {
        for j in i + 1..n {
            if linked(&images[i], &images[j], cfg) {
                ds.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = ds.find(i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

fn retention_order(images: &[ImageRecord], members: &mut [usize]) {
    members.sort_by(|&a, &b| {
        let (ia, ib) = (&images[a], &images[b]);
        ia.timestamp
            .total_cmp(&ib.timestamp)
            .then(ia.mask.dynamic_fraction().total_cmp(&ib.mask.dynamic_fraction()))
            .then(ia.id.cmp(&ib.id))
    });
}

/// Diversity clustering over `images`, keeping `keep_per_cluster` per cluster.
pub fn filter_diversity(images: &[ImageRecord], cfg: &SelectionConfig) -> Result<FilterReport> {
    let eligible = vec![true; images.len()];
    diversity_decisions(images, cfg, &eligible).map(|decisions| FilterReport {
        decisions: images
            .iter()
            .zip(decisions)
            .map(|(img, decision)| ImageDecision {
                id: img.id.clone(),
                decision,
                unjudged: false,
            })
            .collect(),
    })
}

fn diversity_decisions(images: &[ImageRecord], cfg: &SelectionConfig, eligible: &[bool]) -> Result<Vec<Decision>> {
    if cfg.keep_per_cluster == 0 {
        return Err(Error::InvalidArgument("keep_per_cluster must be at least 1".into()));
    }
    let mut out = vec![Decision::Rejected(RejectReason::Redundancy); images.len()];
    for mut cluster in cluster_images(images, cfg) {
        cluster.retain(|&i| eligible[i]);
        retention_order(images, &mut cluster);
        for &i in cluster.iter().take(cfg.keep_per_cluster) {
            out[i] = Decision::Kept;
        }
    }
    Ok(out)
}

/// Applies the dynamic, pose-stability and diversity filters in that order.
pub fn run_selection(images: &[ImageRecord], cfg: &SelectionConfig) -> Result<(FilterReport, Vec<ImageRecord>)> {
    if !(cfg.dynamic_threshold > 0.0 && cfg.dynamic_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dynamic threshold {} outside (0, 1]",
            cfg.dynamic_threshold
        )));
    }
    let mut decisions: Vec<ImageDecision> = Vec::with_capacity(images.len());
    for img in images {
        let mut d = ImageDecision {
            id: img.id.clone(),
            decision: filter_dynamic_proportion(img, cfg.dynamic_threshold),
            unjudged: false,
        };
        if d.decision.is_kept() {
            match filter_pose_stability(img, cfg.max_translation, cfg.max_rotation) {
                Ok(dec) => d.decision = dec,
                Err(Error::MissingRefinedPose(_)) => d.unjudged = true,
                Err(e) => return Err(e),
            }
        }
        decisions.push(d);
    }
    let eligible: Vec<bool> = decisions.iter().map(|d| d.decision.is_kept()).collect();
    let diversity = diversity_decisions(images, cfg, &eligible)?;
    for (d, div) in decisions.iter_mut().zip(diversity) {
        if d.decision.is_kept() {
            d.decision = div;
        }
    }
    let kept = images
        .iter()
        .zip(&decisions)
        .filter(|(_, d)| d.decision.is_kept())
        .map(|(i, _)| i.clone())
        .collect();
    Ok((FilterReport { decisions }, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CameraModel, RgbImage};
    use crate::geometry::{CameraIntrinsics, ExtrinsicCalibration, Pose, Vec3};
    use crate::semantics::{LabelTable, SemanticClass, SemanticMask};
    use std::sync::Arc;

    fn record(id: &str, x: f64, y: f64, yaw: f64, t: f64, dynamic_px: usize) -> ImageRecord {
        let table = Arc::new(LabelTable::default());
        let car = table.id_of(SemanticClass::Vehicle).unwrap();
        let road = table.id_of(SemanticClass::Road).unwrap();
        let mut labels = vec![road; 100];
        labels[..dynamic_px].fill(car);
        let camera = Arc::new(CameraModel {
            id: 0,
            intrinsics: CameraIntrinsics::centered(10.0, 10, 10).unwrap(),
            extrinsics: ExtrinsicCalibration::forward_camera(Vec3::new(0.0, 0.0, 1.5), 0.1),
        });
        let pose = Pose::planar_vehicle(x, y, yaw);
        ImageRecord {
            id: id.into(),
            trip: 0,
            camera,
            timestamp: t,
            pixels: RgbImage::filled(10, 10, [0.5; 3]),
            mask: SemanticMask::new(10, 10, labels, table).unwrap(),
            prior_pose: pose,
            refined_pose: Some(pose),
        }
    }

    #[test]
    fn dynamic_threshold_is_strict() {
        assert_eq!(filter_dynamic_proportion(&record("a", 0.0, 0.0, 0.0, 0.0, 41), 0.40), Decision::Rejected(RejectReason::DynamicProportion));
        assert_eq!(filter_dynamic_proportion(&record("a", 0.0, 0.0, 0.0, 0.0, 40), 0.40), Decision::Kept);
        assert_eq!(filter_dynamic_proportion(&record("a", 0.0, 0.0, 0.0, 0.0, 0), 0.40), Decision::Kept);
    }

    #[test]
    fn half_dynamic_mask_is_rejected() {
        // 10x10 mask with 50 vehicle pixels: 0.5 > 0.4.
        let r = record("a", 0.0, 0.0, 0.0, 0.0, 50);
        assert_eq!(r.mask.dynamic_pixel_count(), 50);
        assert!(!filter_dynamic_proportion(&r, 0.4).is_kept());
    }

    #[test]
    fn pose_stability() {
        let mut r = record("a", 0.0, 0.0, 0.0, 0.0, 0);
        assert_eq!(filter_pose_stability(&r, 5.0, 0.1).unwrap(), Decision::Kept);
        r.refined_pose = Some(Pose::planar_vehicle(12.0, 0.0, 0.0));
        assert!(!filter_pose_stability(&r, 5.0, 0.1).unwrap().is_kept());
        r.refined_pose = Some(Pose::planar_vehicle(0.0, 0.0, 0.3));
        assert!(!filter_pose_stability(&r, 5.0, 0.1).unwrap().is_kept());
        r.refined_pose = None;
        assert!(matches!(filter_pose_stability(&r, 5.0, 0.1), Err(Error::MissingRefinedPose(_))));
    }

    #[test]
    fn missing_refined_pose_passes_flagged() {
        let mut r = record("a", 0.0, 0.0, 0.0, 0.0, 0);
        r.refined_pose = None;
        let (rep, kept) = run_selection(&[r], &SelectionConfig::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert!(rep.decisions[0].unjudged);
    }

    #[test]
    fn identical_frames_collapse() {
        let imgs: Vec<_> = (0..10).map(|i| record(&format!("d{i}"), 1.0, 1.0, 0.0, 5.0, 0)).collect();
        let cfg = SelectionConfig {
            keep_per_cluster: 2,
            ..Default::default()
        };
        let rep = filter_diversity(&imgs, &cfg).unwrap();
        assert_eq!(rep.kept_count(), 2);
        assert_eq!(rep.counts_by_reason()[&RejectReason::Redundancy], 8);
    }

    #[test]
    fn two_clusters_keep_one_each() {
        let mut imgs: Vec<_> = (0..5).map(|i| record(&format!("a{i}"), 0.0, 0.0, 0.0, i as f64 * 0.1, 0)).collect();
        imgs.extend((0..5).map(|i| record(&format!("b{i}"), 50.0, 0.0, 0.0, i as f64 * 0.1, 0)));
        let rep = filter_diversity(&imgs, &SelectionConfig::default()).unwrap();
        assert_eq!(rep.kept_ids(), vec!["a0", "b0"]);
    }

    #[test]
    fn dissimilar_frames_all_kept() {
        let imgs: Vec<_> = (0..6).map(|i| record(&format!("a{i}"), i as f64 * 10.0, 0.0, 0.0, 0.0, 0)).collect();
        assert_eq!(filter_diversity(&imgs, &SelectionConfig::default()).unwrap().kept_count(), 6);
    }

    #[test]
    fn chain_does_not_split_when_middle_is_dropped() {
        // a -- b -- c linked only through b; b is mostly dynamic.
        let imgs = vec![
            record("a", 0.0, 0.0, 0.0, 0.0, 0),
            record("b", 1.5, 0.0, 0.0, 0.5, 60),
            record("c", 3.0, 0.0, 0.0, 1.0, 0),
        ];
        let (rep, kept) = run_selection(&imgs, &SelectionConfig::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(rep.kept_ids(), vec!["a"]);
    }

    #[test]
    fn empty_selection() {
        let (rep, kept) = run_selection(&[], &SelectionConfig::default()).unwrap();
        assert!(rep.decisions.is_empty() && kept.is_empty());
    }

    #[test]
    fn single_image_block() {
        let blocks = partition_blocks(&[record("o", 0.0, 0.0, 0.0, 0.0, 0)], 150.0, 0.2).unwrap();
        assert_eq!(blocks.len(), 1);
        assert!(blocks[0].contains(0.0, 0.0));
        assert!(matches!(partition_blocks(&[], 150.0, 0.2), Err(Error::EmptyDataset)));
    }

    #[test]
    fn report_text_lines() {
        let imgs = vec![record("a", 0.0, 0.0, 0.0, 0.0, 90), record("b", 0.0, 0.0, 0.0, 0.0, 0)];
        let (rep, _) = run_selection(&imgs, &SelectionConfig::default()).unwrap();
        let mut buf = Vec::new();
        rep.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("a\trejected\tdynamic_proportion"));
        assert!(text.contains("b\tkept\t-"));
    }
}
