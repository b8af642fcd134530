//! Semantic label tables and per-pixel masks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticClass {
    Road,
    Lane,
    Crosswalk,
    StopLine,
    Vehicle,
    Pedestrian,
    Bicycle,
    Building,
    Tree,
    Sky,
    Other,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 11] = [
        SemanticClass::Other,
        SemanticClass::Road,
        SemanticClass::Lane,
        SemanticClass::Crosswalk,
        SemanticClass::StopLine,
        SemanticClass::Vehicle,
        SemanticClass::Pedestrian,
        SemanticClass::Bicycle,
        SemanticClass::Building,
        SemanticClass::Tree,
        SemanticClass::Sky,
    ];

    /// Classes that lie on the road surface and receive ground depth.
    pub fn is_ground(self) -> bool {
        matches!(
            self,
            SemanticClass::Road | SemanticClass::Lane | SemanticClass::Crosswalk | SemanticClass::StopLine
        )
    }

    pub fn is_dynamic_by_default(self) -> bool {
        matches!(
            self,
            SemanticClass::Vehicle | SemanticClass::Pedestrian | SemanticClass::Bicycle
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: u8,
    pub class: SemanticClass,
    pub dynamic: bool,
}

/// Maps raster label ids to semantic classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LabelEntry>", into = "Vec<LabelEntry>")]
pub struct LabelTable {
    entries: Vec<LabelEntry>,
    by_id: Vec<Option<u8>>,
}

impl LabelTable {
    pub fn new(entries: Vec<LabelEntry>) -> Result<Self> {
        let mut by_id = vec![None; 256];
        for (i, e) in entries.iter().enumerate() {
            if by_id[e.id as usize].is_some() {
                return Err(Error::InvalidArgument(format!("duplicate label id {}", e.id)));
            }
            by_id[e.id as usize] = Some(i as u8);
        }
        Ok(Self { entries, by_id })
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn get(&self, id: u8) -> Result<&LabelEntry> {
        self.by_id[id as usize]
            .map(|i| &self.entries[i as usize])
            .ok_or(Error::UnknownLabel(id))
    }

    pub fn is_dynamic(&self, id: u8) -> Result<bool> {
        Ok(self.get(id)?.dynamic)
    }

    pub fn is_ground(&self, id: u8) -> Result<bool> {
        Ok(self.get(id)?.class.is_ground())
    }

    pub fn class_of(&self, id: u8) -> Result<SemanticClass> {
        Ok(self.get(id)?.class)
    }

    /// First id carrying `class`.
    pub fn id_of(&self, class: SemanticClass) -> Option<u8> {
        self.entries.iter().find(|e| e.class == class).map(|e| e.id)
    }
}

impl Default for LabelTable {
    fn default() -> Self {
        let entries = SemanticClass::ALL
            .iter()
            .enumerate()
            .map(|(i, &class)| LabelEntry {
                id: i as u8,
                class,
                dynamic: class.is_dynamic_by_default(),
            })
            .collect();
        Self::new(entries).expect("default label ids are unique")
    }
}

impl TryFrom<Vec<LabelEntry>> for LabelTable {
    type Error = Error;
    fn try_from(v: Vec<LabelEntry>) -> Result<Self> {
        LabelTable::new(v)
    }
}

impl From<LabelTable> for Vec<LabelEntry> {
    fn from(t: LabelTable) -> Self {
        t.entries
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
    table: Arc<LabelTable>,
}

impl SemanticMask {
    pub fn new(width: u32, height: u32, labels: Vec<u8>, table: Arc<LabelTable>) -> Result<Self> {
        if labels.len() != width as usize * height as usize {
            return Err(Error::InvalidArgument(format!(
                "mask has {} labels for a {width}x{height} raster",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| table.get(l).is_err()) {
            return Err(Error::UnknownLabel(bad));
        }
        Ok(Self {
            width,
            height,
            labels,
            table,
        })
    }

    pub fn filled(width: u32, height: u32, label: u8, table: Arc<LabelTable>) -> Result<Self> {
        Self::new(width, height, vec![label; width as usize * height as usize], table)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn table(&self) -> &Arc<LabelTable> {
        &self.table
    }

    pub fn label(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    /// Label at the pixel nearest to `(u, v)`, if inside the raster.
    pub fn label_at(&self, u: f64, v: f64) -> Option<u8> {
        let x = u.round();
        let y = v.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some(self.label(x as u32, y as u32))
    }

    pub fn is_dynamic_at(&self, index: usize) -> bool {
        // Labels are validated on construction.
        self.table.get(self.labels[index]).map(|e| e.dynamic).unwrap_or(false)
    }

    pub fn is_ground_at(&self, index: usize) -> bool {
        self.table
            .get(self.labels[index])
            .map(|e| e.class.is_ground())
            .unwrap_or(false)
    }

    pub fn dynamic_pixel_count(&self) -> usize {
        (0..self.labels.len()).filter(|&i| self.is_dynamic_at(i)).count()
    }

    pub fn dynamic_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.dynamic_pixel_count() as f64 / self.labels.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_flags_movers() {
        let t = LabelTable::default();
        for e in t.entries() {
            let expect = matches!(
                e.class,
                SemanticClass::Vehicle | SemanticClass::Pedestrian | SemanticClass::Bicycle
            );
            assert_eq!(e.dynamic, expect, "{:?}", e.class);
        }
        assert!(t.is_ground(t.id_of(SemanticClass::StopLine).unwrap()).unwrap());
        assert!(!t.is_ground(t.id_of(SemanticClass::Building).unwrap()).unwrap());
    }

    #[test]
    fn mask_rejects_unknown_ids() {
        let t = Arc::new(LabelTable::default());
        assert!(matches!(
            SemanticMask::new(2, 1, vec![0, 200], t.clone()),
            Err(Error::UnknownLabel(200))
        ));
        assert!(SemanticMask::new(2, 2, vec![0, 0], t).is_err());
    }

    #[test]
    fn dynamic_fraction_counts_pixels() {
        let t = Arc::new(LabelTable::default());
        let car = t.id_of(SemanticClass::Vehicle).unwrap();
        let road = t.id_of(SemanticClass::Road).unwrap();
        let mut labels = vec![road; 100];
        labels[..25].fill(car);
        let m = SemanticMask::new(10, 10, labels, t).unwrap();
        assert_eq!(m.dynamic_pixel_count(), 25);
        assert_eq!(m.dynamic_fraction(), 0.25);
    }
}
