//! Pre/post-processing of externally computed feature matches: semantic
//! gating and pose-prior candidate pairs.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::semantics::{LabelTable, SemanticMask};

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub image_id: String,
    pub u: f64,
    pub v: f64,
    pub label: u8,
    pub descriptor: Vec<u8>,
}

impl Feature {
    /// Labels the feature with the mask value at its rounded pixel.
    pub fn from_mask(image_id: &str, u: f64, v: f64, mask: &SemanticMask, descriptor: Vec<u8>) -> Result<Self> {
        let label = mask.label_at(u, v).ok_or_else(|| {
            Error::InvalidArgument(format!("feature ({u}, {v}) outside {image_id}"))
        })?;
        Ok(Self {
            image_id: image_id.to_string(),
            u,
            v,
            label,
            descriptor,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    pub image_a: String,
    pub index_a: usize,
    pub image_b: String,
    pub index_b: usize,
    pub score: f64,
}

/// Optional coarsening of label ids before the equality test.
#[derive(Debug, Clone, Default)]
pub struct LabelMerge(HashMap<u8, u8>);

impl LabelMerge {
    pub fn new(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    pub fn group(&self, label: u8) -> u8 {
        self.0.get(&label).copied().unwrap_or(label)
    }
}

pub fn drop_dynamic_features(features: &[Feature], table: &LabelTable) -> Result<Vec<Feature>> {
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        if !table.is_dynamic(f.label)? {
            out.push(f.clone());
        }
    }
    Ok(out)
}

/// Keeps matches whose two features carry the same (merged) label.
///
/// `features` maps image id to that image's feature list; matches that
/// reference a missing feature are dropped.
pub fn gate_matches_by_semantics(
    matches: &[MatchPair],
    features: &HashMap<String, Vec<Feature>>,
    merge: &LabelMerge,
) -> Vec<MatchPair> {
    let label = |img: &str, idx: usize| features.get(img).and_then(|fs| fs.get(idx)).map(|f| merge.group(f.label));
    matches
        .iter()
        .filter(|m| match (label(&m.image_a, m.index_a), label(&m.image_b, m.index_b)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        })
        .cloned()
        .collect()
}

/// Unordered image pairs whose prior positions lie within `radius`.
pub fn candidate_pairs_by_prior(images: &[ImageRecord], radius: f64) -> Result<Vec<(String, String)>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius {radius} must be positive")));
    }
    let mut pairs = Vec::new();
    for (i, a) in images.iter().enumerate() {
        for b in &images[i + 1..] {
            if a.id != b.id && a.prior_pose.translation_distance_to(&b.prior_pose) <= radius {
                pairs.push((a.id.clone(), b.id.clone()));
            }
        }
    }
    Ok(pairs)
}

/// Parses the `imageA imageB idxA idxB score` line format. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_matches(r: impl BufRead) -> Result<Vec<MatchPair>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ctx = || format!("match line {}", n + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::parse(ctx(), format!("expected 5 fields, got {}", f.len())));
        }
        let pair = MatchPair {
            image_a: f[0].to_string(),
            image_b: f[1].to_string(),
            index_a: f[2].parse().map_err(|e| Error::parse(ctx(), e))?,
            index_b: f[3].parse().map_err(|e| Error::parse(ctx(), e))?,
            score: f[4].parse().map_err(|e| Error::parse(ctx(), e))?,
        };
        if pair.image_a == pair.image_b {
            return Err(Error::parse(ctx(), "match pairs an image with itself"));
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn write_matches(mut w: impl Write, matches: &[MatchPair]) -> std::io::Result<()> {
    for m in matches {
        writeln!(w, "{} {} {} {} {}", m.image_a, m.image_b, m.index_a, m.index_b, m.score)?;
    }
    Ok(())
}

/// Feature files: one `u v label` row per feature.
pub fn read_features(image_id: &str, r: impl BufRead) -> Result<Vec<Feature>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ctx = || format!("{image_id} feature line {}", n + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 3 {
            return Err(Error::parse(ctx(), "expected `u v label`"));
        }
        out.push(Feature {
            image_id: image_id.to_string(),
            u: f[0].parse().map_err(|e| Error::parse(ctx(), e))?,
            v: f[1].parse().map_err(|e| Error::parse(ctx(), e))?,
            label: f[2].parse().map_err(|e| Error::parse(ctx(), e))?,
            descriptor: Vec::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::SemanticClass;

    fn feat(img: &str, label: u8) -> Feature {
        Feature {
            image_id: img.into(),
            u: 0.0,
            v: 0.0,
            label,
            descriptor: vec![],
        }
    }

    fn id(t: &LabelTable, c: SemanticClass) -> u8 {
        t.id_of(c).unwrap()
    }

    #[test]
    fn drops_features_on_movers() {
        let t = LabelTable::default();
        let static_only: Vec<_> = (0..5).map(|_| feat("a", id(&t, SemanticClass::Road))).collect();
        assert_eq!(drop_dynamic_features(&static_only, &t).unwrap(), static_only);

        let mut mixed: Vec<_> = (0..6).map(|_| feat("a", id(&t, SemanticClass::Building))).collect();
        mixed.extend((0..4).map(|_| feat("a", id(&t, SemanticClass::Vehicle))));
        assert_eq!(drop_dynamic_features(&mixed, &t).unwrap().len(), 6);

        let ped = vec![feat("a", id(&t, SemanticClass::Pedestrian))];
        assert!(drop_dynamic_features(&ped, &t).unwrap().is_empty());
        assert!(matches!(drop_dynamic_features(&[feat("a", 99)], &t), Err(Error::UnknownLabel(99))));
    }

    #[test]
    fn gates_on_label_equality() {
        let t = LabelTable::default();
        let road = id(&t, SemanticClass::Road);
        let lane = id(&t, SemanticClass::Lane);
        let building = id(&t, SemanticClass::Building);
        let mut fs = HashMap::new();
        fs.insert("a".to_string(), vec![feat("a", road), feat("a", lane)]);
        fs.insert("b".to_string(), vec![feat("b", road), feat("b", building)]);
        let m = |ia, ib| MatchPair {
            image_a: "a".into(),
            index_a: ia,
            image_b: "b".into(),
            index_b: ib,
            score: 1.0,
        };
        let all = vec![m(0, 0), m(0, 1), m(1, 0)];
        let kept = gate_matches_by_semantics(&all, &fs, &LabelMerge::default());
        assert_eq!(kept, vec![m(0, 0)]);
        let merged = gate_matches_by_semantics(&all, &fs, &LabelMerge::new([(lane, road)]));
        assert_eq!(merged, vec![m(0, 0), m(1, 0)]);
    }

    #[test]
    fn match_file_round_trip() {
        let text = "# header\nimg1 img2 3 4 0.5\n\nimg2 img3 0 1 1\n";
        let m = read_matches(text.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        let mut buf = Vec::new();
        write_matches(&mut buf, &m).unwrap();
        assert_eq!(read_matches(buf.as_slice()).unwrap(), m);
        assert!(read_matches("a a 0 0 1".as_bytes()).is_err());
        assert!(read_matches("a b 0".as_bytes()).is_err());
    }
}
