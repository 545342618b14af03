//! Bounding-box detection data to tile-classification data.
//!
//! Images are cut into `T × T` tiles by four sliding-window passes, one
//! from each corner. A tile's overlap ratio `r` is the fraction of its
//! pixels covered by a positive box; `r = 0` gives label 0, `r > r_th`
//! label 1 and anything in between label 2 (kept for audit, never
//! trained on). Splits keep every plant on one side.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{derived_rng, Split};
use crate::error::{Error, Result};

pub const DEFAULT_TILE: u32 = 518;
pub const DEFAULT_R_TH: f64 = 0.1;

/// Label of tiles whose overlap is too small to call either way.
pub const UNCLEAR: u8 = 2;

/// One annotated box in half-open pixel coordinates `[x_min, x_max)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBoxAnnotation {
    pub image_id: String,
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    pub class: String,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub plant_id: Option<String>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.is_empty()))
}

impl BBoxAnnotation {
    pub fn new(image_id: impl Into<String>, x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self {
            image_id: image_id.into(),
            x_min,
            y_min,
            x_max,
            y_max,
            class: "rumex".into(),
            plant_id: None,
        }
    }

    pub fn with_plant(mut self, plant_id: impl Into<String>) -> Self {
        self.plant_id = Some(plant_id.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Data(format!(
                "image `{}`: empty box [{}, {}) x [{}, {})",
                self.image_id, self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        Ok(())
    }

    /// The box clamped to a `width × height` image, or `None` if nothing
    /// of it remains.
    pub fn clamped(&self, width: u32, height: u32) -> Option<Self> {
        let mut b = self.clone();
        b.x_max = b.x_max.min(width);
        b.y_max = b.y_max.min(height);
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    /// Identifier of the plant this box belongs to; unnamed boxes stand
    /// for a plant of their own.
    pub fn plant_key(&self) -> String {
        match &self.plant_id {
            Some(p) => p.clone(),
            None => format!(
                "{}@{}:{}:{}:{}",
                self.image_id, self.x_min, self.y_min, self.x_max, self.y_max
            ),
        }
    }
}

/// Reads a comma-separated annotation file with the header
/// `image_id,x_min,y_min,x_max,y_max,class,plant_id`.
pub fn read_annotations(path: &Path) -> Result<Vec<BBoxAnnotation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations_from(file, path)
}

pub fn read_annotations_from<R: Read>(reader: R, origin: &Path) -> Result<Vec<BBoxAnnotation>> {
    const HEADER: [&str; 7] = ["image_id", "x_min", "y_min", "x_max", "y_max", "class", "plant_id"];
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::format(
            origin,
            format!("expected header `{}`, found `{}`", HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<BBoxAnnotation>().enumerate() {
        let b = row.map_err(|e| Error::format(origin, format!("record {}: {e}", line + 1)))?;
        b.validate()?;
        out.push(b);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Corner {
    TL,
    TR,
    BL,
    BR,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::TL, Corner::TR, Corner::BL, Corner::BR];
}

impl fmt::Display for Corner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Corner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TL" => Ok(Corner::TL),
            "TR" => Ok(Corner::TR),
            "BL" => Ok(Corner::BL),
            "BR" => Ok(Corner::BR),
            other => Err(Error::Data(format!("unknown pass corner `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TileOrigin {
    pub x: u32,
    pub y: u32,
    /// First pass (in TL, TR, BL, BR order) that produced this origin.
    pub corner: Corner,
}

/// Origins of one axis for a pass starting at the low or the high end.
fn axis_origins(len: u32, side: u32, from_end: bool) -> Vec<u32> {
    let steps = len.div_ceil(side);
    (0..steps)
        .map(|k| {
            let offset = (k * side).min(len - side);
            if from_end {
                len - side - offset
            } else {
                offset
            }
        })
        .collect()
}

/// Union of the four corner-anchored sliding-window passes over a
/// `width × height` image, deduplicated by origin and sorted by `(x, y)`.
///
/// Each pass steps by `side`; its last row and column are clamped flush
/// with the far border, so they overlap their neighbours.
pub fn enumerate_tiles(width: u32, height: u32, side: u32) -> Result<Vec<TileOrigin>> {
    if side == 0 || width < side || height < side {
        return Err(Error::Degenerate(format!(
            "image {width}x{height} is smaller than the tile side {side}"
        )));
    }
    let mut seen: BTreeMap<(u32, u32), Corner> = BTreeMap::new();
    for corner in Corner::ALL {
        let from_right = matches!(corner, Corner::TR | Corner::BR);
        let from_bottom = matches!(corner, Corner::BL | Corner::BR);
        let xs = axis_origins(width, side, from_right);
        let ys = axis_origins(height, side, from_bottom);
        for &y in &ys {
            for &x in &xs {
                seen.entry((x, y)).or_insert(corner);
            }
        }
    }
    Ok(seen
        .into_iter()
        .map(|((x, y), corner)| TileOrigin { x, y, corner })
        .collect())
}

fn intersection(b: &BBoxAnnotation, x: u32, y: u32, side: u32) -> u64 {
    let w = b.x_max.min(x + side).saturating_sub(b.x_min.max(x));
    let h = b.y_max.min(y + side).saturating_sub(b.y_min.max(y));
    u64::from(w) * u64::from(h)
}

/// Fraction of the tile's `side²` pixels covered by the box.
pub fn overlap_ratio(b: &BBoxAnnotation, x: u32, y: u32, side: u32) -> f64 {
    intersection(b, x, y, side) as f64 / (u64::from(side) * u64::from(side)) as f64
}

/// Pixels of the tile covered by at least one box, counted exactly.
pub fn union_coverage(boxes: &[&BBoxAnnotation], x: u32, y: u32, side: u32) -> u64 {
    let clipped: Vec<(u32, u32, u32, u32)> = boxes
        .iter()
        .filter_map(|b| {
            let x0 = b.x_min.max(x);
            let x1 = b.x_max.min(x + side);
            let y0 = b.y_min.max(y);
            let y1 = b.y_max.min(y + side);
            (x0 < x1 && y0 < y1).then_some((x0, x1, y0, y1))
        })
        .collect();
    let mut xs: Vec<u32> = clipped.iter().flat_map(|c| [c.0, c.1]).collect();
    xs.sort_unstable();
    xs.dedup();
    let mut area = 0u64;
    for slab in xs.windows(2) {
        let (a, b) = (slab[0], slab[1]);
        let mut spans: Vec<(u32, u32)> = clipped
            .iter()
            .filter(|c| c.0 <= a && c.1 >= b)
            .map(|c| (c.2, c.3))
            .collect();
        spans.sort_unstable();
        let mut covered = 0u64;
        let mut reach = 0u32;
        for (lo, hi) in spans {
            let lo = lo.max(reach);
            if hi > lo {
                covered += u64::from(hi - lo);
                reach = hi;
            }
        }
        area += covered * u64::from(b - a);
    }
    area
}

/// How a tile touched by several boxes combines their overlaps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapAggregate {
    /// Largest single-box ratio.
    #[default]
    Max,
    /// Ratio of the union of all boxes.
    Union,
}

impl FromStr for OverlapAggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(OverlapAggregate::Max),
            "union" => Ok(OverlapAggregate::Union),
            other => Err(Error::Config(format!("unknown overlap aggregate `{other}`"))),
        }
    }
}

pub fn label_for_ratio(r: f64, r_th: f64) -> u8 {
    if r == 0.0 {
        0
    } else if r > r_th {
        1
    } else {
        UNCLEAR
    }
}

/// Overlap ratio and label of one tile against the positive boxes of its
/// image.
pub fn assign_label(
    boxes: &[&BBoxAnnotation],
    x: u32,
    y: u32,
    side: u32,
    r_th: f64,
    aggregate: OverlapAggregate,
) -> Result<(u8, f64)> {
    if !(r_th > 0.0 && r_th < 1.0) {
        return Err(Error::Config(format!("r_th {r_th} must lie in (0, 1)")));
    }
    let r = match aggregate {
        OverlapAggregate::Max => boxes
            .iter()
            .map(|b| overlap_ratio(b, x, y, side))
            .fold(0.0, f64::max),
        OverlapAggregate::Union => {
            union_coverage(boxes, x, y, side) as f64 / (u64::from(side) * u64::from(side)) as f64
        }
    };
    Ok((label_for_ratio(r, r_th), r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilingConfig {
    pub tile: u32,
    pub r_th: f64,
    #[serde(default)]
    pub aggregate: OverlapAggregate,
    /// Boxes of this class count as positives; other classes are ignored.
    /// Every box counts when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_class: Option<String>,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            tile: DEFAULT_TILE,
            r_th: DEFAULT_R_TH,
            aggregate: OverlapAggregate::Max,
            positive_class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub image_id: String,
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub label: u8,
    pub r: f64,
    pub pass_corner: Corner,
    /// Plants whose boxes touch the tile; not part of the manifest.
    pub plants: BTreeSet<String>,
}

impl TileRecord {
    pub fn trainable(&self) -> bool {
        self.label != UNCLEAR
    }
}

/// Tiles and labels of one image.
pub fn tile_image(
    image_id: &str,
    width: u32,
    height: u32,
    boxes: &[BBoxAnnotation],
    config: &TilingConfig,
) -> Result<Vec<TileRecord>> {
    let positives: Vec<BBoxAnnotation> = boxes
        .iter()
        .filter(|b| b.image_id == image_id)
        .filter(|b| config.positive_class.as_ref().is_none_or(|c| &b.class == c))
        .filter_map(|b| {
            let clamped = b.clamped(width, height);
            if clamped.is_none() {
                warn!("image `{image_id}`: box outside the {width}x{height} image ignored");
            }
            clamped
        })
        .collect();
    let refs: Vec<&BBoxAnnotation> = positives.iter().collect();
    enumerate_tiles(width, height, config.tile)?
        .into_iter()
        .map(|o| {
            let (label, r) = assign_label(&refs, o.x, o.y, config.tile, config.r_th, config.aggregate)?;
            let plants = positives
                .iter()
                .filter(|b| intersection(b, o.x, o.y, config.tile) > 0)
                .map(BBoxAnnotation::plant_key)
                .collect();
            Ok(TileRecord {
                image_id: image_id.to_string(),
                x: o.x,
                y: o.y,
                side: config.tile,
                label,
                r,
                pass_corner: o.corner,
                plants,
            })
        })
        .collect()
}

/// Per-label tile counts, `[background, positive, unclear]`.
pub fn label_counts<'a>(records: impl IntoIterator<Item = &'a TileRecord>) -> [usize; 3] {
    let mut counts = [0; 3];
    for r in records {
        counts[usize::from(r.label)] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub tile: TileRecord,
    pub split: Split,
    pub domain_id: String,
}

/// Tile manifest, ordered by `(image_id, x, y)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitManifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_HEADER: [&str; 9] = [
    "image_id", "x", "y", "side", "label", "r", "split", "domain_id", "pass_corner",
];

#[derive(Deserialize)]
struct ManifestRow {
    image_id: String,
    x: u32,
    y: u32,
    side: u32,
    label: u8,
    r: f64,
    split: String,
    domain_id: String,
    pass_corner: String,
}

impl SplitManifest {
    pub fn new(mut records: Vec<ManifestRecord>) -> Result<Self> {
        records.sort_by(|a, b| {
            (&a.tile.image_id, a.tile.x, a.tile.y).cmp(&(&b.tile.image_id, b.tile.x, b.tile.y))
        });
        for pair in records.windows(2) {
            let (a, b) = (&pair[0].tile, &pair[1].tile);
            if (&a.image_id, a.x, a.y) == (&b.image_id, b.x, b.y) {
                return Err(Error::Data(format!(
                    "tile ({}, {}) of image `{}` listed twice",
                    a.x, a.y, a.image_id
                )));
            }
        }
        Ok(Self { records })
    }

    /// Every tile of `records` under one split and domain.
    pub fn unsplit(records: Vec<TileRecord>, domain_id: &str) -> Result<Self> {
        Self::new(
            records
                .into_iter()
                .map(|tile| ManifestRecord {
                    tile,
                    split: Split::Unassigned,
                    domain_id: domain_id.to_string(),
                })
                .collect(),
        )
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(MANIFEST_HEADER)?;
        for rec in &self.records {
            let t = &rec.tile;
            w.write_record([
                t.image_id.clone(),
                t.x.to_string(),
                t.y.to_string(),
                t.side.to_string(),
                t.label.to_string(),
                format!("{:.6}", t.r),
                rec.split.to_string(),
                rec.domain_id.clone(),
                t.pass_corner.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<manifest>".into(),
            source: e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read_from<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::format(
                origin,
                format!("expected manifest header `{}`", MANIFEST_HEADER.join(",")),
            ));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.deserialize::<ManifestRow>().enumerate() {
            let row = row.map_err(|e| Error::format(origin, format!("record {}: {e}", line + 1)))?;
            if row.label > UNCLEAR {
                return Err(Error::format(origin, format!("record {}: label {}", line + 1, row.label)));
            }
            records.push(ManifestRecord {
                tile: TileRecord {
                    image_id: row.image_id,
                    x: row.x,
                    y: row.y,
                    side: row.side,
                    label: row.label,
                    r: row.r,
                    pass_corner: row.pass_corner.parse()?,
                    plants: BTreeSet::new(),
                },
                split: row.split.parse()?,
                domain_id: row.domain_id,
            });
        }
        Self::new(records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file), path)
    }

    pub fn domains(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.domain_id.as_str()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// All subsets form one source domain.
    #[default]
    Pooled,
    /// Each subset is its own source domain.
    PerSubset,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(SplitMode::Pooled),
            "per_subset" => Ok(SplitMode::PerSubset),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

pub const POOLED_DOMAIN: &str = "pooled";

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so the result does not depend on call order.
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Train/validation split of tiles from several subsets.
///
/// Tiles touching the same plant (directly or through a shared tile) form
/// one group; background tiles are grouped by image. Within each subset,
/// groups with and without positives are shuffled separately under `seed`
/// and moved to validation until each reaches `val_fraction` of its tiles,
/// never taking a subset's last group of a kind.
///
/// `records` pairs each tile with the subset it came from.
pub fn build_splits(
    records: Vec<(TileRecord, String)>,
    val_fraction: f64,
    mode: SplitMode,
    seed: u64,
) -> Result<SplitManifest> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} must lie in [0, 1)")));
    }
    if records.is_empty() {
        return Err(Error::Config("no tiles to split".into()));
    }
    let n = records.len();
    let mut uf = UnionFind::new(n);
    let mut key_owner: BTreeMap<String, usize> = BTreeMap::new();
    for (i, (tile, _)) in records.iter().enumerate() {
        let keys: Vec<String> = if tile.plants.is_empty() {
            vec![format!("image:{}", tile.image_id)]
        } else {
            tile.plants.iter().map(|p| format!("plant:{p}")).collect()
        };
        for k in keys {
            match key_owner.get(&k) {
                Some(&j) => uf.union(i, j),
                None => {
                    key_owner.insert(k, i);
                }
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = uf.find(i);
        groups.entry(root).or_default().push(i);
    }

    // (subset, has_positive) -> groups
    let mut strata: BTreeMap<(String, bool), Vec<Vec<usize>>> = BTreeMap::new();
    for members in groups.into_values() {
        let subsets: BTreeSet<&str> = members.iter().map(|&i| records[i].1.as_str()).collect();
        if subsets.len() > 1 {
            let plants: BTreeSet<&String> = members.iter().flat_map(|&i| &records[i].0.plants).collect();
            warn!("plant group {plants:?} spans subsets {subsets:?}; keeping it in one split");
        }
        let subset = subsets.first().expect("non-empty group").to_string();
        let positive = members.iter().any(|&i| records[i].0.label == 1);
        strata.entry((subset, positive)).or_default().push(members);
    }

    let mut split = vec![Split::Train; n];
    let mut rng = derived_rng(seed, 11);
    for ((subset, positive), mut groups) in strata {
        if val_fraction == 0.0 {
            continue;
        }
        groups.shuffle(&mut rng);
        let total: usize = groups.iter().map(Vec::len).sum();
        let wanted = val_fraction * total as f64;
        let mut taken = 0usize;
        let last = groups.len().saturating_sub(1);
        for group in groups.iter().take(last) {
            if taken as f64 >= wanted {
                break;
            }
            taken += group.len();
            for &i in group {
                split[i] = Split::Val;
            }
        }
        if taken == 0 {
            let kind = if positive { "positive" } else { "background" };
            warn!("subset `{subset}` has a single {kind} group; it stays in train");
        }
    }

    let manifest_records: Vec<ManifestRecord> = records
        .into_iter()
        .zip(split)
        .map(|((tile, subset), split)| ManifestRecord {
            tile,
            split,
            domain_id: match mode {
                SplitMode::Pooled => POOLED_DOMAIN.to_string(),
                SplitMode::PerSubset => subset,
            },
        })
        .collect();
    if val_fraction > 0.0 {
        for s in [Split::Train, Split::Val] {
            if !manifest_records.iter().any(|r| r.split == s) {
                return Err(Error::Config(format!("split `{s}` would be empty")));
            }
        }
    }
    SplitManifest::new(manifest_records)
}
