//! Dataset directories: a tile manifest plus a feature table keyed by
//! `(image_id, x, y)`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{DomainDataset, Split};
use crate::error::{Error, Result};
use crate::tiling::{Corner, ManifestRecord, SplitManifest, TileRecord, UNCLEAR};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FEATURES_FILE: &str = "features.csv";

pub type TileKey = (String, u32, u32);

/// Feature vectors of equal width, one per tile.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub rows: BTreeMap<TileKey, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: TileKey, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Dimension {
                op: "feature table",
                lhs: vec![values.len()],
                rhs: vec![self.dim],
            });
        }
        if self.rows.insert(key.clone(), values).is_some() {
            return Err(Error::Data(format!("duplicate features for tile {key:?}")));
        }
        Ok(())
    }

    /// Header `image_id,x,y,f0,…`; values use the shortest representation
    /// that parses back to the same `f64`.
    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["image_id".to_string(), "x".into(), "y".into()];
        header.extend((0..self.dim).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for ((image, x, y), values) in &self.rows {
            let mut rec = vec![image.clone(), x.to_string(), y.to_string()];
            rec.extend(values.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<features>".into(),
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
        if header.len() < 4 || header.iter().take(3).collect::<Vec<_>>() != ["image_id", "x", "y"] {
            return Err(Error::format(origin, "expected header `image_id,x,y,f0,...`"));
        }
        let mut table = FeatureTable::new(header.len() - 3);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::format(origin, format!("record {}: bad {what}", line + 1));
            let x = rec[1].parse().map_err(|_| bad("x"))?;
            let y = rec[2].parse().map_err(|_| bad("y"))?;
            let values = rec
                .iter()
                .skip(3)
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad("feature value")))
                .collect::<Result<Vec<_>>>()?;
            table.insert((rec[0].to_string(), x, y), values)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file), path)
    }
}

/// Trainable tiles of a manifest grouped by `(domain_id, split)`, in
/// manifest order. Unclear tiles are dropped.
pub fn group_datasets(
    manifest: &SplitManifest,
    features: &FeatureTable,
) -> Result<BTreeMap<(String, Split), DomainDataset>> {
    let mut parts: BTreeMap<(String, Split), (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for rec in &manifest.records {
        let t = &rec.tile;
        if t.label == UNCLEAR {
            continue;
        }
        let key = (t.image_id.clone(), t.x, t.y);
        let values = features
            .rows
            .get(&key)
            .ok_or_else(|| Error::Data(format!("no features for tile {key:?}")))?;
        let entry = parts.entry((rec.domain_id.clone(), rec.split)).or_default();
        entry.0.extend_from_slice(values);
        entry.1.push(t.label);
    }
    parts
        .into_iter()
        .map(|((domain, split), (f, l))| {
            let ds = DomainDataset::new(domain.clone(), features.dim, f, l)?;
            Ok(((domain, split), ds))
        })
        .collect()
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub manifest: SplitManifest,
    pub features: FeatureTable,
}

impl DatasetDir {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            manifest: SplitManifest::load(&dir.join(MANIFEST_FILE))?,
            features: FeatureTable::load(&dir.join(FEATURES_FILE))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest.save(&dir.join(MANIFEST_FILE))?;
        self.features.save(&dir.join(FEATURES_FILE))
    }

    pub fn datasets(&self) -> Result<BTreeMap<(String, Split), DomainDataset>> {
        group_datasets(&self.manifest, &self.features)
    }

    /// Every trainable tile per domain, ignoring the split column.
    pub fn by_domain(&self) -> Result<Vec<DomainDataset>> {
        let grouped = self.datasets()?;
        let domains: BTreeSet<&String> = grouped.keys().map(|(d, _)| d).collect();
        domains
            .into_iter()
            .map(|d| {
                let parts: Vec<DomainDataset> = grouped
                    .iter()
                    .filter(|((g, _), _)| g == d)
                    .map(|(_, ds)| ds.clone())
                    .collect();
                DomainDataset::pooled(&parts, d.clone())
            })
            .collect()
    }

    /// Datasets of one split, one per domain.
    pub fn split(&self, split: Split) -> Result<Vec<DomainDataset>> {
        Ok(self
            .datasets()?
            .into_iter()
            .filter(|((_, s), _)| *s == split)
            .map(|(_, ds)| ds)
            .collect())
    }

    /// Writes feature datasets as one directory. Rows become unit tiles
    /// named `{domain}-{split}-{row}`.
    pub fn from_datasets(parts: &[(&DomainDataset, Split)]) -> Result<Self> {
        let dim = parts
            .first()
            .map(|(d, _)| d.dim)
            .ok_or_else(|| Error::Data("no datasets to write".into()))?;
        let mut features = FeatureTable::new(dim);
        let mut records = Vec::new();
        for (ds, split) in parts {
            for i in 0..ds.len() {
                let image_id = format!("{}-{split}-{i:05}", ds.domain_id);
                features.insert((image_id.clone(), 0, 0), ds.row(i).to_vec())?;
                records.push(ManifestRecord {
                    tile: TileRecord {
                        image_id,
                        x: 0,
                        y: 0,
                        side: 1,
                        label: ds.labels[i],
                        r: f64::from(ds.labels[i]),
                        pass_corner: Corner::TL,
                        plants: BTreeSet::new(),
                    },
                    split: *split,
                    domain_id: ds.domain_id.clone(),
                });
            }
        }
        Ok(Self {
            manifest: SplitManifest::new(records)?,
            features,
        })
    }
}
