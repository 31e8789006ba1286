//! Dataset manifests, image I/O, synthetic data, batch sampling and
//! augmentation.

mod augment;
mod sampler;
mod synth;

pub use augment::{augment, flip_horizontal, random_erase_rect, Augmented, ERASE_AREA, ERASE_ASPECT};
pub use sampler::PkSampler;
pub use synth::{generate_synthetic, SynthSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{PahError, Result};
use crate::eval::ItemMeta;
use crate::heads::HeadBox;
use crate::model::ModelInput;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 9] = [
    "path",
    "identity",
    "clothes_id",
    "camera_id",
    "x0",
    "y0",
    "x1",
    "y1",
    "split",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub identity: usize,
    pub clothes_id: usize,
    pub camera_id: usize,
    pub head_box: Option<HeadBox>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(MANIFEST_HEADER).map_err(csv_io)?;
        for r in &self.records {
            let (x0, y0, x1, y1) = match r.head_box {
                Some(b) => (b.x0 as i64, b.y0 as i64, b.x1 as i64, b.y1 as i64),
                None => (-1, -1, -1, -1),
            };
            w.write_record([
                r.path.to_string_lossy().into_owned(),
                r.identity.to_string(),
                r.clothes_id.to_string(),
                r.camera_id.to_string(),
                x0.to_string(),
                y0.to_string(),
                x1.to_string(),
                y1.to_string(),
                r.split.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a manifest. Only the text is checked here; see
    /// [`load_dataset`] for file and box validation.
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(csv_io)?;
        let parse_err = |line: u64, msg: String| PahError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(parse_err(1, format!("expected header {}", MANIFEST_HEADER.join(","))));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = row.position().map_or(0, |p| p.line());
            let int = |i: usize| -> Result<i64> {
                row[i]
                    .parse::<i64>()
                    .map_err(|_| parse_err(line, format!("{} is not an integer: {:?}", MANIFEST_HEADER[i], &row[i])))
            };
            let non_neg = |i: usize| -> Result<usize> {
                let v = int(i)?;
                usize::try_from(v).map_err(|_| parse_err(line, format!("{} must be >= 0, got {v}", MANIFEST_HEADER[i])))
            };
            let coords = [int(4)?, int(5)?, int(6)?, int(7)?];
            let head_box = if coords == [-1; 4] {
                None
            } else if coords.iter().any(|&c| c < 0) {
                return Err(parse_err(line, format!("head box {coords:?} has negative coordinates")));
            } else {
                let b = HeadBox {
                    x0: coords[0] as usize,
                    y0: coords[1] as usize,
                    x1: coords[2] as usize,
                    y1: coords[3] as usize,
                };
                if b.x0 >= b.x1 || b.y0 >= b.y1 {
                    return Err(parse_err(line, format!("head box {coords:?} has zero area")));
                }
                Some(b)
            };
            if row[0].is_empty() {
                return Err(parse_err(line, "empty path".into()));
            }
            records.push(ManifestRecord {
                path: PathBuf::from(&row[0]),
                identity: non_neg(1)?,
                clothes_id: non_neg(2)?,
                camera_id: non_neg(3)?,
                head_box,
                split: row[8].parse().map_err(|m| parse_err(line, m))?,
            });
        }
        Ok(DatasetManifest { records })
    }
}

fn csv_io(e: csv::Error) -> PahError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PahError::Io(io),
        other => PahError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// A decoded image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub identity: usize,
    /// Contiguous training label, `None` for identities absent from training.
    pub label: Option<usize>,
    pub clothes_id: usize,
    pub camera_id: usize,
    pub head_box: Option<HeadBox>,
    pub sample_id: usize,
}

impl ImageSample {
    pub fn meta(&self) -> ItemMeta {
        ItemMeta {
            identity: self.identity,
            clothes_id: self.clothes_id,
            camera_id: self.camera_id,
            sample_id: self.sample_id,
        }
    }

    pub fn model_input(&self) -> Result<ModelInput> {
        ModelInput::new(self.pixels.clone(), self.head_box)
    }
}

/// A validated manifest whose images are decoded on access.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// Training identity to contiguous label, in ascending identity order.
    pub labels: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.manifest.records[i].split == split)
            .collect()
    }

    /// Decodes record `i`; its row index is the sample id.
    pub fn sample(&self, i: usize) -> Result<ImageSample> {
        let r = &self.manifest.records[i];
        Ok(ImageSample {
            pixels: read_png(&self.root.join(&r.path))?,
            identity: r.identity,
            label: self.labels.get(&r.identity).copied(),
            clothes_id: r.clothes_id,
            camera_id: r.camera_id,
            head_box: r.head_box,
            sample_id: i,
        })
    }

    pub fn samples(&self, split: Split) -> Result<Vec<ImageSample>> {
        self.indices(split).into_iter().map(|i| self.sample(i)).collect()
    }
}

/// Reads and validates `root/manifest.csv`: files must exist, head boxes
/// must fit their images, and unless `allow_shared_identities` is set no
/// identity may appear in both training and query/gallery rows.
pub fn load_dataset(root: &Path, allow_shared_identities: bool) -> Result<Dataset> {
    let mpath = root.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(PahError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("manifest not found: {}", mpath.display()),
        )));
    }
    let manifest = DatasetManifest::read(&mpath)?;
    if manifest.records.is_empty() {
        return Err(PahError::EmptyDataset);
    }
    for (i, r) in manifest.records.iter().enumerate() {
        let line = i as u64 + 2;
        let err = |msg: String| PahError::Parse {
            path: mpath.clone(),
            line,
            msg,
        };
        let file = root.join(&r.path);
        let (w, h) = image::image_dimensions(&file)
            .map_err(|e| err(format!("cannot read image {}: {e}", r.path.display())))?;
        if let Some(b) = r.head_box {
            b.validate(w as usize, h as usize).map_err(|e| err(e.to_string()))?;
        }
    }
    let train: BTreeSet<usize> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.identity)
        .collect();
    if !allow_shared_identities {
        if let Some((i, r)) = manifest
            .records
            .iter()
            .enumerate()
            .find(|(_, r)| r.split != Split::Train && train.contains(&r.identity))
        {
            return Err(PahError::Parse {
                path: mpath,
                line: i as u64 + 2,
                msg: format!(
                    "identity {} appears in both train and {} splits",
                    r.identity, r.split
                ),
            });
        }
    }
    let labels = train.into_iter().enumerate().map(|(l, id)| (id, l)).collect();
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        labels,
    })
}

/// Decodes an 8-bit RGB PNG into `[H, W, 3]` values `k / 255`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| PahError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Writes `[H, W, 3]` values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let (h, w) = match *pixels.shape() {
        [h, w, 3] => (h, w),
        ref s => return Err(PahError::Dimension(format!("expected [H, W, 3] image, got {s:?}"))),
    };
    let bytes: Vec<u8> = pixels.data().iter().map(|&v| to_byte(v)).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|source| {
        PahError::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps a value to the nearest `k / 255` so PNG storage is lossless.
pub fn quantize(v: f64) -> f64 {
    to_byte(v) as f64 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, body: &str) {
        std::fs::write(dir.join(MANIFEST_FILE), format!("{}\n{body}", MANIFEST_HEADER.join(","))).unwrap();
    }

    fn write_image(dir: &Path, name: &str) {
        write_png(&dir.join(name), &Tensor::full(&[8, 4, 3], 0.5)).unwrap();
    }

    #[test]
    fn empty_manifest() {
        let d = tempfile::tempdir().unwrap();
        write_manifest(d.path(), "");
        assert!(matches!(load_dataset(d.path(), false), Err(PahError::EmptyDataset)));
    }

    #[test]
    fn box_outside_image_names_the_row() {
        let d = tempfile::tempdir().unwrap();
        write_image(d.path(), "a.png");
        write_manifest(d.path(), "a.png,0,0,0,0,0,4,2,train\na.png,1,0,0,0,0,5,2,train\n");
        let e = load_dataset(d.path(), false).unwrap_err();
        match e {
            PahError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn malformed_rows() {
        let d = tempfile::tempdir().unwrap();
        write_image(d.path(), "a.png");
        for (row, needle) in [
            ("a.png,x,0,0,-1,-1,-1,-1,train", "identity"),
            ("a.png,0,0,0,-1,-1,-1,-1,val", "split"),
            ("a.png,0,0,0,-1,-1,-1,train", "fields"),
            ("b.png,0,0,0,-1,-1,-1,-1,train", "b.png"),
        ] {
            write_manifest(d.path(), row);
            let msg = load_dataset(d.path(), false).unwrap_err().to_string();
            assert!(msg.contains(":2:"), "{msg}");
            assert!(msg.contains(needle), "{msg}");
        }
    }

    #[test]
    fn shared_identities_need_opt_in() {
        let d = tempfile::tempdir().unwrap();
        write_image(d.path(), "a.png");
        write_manifest(
            d.path(),
            "a.png,5,0,0,-1,-1,-1,-1,train\na.png,9,0,0,-1,-1,-1,-1,train\na.png,5,1,0,-1,-1,-1,-1,query\n",
        );
        assert!(load_dataset(d.path(), false).is_err());
        let ds = load_dataset(d.path(), true).unwrap();
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.sample(2).unwrap().label, Some(0));
        assert_eq!(ds.sample(1).unwrap().label, Some(1));
        assert_eq!(ds.sample(0).unwrap().head_box, None);
    }

    #[test]
    fn png_round_trip_is_exact() {
        let d = tempfile::tempdir().unwrap();
        let t = Tensor::new(&[2, 3, 3], (0..18).map(|i| quantize(i as f64 / 17.0)).collect()).unwrap();
        let p = d.path().join("x.png");
        write_png(&p, &t).unwrap();
        assert_eq!(read_png(&p).unwrap(), t);
    }
}
