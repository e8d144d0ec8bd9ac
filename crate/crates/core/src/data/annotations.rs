//! Line-delimited JSON keypoint annotations and dataset splitting.
//!
//! Each line is `{"image": path, "w": int, "h": int, "kps": [[x, y, v], ...]}`
//! with parts in the fixed order of [`PART_NAMES`]. `kps` may also be an
//! object keyed by part name. An optional `"split"` field records the split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pnm::{load_image, save_image};
use super::synth::{synthetic_samples, Sample};
use crate::error::{Error, Result};
use crate::heatmap::{Keypoint, KeypointSet, PART_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split `{s}` (train, val, test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    /// Image path as written in the annotation file.
    pub image: PathBuf,
    pub keypoints: KeypointSet,
    pub split: Split,
}

/// Annotated images. Relative image paths resolve against `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawKeypoints {
    List(Vec<[f64; 3]>),
    Named(BTreeMap<String, [f64; 3]>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image: PathBuf,
    w: usize,
    h: usize,
    kps: RawKeypoints,
    #[serde(default)]
    split: Option<Split>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    image: &'a Path,
    w: usize,
    h: usize,
    kps: Vec<[f64; 3]>,
    split: Split,
}

fn to_keypoint(line: usize, [x, y, v]: [f64; 3]) -> Result<Keypoint> {
    if !(x.is_finite() && y.is_finite()) || !(v == 0.0 || v == 1.0 || v == 2.0) {
        return Err(Error::MalformedRecord {
            line,
            msg: format!("bad keypoint [{x}, {y}, {v}] (v must be 0, 1 or 2)"),
        });
    }
    Ok(Keypoint::new(x, y, v > 0.0))
}

fn parse_record(line: usize, text: &str) -> Result<Entry> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
        line,
        msg: e.to_string(),
    })?;
    if raw.w == 0 || raw.h == 0 {
        return Err(Error::MalformedRecord {
            line,
            msg: format!("empty image size {}x{}", raw.w, raw.h),
        });
    }
    let triples: Vec<[f64; 3]> = match raw.kps {
        RawKeypoints::List(list) => {
            if list.len() != PART_NAMES.len() {
                return Err(Error::MalformedRecord {
                    line,
                    msg: format!(
                        "expected {} keypoints, got {}",
                        PART_NAMES.len(),
                        list.len()
                    ),
                });
            }
            list
        }
        RawKeypoints::Named(mut map) => {
            if let Some(name) = map.keys().find(|k| !PART_NAMES.contains(&k.as_str())) {
                return Err(Error::UnknownPart {
                    line,
                    name: name.clone(),
                });
            }
            PART_NAMES
                .iter()
                .map(|&name| {
                    map.remove(name).ok_or_else(|| Error::MalformedRecord {
                        line,
                        msg: format!("missing part `{name}`"),
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let parts = triples
        .into_iter()
        .map(|t| to_keypoint(line, t))
        .collect::<Result<Vec<_>>>()?;
    let keypoints = KeypointSet::new(parts, raw.w, raw.h);
    if let Some(i) = keypoints.first_out_of_bounds() {
        let p = keypoints.parts[i];
        return Err(Error::KeypointOutOfBounds {
            line,
            part: PART_NAMES[i],
            x: p.x,
            y: p.y,
            w: raw.w,
            h: raw.h,
        });
    }
    Ok(Entry {
        image: raw.image,
        keypoints,
        split: raw.split.unwrap_or(Split::Train),
    })
}

/// Parses annotation text; blank lines are skipped, line numbers are 1-based.
pub fn parse_annotations(text: &str, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let entries = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(i + 1, l))
        .collect::<Result<_>>()?;
    Ok(DatasetManifest {
        root: root.into(),
        entries,
        seed: 0,
    })
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path.parent().unwrap_or(Path::new("")))
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let record = OutRecord {
                image: &e.image,
                w: e.keypoints.image_w,
                h: e.keypoints.image_h,
                kps: e
                    .keypoints
                    .parts
                    .iter()
                    .map(|p| [p.x, p.y, f64::from(u8::from(p.visible))])
                    .collect(),
                split: e.split,
            };
            out.push_str(&serde_json::to_string(&record).expect("annotation records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn image_path(&self, entry: &Entry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// Loads the images of one split, checking their size against the
    /// annotations.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| self.load_entry(e))
            .collect()
    }

    /// Loads every image in file order.
    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.entries.iter().map(|e| self.load_entry(e)).collect()
    }

    fn load_entry(&self, e: &Entry) -> Result<Sample> {
        let path = self.image_path(e);
        let image = load_image(&path)?;
        let s = image.shape();
        if (s.w, s.h) != (e.keypoints.image_w, e.keypoints.image_h) {
            return Err(Error::InvalidArgument(format!(
                "{}: image is {}x{} but annotated as {}x{}",
                path.display(),
                s.w,
                s.h,
                e.keypoints.image_w,
                e.keypoints.image_h
            )));
        }
        Ok(Sample {
            image,
            keypoints: e.keypoints.clone(),
            id: e.image.to_string_lossy().into_owned(),
        })
    }
}

/// Seeded shuffle of `0..m`, then contiguous train/val/test cuts of
/// `round(f * m)` items (test takes the remainder).
pub fn split_assignments(m: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * m as f64).round() as usize).min(m);
    let n_val = ((fractions[1] * m as f64).round() as usize).min(m - n_train);
    let mut out = vec![Split::Test; m];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            out[i] = Split::Train;
        } else if rank < n_train + n_val {
            out[i] = Split::Val;
        }
    }
    Ok(out)
}

pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    let splits = split_assignments(manifest.entries.len(), fractions, seed)?;
    let mut out = manifest.clone();
    out.seed = seed;
    for (e, s) in out.entries.iter_mut().zip(splits) {
        e.split = s;
    }
    Ok(out)
}

/// Writes `n` synthetic PGM images and `annotations.jsonl` into `dir`.
pub fn write_synthetic_dataset(
    dir: impl AsRef<Path>,
    n: usize,
    w: usize,
    h: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = synthetic_samples(n, w, h, seed)?;
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let name = PathBuf::from(format!("img_{i:05}.pgm"));
        save_image(dir.join(&name), &s.image)?;
        entries.push(Entry {
            image: name,
            keypoints: s.keypoints.clone(),
            split: Split::Train,
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        seed,
    };
    manifest.save(dir.join("annotations.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LINE: &str = r#"{"image": "a.pgm", "w": 64, "h": 48, "kps": [[10, 5, 1], [20.5, 6, 1], [30, 7, 2], [0, 0, 0]]}"#;

    #[test]
    fn one_line_one_entry() {
        let m = parse_annotations(LINE, "root").unwrap();
        assert_eq!(m.entries.len(), 1);
        let e = &m.entries[0];
        assert_eq!((e.keypoints.image_w, e.keypoints.image_h), (64, 48));
        assert_eq!(e.keypoints.visibility(), vec![true, true, true, false]);
        assert_eq!(m.image_path(e), Path::new("root/a.pgm"));
    }

    #[test]
    fn named_parts() {
        let line = r#"{"image": "a.pgm", "w": 8, "h": 8, "kps": {"snout": [1,1,1], "left_ear": [2,2,1], "right_ear": [3,3,1], "tail_base": [4,4,0]}}"#;
        let m = parse_annotations(line, "").unwrap();
        assert_eq!(
            m.entries[0].keypoints.parts[2],
            Keypoint::new(3.0, 3.0, true)
        );
        let bad = line.replace("right_ear", "whisker");
        assert!(
            matches!(parse_annotations(&bad, ""), Err(Error::UnknownPart { line: 1, ref name }) if name == "whisker")
        );
    }

    #[test]
    fn bounds_error_names_part() {
        let line = r#"{"image": "a.pgm", "w": 64, "h": 48, "kps": [[1, 1, 1], [64, 6, 1], [3, 7, 1], [0, 0, 0]]}"#;
        match parse_annotations(&format!("\n{line}"), "") {
            Err(Error::KeypointOutOfBounds { line: 2, part, .. }) => assert_eq!(part, "left_ear"),
            other => panic!("{other:?}"),
        }
        let hidden = line.replace("[64, 6, 1]", "[64, 6, 0]");
        assert!(parse_annotations(&hidden, "").is_ok());
    }

    #[test]
    fn malformed_lines_report_numbers() {
        let text = format!("{LINE}\n{{\"image\": 1}}");
        assert!(matches!(
            parse_annotations(&text, ""),
            Err(Error::MalformedRecord { line: 2, .. })
        ));
        let three = LINE.replace(", [0, 0, 0]", "");
        assert!(matches!(
            parse_annotations(&three, ""),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        let extra = LINE.replace("\"w\"", "\"zoom\": 2, \"w\"");
        assert!(parse_annotations(&extra, "").is_err());
        let bad_v = LINE.replace("[0, 0, 0]", "[0, 0, 0.5]");
        assert!(parse_annotations(&bad_v, "").is_err());
    }

    #[test]
    fn generator_files_reload() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_synthetic_dataset(dir.path(), 5, 40, 36, 9).unwrap();
        let loaded = load_annotations(dir.path().join("annotations.jsonl")).unwrap();
        assert_eq!(loaded.entries, written.entries);
        let samples = loaded.load_split(Split::Train).unwrap();
        let fresh = synthetic_samples(5, 40, 36, 9).unwrap();
        for (a, b) in samples.iter().zip(&fresh) {
            assert_eq!(a.keypoints, b.keypoints);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }

    fn manifest(m: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::new(),
            entries: (0..m)
                .map(|i| Entry {
                    image: PathBuf::from(format!("{i}.pgm")),
                    keypoints: KeypointSet::new(vec![Keypoint::new(0.0, 0.0, true); 4], 8, 8),
                    split: Split::Train,
                })
                .collect(),
            seed: 0,
        }
    }

    #[test]
    fn split_examples() {
        let m = manifest(10);
        let all = split_dataset(&m, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(all.count(Split::Train), 10);
        assert_eq!(
            split_dataset(&m, [0.5, 0.2, 0.3], 4).unwrap(),
            split_dataset(&m, [0.5, 0.2, 0.3], 4).unwrap()
        );
        assert!(split_dataset(&m, [0.5, 0.2, 0.2], 4).is_err());
        assert!(split_dataset(&m, [1.2, -0.2, 0.0], 4).is_err());
        let text = split_dataset(&m, [0.5, 0.2, 0.3], 4).unwrap().to_jsonl();
        assert_eq!(parse_annotations(&text, "").unwrap().count(Split::Val), 2);
    }

    proptest! {
        #[test]
        fn split_counts(m in 0usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
            let f_train = a;
            let f_val = (1.0 - a) * b;
            let f_test = 1.0 - f_train - f_val;
            let s = split_dataset(&manifest(m), [f_train, f_val, f_test], seed).unwrap();
            let n_train = (f_train * m as f64).round() as usize;
            prop_assert_eq!(s.count(Split::Train), n_train);
            prop_assert_eq!(s.count(Split::Train) + s.count(Split::Val) + s.count(Split::Test), m);
        }
    }
}
