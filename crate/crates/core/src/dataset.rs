//! N-BaIoT style flow-statistics ingestion.
//!
//! A JSON manifest maps CSV files to traffic classes. Rows are parsed,
//! deduplicated on (features, label), and stored in a [`DataMatrix`] which
//! can be cached in the `NBIO1` binary format.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Flow statistics per N-BaIoT instance.
pub const FEATURE_COUNT: usize = 115;

pub const NUM_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Normal",
    "mirai_udp",
    "mirai_syn",
    "mirai_ack",
    "mirai_scan",
    "mirai_udplain",
    "gafgyt_udp",
    "gafgyt_combo",
    "gafgyt_junk",
    "gafgyt_scan",
];

/// Per-class instance counts of the deduplicated public corpus, in
/// [`CLASS_NAMES`] order.
pub const REFERENCE_CLASS_COUNTS: [usize; NUM_CLASSES] = [
    513_497, 555_973, 317_115, 280_144, 256_151, 230_508, 107_665, 62_213, 31_293, 31_087,
];

/// Total row count reported for the deduplicated corpus.
pub const REFERENCE_TOTAL_ROWS: usize = 2_482_470;

pub const CACHE_MAGIC: &[u8; 5] = b"NBIO1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    ManifestJson {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest entry {index}: unknown label `{label}`")]
    UnknownLabel { index: usize, label: String },
    #[error("manifest entry {index}: cannot read `{path}`")]
    MissingFile { index: usize, path: PathBuf },
    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    WrongColumnCount {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: column {column} is not numeric: `{value}`")]
    NonNumeric {
        path: PathBuf,
        line: u64,
        column: usize,
        value: String,
    },
    #[error("{path}:{line}: column {column} is not finite")]
    NonFinite {
        path: PathBuf,
        line: u64,
        column: usize,
    },
    #[error("{path}: csv: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("too few rows to split: {0} (need at least 10)")]
    TooFewRows(usize),
    #[error("dataset cache: {0}")]
    BadCache(String),
    #[error("invalid subsample cap {0}")]
    BadCap(usize),
}

/// One of the ten traffic classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClassId(u8);

impl ClassId {
    pub const NORMAL: ClassId = ClassId(0);

    pub fn new(id: u8) -> Option<Self> {
        ((id as usize) < NUM_CLASSES).then_some(Self(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }

    /// 0 for benign traffic, 1 for any attack class.
    pub fn binary(self) -> u8 {
        u8::from(self != Self::NORMAL)
    }

    pub fn all() -> impl Iterator<Item = ClassId> {
        (0..NUM_CLASSES as u8).map(ClassId)
    }
}

impl FromStr for ClassId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CLASS_NAMES
            .iter()
            .position(|&n| n == s)
            .map(|i| ClassId(i as u8))
            .ok_or_else(|| s.to_string())
    }
}

impl TryFrom<String> for ClassId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse().map_err(|bad| format!("unknown class `{bad}`"))
    }
}

impl From<ClassId> for String {
    fn from(c: ClassId) -> String {
        c.name().to_string()
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct RawEntry {
    path: PathBuf,
    label: String,
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn load_manifest(manifest_path: &Path) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let raw: Vec<RawEntry> =
        serde_json::from_str(&text).map_err(|source| DataError::ManifestJson {
            path: manifest_path.to_path_buf(),
            source,
        })?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::with_capacity(raw.len());
    for (index, e) in raw.into_iter().enumerate() {
        let label = e
            .label
            .parse()
            .map_err(|label| DataError::UnknownLabel { index, label })?;
        let path = if e.path.is_absolute() {
            e.path
        } else {
            base.join(e.path)
        };
        if !path.is_file() {
            return Err(DataError::MissingFile { index, path });
        }
        entries.push(ManifestEntry { path, label });
    }
    Ok(Manifest { entries })
}

/// Feature rows plus labels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    pub n_features: usize,
    pub features: Vec<f32>,
    pub labels: Vec<ClassId>,
}

impl DataMatrix {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn push(&mut self, row: &[f32], label: ClassId) {
        debug_assert_eq!(row.len(), self.n_features);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    /// Rows in the given order.
    pub fn select(&self, idx: &[usize]) -> DataMatrix {
        let mut out = DataMatrix::new(self.n_features);
        out.features.reserve(idx.len() * self.n_features);
        for &i in idx {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    /// Removes exact duplicates of (features, label), keeping first occurrences.
    pub fn dedup(&self) -> DataMatrix {
        let mut seen: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut out = DataMatrix::new(self.n_features);
        for i in 0..self.len() {
            let key = row_hash(self.row(i), self.labels[i]);
            let bucket = seen.entry(key).or_default();
            let dup = bucket
                .iter()
                .any(|&j| out.labels[j] == self.labels[i] && same_bits(out.row(j), self.row(i)));
            if !dup {
                bucket.push(out.len());
                out.push(self.row(i), self.labels[i]);
            }
        }
        out
    }

    pub fn write_cache(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&self.cache_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.features.len() * 4 + self.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_features as u32).to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|l| l.id()));
        out
    }

    pub fn read_cache(path: &Path) -> Result<DataMatrix, DataError> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_cache_bytes(&bytes)
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<DataMatrix, DataError> {
        if bytes.len() < 17 || &bytes[..5] != CACHE_MAGIC {
            return Err(DataError::BadCache("missing NBIO1 header".into()));
        }
        let n = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let d = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
        let feat_bytes = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| DataError::BadCache("size overflow".into()))?;
        if bytes.len() != 17 + feat_bytes + n {
            return Err(DataError::BadCache(format!(
                "expected {} bytes for {n} rows x {d} features, found {}",
                17 + feat_bytes + n,
                bytes.len()
            )));
        }
        let features: Vec<f32> = bytes[17..17 + feat_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = bytes[17 + feat_bytes..]
            .iter()
            .map(|&b| ClassId::new(b).ok_or_else(|| DataError::BadCache(format!("label {b}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DataMatrix {
            n_features: d,
            features,
            labels,
        })
    }
}

fn row_hash(row: &[f32], label: ClassId) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    label.hash(&mut h);
    for v in row {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Parses one CSV of flow statistics. A first row containing any
/// non-numeric token is treated as a header and skipped.
pub fn read_flow_csv(path: &Path, n_features: usize) -> Result<Vec<f32>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(source) => {
                return Err(DataError::Csv {
                    path: path.to_path_buf(),
                    source,
                })
            }
        }
        let line = record.position().map_or(0, |p| p.line());
        if first {
            first = false;
            if record.iter().any(|f| f.parse::<f64>().is_err()) {
                continue;
            }
        }
        if record.len() != n_features {
            return Err(DataError::WrongColumnCount {
                path: path.to_path_buf(),
                line,
                expected: n_features,
                found: record.len(),
            });
        }
        for (column, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| DataError::NonNumeric {
                path: path.to_path_buf(),
                line,
                column,
                value: field.to_string(),
            })?;
            let v = v as f32;
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    path: path.to_path_buf(),
                    line,
                    column,
                });
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Loads every manifest entry and deduplicates the concatenation.
///
/// Files are parsed in parallel; concatenation and dedup follow manifest order.
pub fn ingest(manifest: &Manifest) -> Result<DataMatrix, DataError> {
    let parsed: Vec<Vec<f32>> = manifest
        .entries
        .par_iter()
        .map(|e| read_flow_csv(&e.path, FEATURE_COUNT))
        .collect::<Result<_, _>>()?;
    let mut all = DataMatrix::new(FEATURE_COUNT);
    for (entry, rows) in manifest.entries.iter().zip(&parsed) {
        for row in rows.chunks_exact(FEATURE_COUNT) {
            all.push(row, entry.label);
        }
    }
    Ok(all.dedup())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

/// Seeded uniform permutation; the first `floor(0.8 n)` indices train.
pub fn split(n: usize, seed: u64) -> Result<DatasetSplit, DataError> {
    if n < 10 {
        return Err(DataError::TooFewRows(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let test_idx = idx.split_off(n_train);
    Ok(DatasetSplit {
        train_idx: idx,
        test_idx,
        seed,
    })
}

/// Per-column z-score statistics (population std, floored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    /// Fits on the listed rows only.
    pub fn fit(data: &DataMatrix, rows: &[usize]) -> Standardizer {
        let d = data.n_features;
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0f64; d];
        for &r in rows {
            for (m, &v) in mean.iter_mut().zip(data.row(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; d];
        for &r in rows {
            for ((s, &v), m) in var.iter_mut().zip(data.row(r)).zip(&mean) {
                let diff = v as f64 - m;
                *s += diff * diff;
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(STD_FLOOR))
            .collect();
        Standardizer { mean, std }
    }

    pub fn transform_row(&self, row: &[f32], out: &mut [f32]) {
        for (((o, &x), m), s) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.std) {
            *o = ((x as f64 - m) / s) as f32;
        }
    }

    /// Standardized copy of every row of `data`.
    pub fn transform(&self, data: &DataMatrix) -> Vec<f32> {
        let d = data.n_features;
        let mut out = vec![0.0f32; data.features.len()];
        for i in 0..data.len() {
            self.transform_row(data.row(i), &mut out[i * d..(i + 1) * d]);
        }
        out
    }
}

/// Seeded stratified subsample keeping at most `cap` rows per distinct key.
///
/// Returned indices are sorted ascending; every key with at least one row
/// keeps at least one.
pub fn stratified_subsample<K: Copy + Ord>(
    keys: &[K],
    cap: usize,
    seed: u64,
) -> Result<Vec<usize>, DataError> {
    if cap == 0 {
        return Err(DataError::BadCap(cap));
    }
    let mut groups: std::collections::BTreeMap<K, Vec<usize>> = Default::default();
    for (i, &k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut members) in groups {
        if members.len() > cap {
            members.shuffle(&mut rng);
            members.truncate(cap);
        }
        out.extend(members);
    }
    out.sort_unstable();
    Ok(out)
}

/// Text table of per-class counts alongside the reference corpus counts.
pub fn class_count_report(counts: &[usize; NUM_CLASSES]) -> String {
    let total: usize = counts.iter().sum();
    let mut s = format!(
        "{:<14} {:>10} {:>8} {:>10}\n",
        "class", "rows", "share", "reference"
    );
    for c in ClassId::all() {
        let n = counts[c.index()];
        let share = if total > 0 {
            100.0 * n as f64 / total as f64
        } else {
            0.0
        };
        s.push_str(&format!(
            "{:<14} {:>10} {:>7.2}% {:>10}\n",
            c.name(),
            n,
            share,
            REFERENCE_CLASS_COUNTS[c.index()]
        ));
    }
    s.push_str(&format!("{:<14} {:>10}\n", "total", total));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_csv(dir: &Path, name: &str, rows: &[Vec<f32>], header: bool) -> PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        if header {
            let cols: Vec<String> = (0..FEATURE_COUNT).map(|i| format!("f{i}")).collect();
            writeln!(f, "{}", cols.join(",")).unwrap();
        }
        for r in rows {
            let cols: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", cols.join(",")).unwrap();
        }
        path
    }

    fn row(seed: f32) -> Vec<f32> {
        (0..FEATURE_COUNT).map(|i| seed + i as f32 * 0.5).collect()
    }

    #[test]
    fn class_table_is_fixed() {
        assert_eq!(ClassId::NORMAL.name(), "Normal");
        for (i, name) in CLASS_NAMES.iter().enumerate() {
            let c: ClassId = name.parse().unwrap();
            assert_eq!(c.index(), i);
            assert_eq!(c.binary(), u8::from(i != 0));
        }
        assert!("mirai_http".parse::<ClassId>().is_err());
        assert!(ClassId::new(10).is_none());
    }

    #[test]
    fn manifest_single_entry_and_unknown_label() {
        let dir = tempfile::tempdir().unwrap();
        write_csv(dir.path(), "a.csv", &[row(0.0)], false);
        let m = dir.path().join("m.json");
        fs::write(&m, r#"[{"path":"a.csv","label":"Normal"}]"#).unwrap();
        let manifest = load_manifest(&m).unwrap();
        assert_eq!(manifest.entries.len(), 1);
        assert_eq!(manifest.entries[0].label.id(), 0);

        fs::write(&m, r#"[{"path":"a.csv","label":"mirai_http"}]"#).unwrap();
        let err = load_manifest(&m).unwrap_err();
        assert!(
            matches!(err, DataError::UnknownLabel { index: 0, ref label } if label == "mirai_http")
        );

        fs::write(&m, r#"[{"path":"nope.csv","label":"Normal"}]"#).unwrap();
        assert!(matches!(
            load_manifest(&m),
            Err(DataError::MissingFile { index: 0, .. })
        ));

        fs::write(&m, r#"[{"path":"a.csv""#).unwrap();
        assert!(matches!(
            load_manifest(&m),
            Err(DataError::ManifestJson { .. })
        ));
    }

    #[test]
    fn manifest_of_all_ten_classes() {
        let dir = tempfile::tempdir().unwrap();
        write_csv(dir.path(), "a.csv", &[row(0.0)], false);
        let entries: Vec<String> = CLASS_NAMES
            .iter()
            .map(|n| format!(r#"{{"path":"a.csv","label":"{n}"}}"#))
            .collect();
        let m = dir.path().join("m.json");
        fs::write(&m, format!("[{}]", entries.join(","))).unwrap();
        let manifest = load_manifest(&m).unwrap();
        let ids: Vec<u8> = manifest.entries.iter().map(|e| e.label.id()).collect();
        assert_eq!(ids, (0..10).collect::<Vec<u8>>());
    }

    #[test]
    fn ingest_dedups_and_keeps_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_csv(dir.path(), "a.csv", &[row(1.0), row(1.0)], true);
        let mut entries = vec![ManifestEntry {
            path: a,
            label: ClassId::NORMAL,
        }];
        let data = ingest(&Manifest {
            entries: entries.clone(),
        })
        .unwrap();
        assert_eq!(data.len(), 1);

        entries.clear();
        for (f, label) in
            ["x.csv", "y.csv", "z.csv"]
                .iter()
                .zip(["mirai_syn", "Normal", "gafgyt_scan"])
        {
            let rows: Vec<Vec<f32>> = (0..5)
                .map(|i| row(i as f32 * 10.0 + f.len() as f32))
                .collect();
            let p = write_csv(dir.path(), f, &rows, false);
            entries.push(ManifestEntry {
                path: p,
                label: label.parse().unwrap(),
            });
        }
        let data = ingest(&Manifest { entries }).unwrap();
        assert_eq!(data.len(), 15);
        let names: Vec<&str> = data.labels.iter().map(|l| l.name()).collect();
        assert_eq!(&names[..5], &["mirai_syn"; 5]);
        assert_eq!(&names[5..10], &["Normal"; 5]);
        assert_eq!(&names[10..], &["gafgyt_scan"; 5]);
    }

    #[test]
    fn same_features_different_label_are_kept() {
        let mut d = DataMatrix::new(FEATURE_COUNT);
        d.push(&row(0.0), ClassId::NORMAL);
        d.push(&row(0.0), ClassId::new(3).unwrap());
        d.push(&row(0.0), ClassId::NORMAL);
        assert_eq!(d.dedup().len(), 2);
        assert_eq!(d.dedup().dedup(), d.dedup());
    }

    #[test]
    fn csv_errors_point_at_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2,3\n").unwrap();
        assert!(matches!(
            read_flow_csv(&p, FEATURE_COUNT),
            Err(DataError::WrongColumnCount {
                found: 3,
                line: 1,
                ..
            })
        ));
        let mut good: Vec<String> = row(0.0).iter().map(|v| v.to_string()).collect();
        let mut text = good.join(",") + "\n";
        good[7] = "abc".into();
        text += &(good.join(",") + "\n");
        fs::write(&p, text).unwrap();
        let err = read_flow_csv(&p, FEATURE_COUNT).unwrap_err();
        assert!(
            matches!(
                err,
                DataError::NonNumeric {
                    line: 2,
                    column: 7,
                    ..
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("bad.csv:2"));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split(100, 3).unwrap();
        assert_eq!((s.train_idx.len(), s.test_idx.len()), (80, 20));
        assert_eq!(s, split(100, 3).unwrap());
        assert_ne!(s.train_idx, split(100, 4).unwrap().train_idx);
        let mut all: Vec<usize> = s.train_idx.iter().chain(&s.test_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(matches!(split(9, 0), Err(DataError::TooFewRows(9))));
        // floor(0.8 N) train, remainder test, at corpus scale
        let n = REFERENCE_TOTAL_ROWS;
        assert_eq!(n * 8 / 10, 1_985_976);
        assert_eq!(n - n * 8 / 10, 496_494);
    }

    #[test]
    fn standardizer_examples() {
        let mut d = DataMatrix::new(2);
        d.push(&[5.0, 0.0], ClassId::NORMAL);
        d.push(&[5.0, 2.0], ClassId::NORMAL);
        d.push(&[5.0, 10.0], ClassId::NORMAL);
        let s = Standardizer::fit(&d, &[0, 1]);
        let out = s.transform(&d);
        assert_eq!(&out[..4], &[0.0, -1.0, 0.0, 1.0]);
        // test row uses train statistics, no clipping
        assert_eq!(out[5], 9.0);
        assert_eq!(s.std[0], STD_FLOOR);
    }

    #[test]
    fn cache_round_trip() {
        let mut d = DataMatrix::new(FEATURE_COUNT);
        d.push(&row(0.25), ClassId::new(9).unwrap());
        d.push(&row(-3.0), ClassId::NORMAL);
        let bytes = d.cache_bytes();
        assert_eq!(&bytes[..5], b"NBIO1");
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 115);
        assert_eq!(bytes.len(), 17 + 2 * 115 * 4 + 2);
        assert_eq!(DataMatrix::from_cache_bytes(&bytes).unwrap(), d);
        assert!(DataMatrix::from_cache_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn stratified_subsample_keeps_every_class() {
        let keys: Vec<u8> = (0..1000)
            .map(|i| if i < 990 { 0 } else { 1 + (i % 3) as u8 })
            .collect();
        let idx = stratified_subsample(&keys, 5, 1).unwrap();
        let mut counts = [0; 4];
        for &i in &idx {
            counts[keys[i] as usize] += 1;
        }
        assert_eq!(counts[0], 5);
        assert!(counts[1..].iter().all(|&c| c >= 1));
        assert_eq!(idx, stratified_subsample(&keys, 5, 1).unwrap());
        assert!(stratified_subsample(&keys, 0, 1).is_err());
    }
}
