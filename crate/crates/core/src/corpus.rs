//! Training manifests and evaluation segment metadata.
//!
//! Both files are JSON Lines: one object per line, blank lines ignored.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable prepended to relative paths in manifests and metadata.
pub const DATA_ROOT_ENV: &str = "MEDLEYSEP_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Singing,
    Speech,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub utterance_id: String,
    pub audio_path: String,
    pub singer_id: String,
    #[serde(default)]
    pub song_id: String,
    pub domain: Domain,
    pub duration: f64,
}

/// Loaded manifest with singer and song groupings.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    records: Vec<SourceRecord>,
    by_singer: BTreeMap<String, Vec<usize>>,
    by_song: BTreeMap<String, Vec<usize>>,
    singing: Vec<usize>,
    speech: Vec<usize>,
    skipped_missing: usize,
}

impl Manifest {
    /// Builds indices over already-validated records. Fails on duplicate ids.
    pub fn from_records(records: Vec<SourceRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            validate_record(r).map_err(Error::invalid)?;
            if !seen.insert(r.utterance_id.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate utterance_id {:?}",
                    r.utterance_id
                )));
            }
        }
        let mut m = Manifest {
            records,
            ..Default::default()
        };
        m.build_indices();
        Ok(m)
    }

    fn build_indices(&mut self) {
        for (i, r) in self.records.iter().enumerate() {
            self.by_singer.entry(r.singer_id.clone()).or_default().push(i);
            match r.domain {
                Domain::Singing => {
                    self.singing.push(i);
                    if !r.song_id.is_empty() {
                        self.by_song.entry(r.song_id.clone()).or_default().push(i);
                    }
                }
                Domain::Speech => self.speech.push(i),
            }
        }
    }

    pub fn records(&self) -> &[SourceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn by_singer(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_singer
    }

    pub fn by_song(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_song
    }

    pub fn singing(&self) -> &[usize] {
        &self.singing
    }

    pub fn speech(&self) -> &[usize] {
        &self.speech
    }

    /// Lines dropped because their audio file did not exist.
    pub fn skipped_missing(&self) -> usize {
        self.skipped_missing
    }

    /// Concatenates manifests, re-indexing; utterance ids must stay unique.
    pub fn merge(manifests: impl IntoIterator<Item = Manifest>) -> Result<Manifest> {
        let mut records = Vec::new();
        let mut skipped = 0;
        for m in manifests {
            skipped += m.skipped_missing;
            records.extend(m.records);
        }
        let mut out = Manifest::from_records(records)?;
        out.skipped_missing = skipped;
        Ok(out)
    }
}

fn validate_record(r: &SourceRecord) -> std::result::Result<(), String> {
    if r.utterance_id.is_empty() {
        return Err("utterance_id must not be empty".into());
    }
    if !(r.duration > 0.0) || !r.duration.is_finite() {
        return Err(format!("duration must be positive, got {}", r.duration));
    }
    if r.domain == Domain::Speech && !r.song_id.is_empty() {
        return Err("speech records must have an empty song_id".into());
    }
    Ok(())
}

/// Directory against which relative paths in `file` are resolved: the
/// data-root environment variable when set, else the file's own directory.
pub fn data_root_for(file: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root),
        _ => file.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

pub fn resolve_path(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Loads a JSON Lines manifest. Relative audio paths are resolved against
/// [`data_root_for`] and stored resolved. Records whose audio file is
/// missing are skipped with a warning and counted.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    load_manifest_with_root(path, &data_root_for(path))
}

pub fn load_manifest_with_root(path: &Path, root: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    let mut skipped = 0;
    for (line, text) in read_lines(path)? {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut rec: SourceRecord =
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        validate_record(&rec).map_err(parse_err)?;
        if !ids.insert(rec.utterance_id.clone()) {
            return Err(parse_err(format!(
                "duplicate utterance_id {:?}",
                rec.utterance_id
            )));
        }
        let resolved = resolve_path(root, &rec.audio_path);
        if !resolved.exists() {
            log::warn!(
                "{}:{line}: audio file {} not found, skipping {}",
                path.display(),
                resolved.display(),
                rec.utterance_id
            );
            skipped += 1;
            continue;
        }
        rec.audio_path = resolved.to_string_lossy().into_owned();
        records.push(rec);
    }
    let mut m = Manifest {
        records,
        skipped_missing: skipped,
        ..Default::default()
    };
    m.build_indices();
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Unison,
    Duet,
    MainVsRest,
    NSinging,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Unison,
        Category::Duet,
        Category::MainVsRest,
        Category::NSinging,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Unison => "unison",
            Category::Duet => "duet",
            Category::MainVsRest => "main_vs_rest",
            Category::NSinging => "n_singing",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedleyVoxSegment {
    pub segment_id: String,
    pub song_id: String,
    pub category: Category,
    pub n_singings: u32,
    pub n_singers: u32,
    pub start: f64,
    pub end: f64,
    pub mixture_path: String,
    pub stem_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub main_index: Option<usize>,
}

impl MedleyVoxSegment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Checks the category/stem-count rules; returns the reason on failure.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_singings < 2 {
            return Err(format!("n_singings must be >= 2, got {}", self.n_singings));
        }
        if self.n_singers < 1 || self.n_singers > self.n_singings {
            return Err(format!(
                "n_singers {} must lie in [1, n_singings = {}]",
                self.n_singers, self.n_singings
            ));
        }
        if !(self.end > self.start) || self.start < 0.0 {
            return Err(format!("invalid time span [{}, {}]", self.start, self.end));
        }
        let stems = self.stem_paths.len();
        match self.category {
            Category::Unison | Category::Duet => {
                if self.category == Category::Unison && self.n_singings != 2 {
                    return Err(format!(
                        "unison segments have exactly 2 singings, got {}",
                        self.n_singings
                    ));
                }
                if stems != self.n_singings as usize {
                    return Err(format!(
                        "{} segment lists {stems} stems for {} singings",
                        self.category, self.n_singings
                    ));
                }
            }
            Category::MainVsRest => match self.main_index {
                None if stems == 2 => {}
                Some(0) if stems == 2 => {}
                Some(i) if stems == self.n_singings as usize && i < stems => {}
                Some(i) if stems == self.n_singings as usize => {
                    return Err(format!("main_index {i} out of range for {stems} stems"));
                }
                None => {
                    return Err(format!(
                        "main_vs_rest with {stems} stems needs (main, rest) pair or main_index"
                    ));
                }
                Some(_) => {
                    return Err(format!(
                        "main_vs_rest lists {stems} stems; expected 2 or {}",
                        self.n_singings
                    ));
                }
            },
            Category::NSinging => {
                if stems != self.n_singings as usize {
                    return Err(format!(
                        "n_singing segment lists {stems} stems for {} singings",
                        self.n_singings
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct MedleyVoxMetadata {
    pub segments: Vec<MedleyVoxSegment>,
    /// `(segment_id, reason)` for every segment that failed validation.
    pub rejected: Vec<(String, String)>,
    /// Directory that relative mixture/stem paths resolve against.
    pub root: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellTotals {
    pub segments: usize,
    pub songs: usize,
    pub seconds: f64,
}

impl MedleyVoxMetadata {
    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        let mut out = BTreeMap::new();
        for s in &self.segments {
            *out.entry(s.category).or_insert(0) += 1;
        }
        out
    }

    pub fn total_seconds(&self) -> f64 {
        self.segments.iter().map(|s| s.duration()).sum()
    }

    /// Totals keyed by `(category, n_singings, n_singers)`.
    pub fn cell_totals(&self) -> BTreeMap<(Category, u32, u32), CellTotals> {
        let mut songs: BTreeMap<(Category, u32, u32), HashSet<&str>> = BTreeMap::new();
        let mut out: BTreeMap<(Category, u32, u32), CellTotals> = BTreeMap::new();
        for s in &self.segments {
            let key = (s.category, s.n_singings, s.n_singers);
            let cell = out.entry(key).or_default();
            cell.segments += 1;
            cell.seconds += s.duration();
            songs.entry(key).or_default().insert(&s.song_id);
        }
        for (k, v) in songs {
            out.get_mut(&k).unwrap().songs = v.len();
        }
        out
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        resolve_path(&self.root, p)
    }
}

/// Loads segment metadata. Malformed JSON aborts with the line number;
/// segments violating the category rules are collected in `rejected`.
pub fn load_medleyvox_metadata(path: impl AsRef<Path>) -> Result<MedleyVoxMetadata> {
    let path = path.as_ref();
    let mut meta = MedleyVoxMetadata {
        root: data_root_for(path),
        ..Default::default()
    };
    let mut ids = HashSet::new();
    for (line, text) in read_lines(path)? {
        let seg: MedleyVoxSegment = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if !ids.insert(seg.segment_id.clone()) {
            meta.rejected
                .push((seg.segment_id.clone(), "duplicate segment_id".into()));
            continue;
        }
        match seg.validate() {
            Ok(()) => meta.segments.push(seg),
            Err(reason) => {
                log::warn!("{}:{line}: rejecting {}: {reason}", path.display(), seg.segment_id);
                meta.rejected.push((seg.segment_id.clone(), reason));
            }
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        p
    }

    fn rec_line(id: &str, singer: &str, song: &str, domain: &str, path: &str) -> String {
        serde_json::json!({
            "utterance_id": id, "audio_path": path, "singer_id": singer,
            "song_id": song, "domain": domain, "duration": 4.0
        })
        .to_string()
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.jsonl", &[]);
        let m = load_manifest_with_root(&p, dir.path()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn three_records_with_singer_index() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.wav", "b.wav", "c.wav"] {
            std::fs::write(dir.path().join(f), b"").unwrap();
        }
        let p = write(
            dir.path(),
            "m.jsonl",
            &[
                rec_line("u1", "s1", "song1", "singing", "a.wav"),
                String::new(),
                rec_line("u2", "s1", "song2", "singing", "b.wav"),
                rec_line("u3", "spk", "", "speech", "c.wav"),
            ],
        );
        let m = load_manifest_with_root(&p, dir.path()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.by_singer()["s1"], vec![0, 1]);
        assert_eq!(m.by_singer()["spk"], vec![2]);
        assert_eq!(m.speech(), &[2]);
        assert!(!m.by_song().contains_key(""));
        assert!(Path::new(&m.records()[0].audio_path).is_absolute());
    }

    #[test]
    fn duplicate_id_names_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.wav"), b"").unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            &[
                rec_line("u1", "s1", "x", "singing", "a.wav"),
                rec_line("u2", "s1", "x", "singing", "a.wav"),
                rec_line("u1", "s2", "x", "singing", "a.wav"),
            ],
        );
        let err = load_manifest_with_root(&p, dir.path()).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.jsonl", &["{not json".into()]);
        let err = load_manifest_with_root(&p, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn missing_audio_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.wav"), b"").unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            &[
                rec_line("u1", "s1", "x", "singing", "a.wav"),
                rec_line("u2", "s1", "x", "singing", "gone.wav"),
            ],
        );
        let m = load_manifest_with_root(&p, dir.path()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.skipped_missing(), 1);
    }

    fn seg(id: &str, cat: &str, n: u32, stems: usize, main: Option<usize>) -> String {
        let mut v = serde_json::json!({
            "segment_id": id, "song_id": "song", "category": cat,
            "n_singings": n, "n_singers": 1, "start": 0.0, "end": 2.5,
            "mixture_path": "mix.wav",
            "stem_paths": (0..stems).map(|i| format!("s{i}.wav")).collect::<Vec<_>>(),
        });
        if let Some(m) = main {
            v["main_index"] = m.into();
        }
        v.to_string()
    }

    #[test]
    fn metadata_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "meta.jsonl",
            &[
                seg("a", "unison", 2, 2, None),
                seg("b", "duet", 2, 2, None),
                seg("c", "unison", 3, 3, None),
                seg("d", "main_vs_rest", 4, 2, None),
                seg("e", "main_vs_rest", 4, 4, Some(1)),
                seg("f", "main_vs_rest", 4, 3, None),
                seg("g", "duet", 2, 3, None),
            ],
        );
        let meta = load_medleyvox_metadata(&p).unwrap();
        let ok: Vec<_> = meta.segments.iter().map(|s| s.segment_id.as_str()).collect();
        assert_eq!(ok, ["a", "b", "d", "e"]);
        let bad: Vec<_> = meta.rejected.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(bad, ["c", "f", "g"]);
        assert!(meta.rejected[0].1.contains("unison"));
    }

    #[test]
    fn unison_with_three_stems_is_rejected() {
        let s: MedleyVoxSegment = serde_json::from_str(&seg("x", "unison", 2, 3, None)).unwrap();
        assert!(s.validate().is_err());
    }

    #[test]
    fn category_round_trips_through_strings() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
        }
    }
}
