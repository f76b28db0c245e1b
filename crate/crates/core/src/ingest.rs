//! Track manifests, tag vocabularies and audio decoding.
//!
//! The manifest is a UTF-8 TSV with header
//! `track_id<TAB>path<TAB>duration_s<TAB>split<TAB>tags`, where `tags` is a
//! comma-separated list (possibly empty). The vocabulary is a text file with
//! one tag per line; line order defines the column index.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "track_id\tpath\tduration_s\tsplit\ttags";

/// Ordered tag names with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagVocabulary {
    pub fn new(tags: Vec<String>) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::Vocabulary("vocabulary must hold at least one tag".into()));
        }
        let mut index = HashMap::with_capacity(tags.len());
        for (i, t) in tags.iter().enumerate() {
            if t.is_empty() || t.contains(',') || t.contains('\t') {
                return Err(Error::Vocabulary(format!("invalid tag name `{t}`")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate tag `{t}`")));
            }
        }
        Ok(Self { tags, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Blank lines are skipped; every other line is one tag.
    pub fn parse(text: &str) -> Result<Self> {
        let tags = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self::new(tags)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for t in &self.tags {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
    Unlabeled,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Valid, Split::Test, Split::Unlabeled];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub track_id: String,
    /// Relative to the manifest's directory.
    pub audio_path: PathBuf,
    pub duration_s: f64,
    pub tags: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackManifest {
    pub records: Vec<TrackRecord>,
    pub vocabulary: TagVocabulary,
    /// Directory audio paths are resolved against.
    pub root: PathBuf,
}

/// Load and validate a manifest against the vocabulary file.
pub fn load_manifest(manifest_path: &Path, vocab_path: &Path) -> Result<TrackManifest> {
    let vocabulary = TagVocabulary::load(vocab_path)?;
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    TrackManifest::parse(&text, vocabulary, root, manifest_path)
}

impl TrackManifest {
    pub fn new(records: Vec<TrackRecord>, vocabulary: TagVocabulary, root: PathBuf) -> Result<Self> {
        let m = Self {
            records,
            vocabulary,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    /// Parse manifest text. `origin` is only used in error messages.
    pub fn parse(text: &str, vocabulary: TagVocabulary, root: PathBuf, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
            Some((_, h)) => return Err(parse_err(1, format!("bad header `{h}`"))),
            None => return Err(parse_err(1, "empty manifest".into())),
        }
        let mut records = Vec::new();
        for (i, raw) in lines {
            let lineno = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(parse_err(lineno, format!("expected 5 columns, found {}", cols.len())));
            }
            let duration_s: f64 = cols[2]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad duration `{}`", cols[2])))?;
            if !(duration_s > 0.0) || !duration_s.is_finite() {
                return Err(parse_err(
                    lineno,
                    format!("duration must be positive, got {duration_s}"),
                ));
            }
            let split: Split = cols[3]
                .parse()
                .map_err(|_| parse_err(lineno, format!("unknown split `{}`", cols[3])))?;
            if cols[0].is_empty() {
                return Err(parse_err(lineno, "empty track_id".into()));
            }
            let mut tags: Vec<String> = Vec::new();
            for t in cols[4].split(',').map(str::trim).filter(|t| !t.is_empty()) {
                if !tags.iter().any(|x| x == t) {
                    tags.push(t.to_string());
                }
            }
            records.push(TrackRecord {
                track_id: cols[0].to_string(),
                audio_path: PathBuf::from(cols[1]),
                duration_s,
                tags,
                split,
            });
        }
        Self::new(records, vocabulary, root)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.track_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate track_id `{}`", r.track_id)));
            }
            if r.split == Split::Unlabeled && !r.tags.is_empty() {
                return Err(Error::Integrity(format!(
                    "unlabeled track `{}` carries tags",
                    r.track_id
                )));
            }
            for t in &r.tags {
                if self.vocabulary.index_of(t).is_none() {
                    return Err(Error::Vocabulary(format!(
                        "track `{}` uses unknown tag `{t}`",
                        r.track_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.track_id,
                r.audio_path.display(),
                r.duration_s,
                r.split,
                r.tags.join(",")
            ));
        }
        out
    }

    pub fn num_tags(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TrackRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_records(&self, split: Split) -> Result<Vec<&TrackRecord>> {
        let v: Vec<_> = self.split(split).collect();
        if v.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        Ok(v)
    }

    pub fn get(&self, track_id: &str) -> Option<&TrackRecord> {
        self.records.iter().find(|r| r.track_id == track_id)
    }

    pub fn audio_path(&self, record: &TrackRecord) -> PathBuf {
        self.root.join(&record.audio_path)
    }

    /// Binary label row for one record.
    pub fn label_row(&self, record: &TrackRecord) -> Vec<bool> {
        let mut row = vec![false; self.num_tags()];
        for t in &record.tags {
            if let Some(j) = self.vocabulary.index_of(t) {
                row[j] = true;
            }
        }
        row
    }
}

/// `[N × T]` binary matrix of the records in `split`, in manifest order.
pub fn label_matrix(manifest: &TrackManifest, split: Split) -> Result<Array2<bool>> {
    if split == Split::Unlabeled {
        return Err(Error::Config("labels are undefined for the unlabeled split".into()));
    }
    let records = manifest.split_records(split)?;
    let t = manifest.num_tags();
    let mut m = Array2::from_elem((records.len(), t), false);
    for (i, r) in records.iter().enumerate() {
        for (j, v) in manifest.label_row(r).into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

/// Decode a track to mono samples at `sample_rate`.
///
/// Multichannel input is averaged; other rates are linearly resampled.
pub fn load_audio(manifest: &TrackManifest, record: &TrackRecord, sample_rate: u32) -> Result<Vec<f32>> {
    let path = manifest.audio_path(record);
    decode_wav(&path, sample_rate).map_err(|message| Error::Decode {
        track_id: record.track_id.clone(),
        message,
    })
}

fn decode_wav(path: &Path, sample_rate: u32) -> std::result::Result<Vec<f32>, String> {
    let mut reader = hound::WavReader::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err("zero channels".into());
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| e.to_string())?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| e.to_string())?
        }
    };
    let mono = downmix(&interleaved, channels);
    Ok(resample_linear(&mono, spec.sample_rate, sample_rate))
}

pub fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().sum::<f32>() / channels as f32).clamp(-1.0, 1.0))
        .collect()
}

/// Linear-interpolation resampling; output length is `round(n · to / from)`.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let out_len = ((samples.len() as f64) * to as f64 / from as f64).round() as usize;
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let k = pos.floor() as usize;
            if k >= last {
                return samples[last];
            }
            let frac = (pos - k as f64) as f32;
            samples[k] * (1.0 - frac) + samples[k + 1] * frac
        })
        .collect()
}

/// Write a mono 32-bit float WAV file.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    write_wav_channels(path, samples, 1, sample_rate)
}

pub fn write_wav_channels(path: &Path, interleaved: &[f32], channels: u16, sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in interleaved {
        w.write_sample(s).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> TagVocabulary {
        TagVocabulary::parse("happy\nsad\n").unwrap()
    }

    fn parse(text: &str) -> Result<TrackManifest> {
        TrackManifest::parse(text, vocab(), PathBuf::new(), Path::new("m.tsv"))
    }

    const THREE_ROWS: &str = "track_id\tpath\tduration_s\tsplit\ttags\n\
        a\ta.wav\t10\ttrain\thappy\n\
        b\tb.wav\t12.5\tvalid\thappy,sad\n\
        c\tc.wav\t3\tunlabeled\t\n";

    #[test]
    fn three_row_manifest() {
        let m = parse(THREE_ROWS).unwrap();
        assert_eq!(m.num_tags(), 2);
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[1].tags, vec!["happy", "sad"]);
        assert!(m.records[2].tags.is_empty());
        assert_eq!(m.records[2].split, Split::Unlabeled);
    }

    #[test]
    fn unknown_tag_is_vocabulary_error() {
        let text = format!("{MANIFEST_HEADER}\na\ta.wav\t1\ttrain\tangry\n");
        assert!(matches!(parse(&text), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn duplicate_track_is_integrity_error() {
        let text = format!("{MANIFEST_HEADER}\na\ta.wav\t1\ttrain\t\na\tb.wav\t1\ttest\t\n");
        assert!(matches!(parse(&text), Err(Error::Integrity(_))));
    }

    #[test]
    fn malformed_row_names_line() {
        let text = format!("{MANIFEST_HEADER}\na\ta.wav\t1\ttrain\t\nb\tb.wav\tnope\ttrain\t\n");
        match parse(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = format!("{MANIFEST_HEADER}\na\ta.wav\t1\n");
        assert!(matches!(parse(&text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn unlabeled_with_tags_rejected() {
        let text = format!("{MANIFEST_HEADER}\na\ta.wav\t1\tunlabeled\thappy\n");
        assert!(matches!(parse(&text), Err(Error::Integrity(_))));
    }

    #[test]
    fn nonpositive_duration_rejected() {
        let text = format!("{MANIFEST_HEADER}\na\ta.wav\t0\ttrain\t\n");
        assert!(matches!(parse(&text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn vocabulary_rules() {
        assert!(TagVocabulary::parse("").is_err());
        assert!(TagVocabulary::parse("a\na\n").is_err());
        let v = TagVocabulary::parse("x\ny\nz\n").unwrap();
        assert_eq!(v.index_of("z"), Some(2));
        assert_eq!(TagVocabulary::parse(&v.serialize()).unwrap(), v);
    }

    #[test]
    fn label_matrix_rows() {
        let text = format!(
            "{MANIFEST_HEADER}\na\ta.wav\t1\ttrain\thappy\nb\tb.wav\t1\ttrain\thappy,sad\nc\tc.wav\t1\ttrain\t\nu\tu.wav\t1\tunlabeled\t\n"
        );
        let m = parse(&text).unwrap();
        let l = label_matrix(&m, Split::Train).unwrap();
        assert_eq!(l.row(0).to_vec(), vec![true, false]);
        assert_eq!(l.row(1).to_vec(), vec![true, true]);
        assert_eq!(l.row(2).to_vec(), vec![false, false]);
        assert_eq!(label_matrix(&m, Split::Train).unwrap(), l);
        assert!(label_matrix(&m, Split::Unlabeled).is_err());
        assert!(matches!(label_matrix(&m, Split::Test), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn audio_decoding() {
        let dir = tempfile::tempdir().unwrap();
        let sr = 44100;
        let one_sec: Vec<f32> = (0..sr).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
        write_wav(&dir.path().join("mono.wav"), &one_sec, sr).unwrap();
        let stereo: Vec<f32> = (0..1000).flat_map(|_| [0.5f32, -0.1]).collect();
        write_wav_channels(&dir.path().join("st.wav"), &stereo, 2, sr).unwrap();
        let low: Vec<f32> = vec![0.25; 2 * 22050];
        write_wav(&dir.path().join("low.wav"), &low, 22050).unwrap();
        std::fs::write(dir.path().join("bad.wav"), b"not a wav").unwrap();

        let text = format!(
            "{MANIFEST_HEADER}\nmono\tmono.wav\t1\ttrain\t\nst\tst.wav\t1\ttrain\t\nlow\tlow.wav\t2\ttrain\t\nbad\tbad.wav\t1\ttrain\t\n"
        );
        let m = TrackManifest::parse(&text, vocab(), dir.path().to_path_buf(), Path::new("m")).unwrap();
        let a = load_audio(&m, &m.records[0], sr).unwrap();
        assert_eq!(a.len(), 44100);
        assert_eq!(a, load_audio(&m, &m.records[0], sr).unwrap());
        let s = load_audio(&m, &m.records[1], sr).unwrap();
        assert_eq!(s.len(), 1000);
        assert!((s[0] - 0.2).abs() < 1e-6);
        let l = load_audio(&m, &m.records[2], sr).unwrap();
        assert!((l.len() as i64 - 88200).abs() <= 2);
        match load_audio(&m, &m.records[3], sr) {
            Err(Error::Decode { track_id, .. }) => assert_eq!(track_id, "bad"),
            other => panic!("{other:?}"),
        }
    }
}
