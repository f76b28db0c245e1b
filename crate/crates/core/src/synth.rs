//! Synthetic corpora of tonal tracks whose tags are audible as distinct
//! pitches, for smoke runs and tests.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ingest::{write_wav, Split, TagVocabulary, TrackManifest, TrackRecord};
use crate::rng;

/// A harmonic tone: partial `k` (1-based) has amplitude `amp / k`.
pub fn harmonic_tone(f0: f64, partials: usize, amp: f64, seconds: f64, sample_rate: u32) -> Vec<f32> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            (1..=partials)
                .map(|k| amp / k as f64 * (2.0 * PI * f0 * k as f64 * t).sin())
                .sum::<f64>() as f32
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub labeled: usize,
    pub unlabeled: usize,
    pub tags: Vec<String>,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            labeled: 20,
            unlabeled: 10,
            tags: ["calm", "dark", "energetic", "happy"].map(String::from).to_vec(),
            seconds: 12.0,
            sample_rate: 44100,
            seed: 0,
        }
    }
}

/// Fundamental for each tag: distinct pitch classes in distinct octaves.
pub fn tag_frequency(tag: usize) -> f64 {
    const SEMITONES_FROM_A4: [i32; 8] = [-12, -6, 3, 20, -11, 16, -2, 11];
    440.0 * 2f64.powf(SEMITONES_FROM_A4[tag % 8] as f64 / 12.0)
}

fn render(tags: &[usize], spec: &SynthSpec, noise_seed: u64) -> Vec<f32> {
    let mut out = vec![0f32; (spec.seconds * spec.sample_rate as f64).round() as usize];
    for &t in tags {
        let tone = harmonic_tone(tag_frequency(t), 3, 0.25, spec.seconds, spec.sample_rate);
        for (o, v) in out.iter_mut().zip(tone) {
            *o += v;
        }
    }
    let mut r = rng::stream(spec.seed, &[rng::tag::SYNTH, noise_seed]);
    for o in &mut out {
        let e: f64 = r.sample(StandardNormal);
        *o += (0.02 * e) as f32;
    }
    out
}

/// Labeled track `i`: primary tag `i mod T`, plus a second tag on every third
/// track. The first 60% are train, the next 20% valid, the rest test.
fn labeled_tags(i: usize, t: usize) -> Vec<usize> {
    let mut v = vec![i % t];
    if i.is_multiple_of(3) && t > 1 {
        v.push((i % t + 1 + i / t) % t);
        v.sort_unstable();
        v.dedup();
    }
    v
}

fn split_of(i: usize, n: usize) -> Split {
    let train = n * 3 / 5;
    let valid = n / 5;
    if i < train {
        Split::Train
    } else if i < train + valid {
        Split::Valid
    } else {
        Split::Test
    }
}

/// Write WAVs, `manifest.tsv` and `vocab.txt` under `dir`.
pub fn write_corpus(dir: &Path, spec: &SynthSpec) -> Result<(PathBuf, PathBuf)> {
    if spec.tags.is_empty() {
        return Err(Error::Config("synthetic corpus needs at least one tag".into()));
    }
    let audio = dir.join("audio");
    std::fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let vocabulary = TagVocabulary::new(spec.tags.clone())?;
    let t = spec.tags.len();
    let mut records = Vec::new();
    let mut r = rng::stream(spec.seed, &[rng::tag::SYNTH, u64::MAX]);
    for i in 0..spec.labeled + spec.unlabeled {
        let (id, tags, split) = if i < spec.labeled {
            (format!("syn{i:03}"), labeled_tags(i, t), split_of(i, spec.labeled))
        } else {
            let mut tags = vec![r.gen_range(0..t)];
            if r.gen_bool(0.3) {
                tags.push(r.gen_range(0..t));
            }
            tags.sort_unstable();
            tags.dedup();
            (format!("unl{:03}", i - spec.labeled), tags, Split::Unlabeled)
        };
        let rel = PathBuf::from("audio").join(format!("{id}.wav"));
        write_wav(&dir.join(&rel), &render(&tags, spec, i as u64), spec.sample_rate)?;
        records.push(TrackRecord {
            track_id: id,
            audio_path: rel,
            duration_s: spec.seconds,
            tags: if split == Split::Unlabeled {
                Vec::new()
            } else {
                tags.iter().map(|&k| spec.tags[k].clone()).collect()
            },
            split,
        });
    }
    let manifest = TrackManifest::new(records, vocabulary, dir.to_path_buf())?;
    let mpath = dir.join("manifest.tsv");
    let vpath = dir.join("vocab.txt");
    std::fs::write(&mpath, manifest.serialize()).map_err(|e| Error::io(&mpath, e))?;
    std::fs::write(&vpath, manifest.vocabulary.serialize()).map_err(|e| Error::io(&vpath, e))?;
    Ok((mpath, vpath))
}
