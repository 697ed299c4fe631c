//! Correlated record sampling and the record-to-mixture pipeline.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{make_duet, make_main_vs_rest, make_unison, MixPolicy, MixtureExample};
use crate::audio::{read_wav, AudioBuffer};
use crate::corpus::{Category, Manifest, SourceRecord};
use crate::error::{Error, Result};
use crate::resample::resample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    SameSinger,
    SameSong,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairDraw {
    pub first: usize,
    pub second: usize,
    pub kind: PairKind,
}

/// Eligible pools derived from a manifest for one policy. Only records at
/// least one chunk long take part.
#[derive(Debug, Clone)]
pub struct Sampler {
    manifest: Manifest,
    policy: MixPolicy,
    singing: Vec<usize>,
    speech: Vec<usize>,
    /// Singers with at least two eligible singing utterances.
    multi_singers: Vec<Vec<usize>>,
    /// Songs sung by at least two different singers: record indices per singer.
    multi_songs: Vec<Vec<Vec<usize>>>,
}

impl Sampler {
    pub fn new(manifest: Manifest, policy: MixPolicy) -> Result<Self> {
        policy.validate()?;
        let records = manifest.records();
        let eligible = |i: &usize| records[*i].duration >= policy.chunk_seconds;
        let singing: Vec<usize> = manifest.singing().iter().copied().filter(eligible).collect();
        let speech: Vec<usize> = manifest.speech().iter().copied().filter(eligible).collect();
        if singing.is_empty() && speech.is_empty() {
            return Err(Error::invalid(format!(
                "no manifest record is at least {} s long",
                policy.chunk_seconds
            )));
        }
        let multi_singers = manifest
            .by_singer()
            .values()
            .map(|ids| {
                ids.iter()
                    .copied()
                    .filter(|i| eligible(i) && singing.binary_search(i).is_ok())
                    .collect::<Vec<_>>()
            })
            .filter(|ids| ids.len() >= 2)
            .collect();
        let multi_songs = manifest
            .by_song()
            .values()
            .map(|ids| {
                let mut per_singer: std::collections::BTreeMap<&str, Vec<usize>> =
                    Default::default();
                for &i in ids.iter().filter(|i| eligible(i)) {
                    per_singer.entry(records[i].singer_id.as_str()).or_default().push(i);
                }
                per_singer.into_values().collect::<Vec<_>>()
            })
            .filter(|groups| groups.len() >= 2)
            .collect();
        Ok(Self {
            manifest,
            policy,
            singing,
            speech,
            multi_singers,
            multi_songs,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn policy(&self) -> &MixPolicy {
        &self.policy
    }

    pub fn record(&self, i: usize) -> &SourceRecord {
        &self.manifest.records()[i]
    }

    /// One record: from the speech pool with probability `p_speech`.
    pub fn sample_single<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let use_speech = !self.speech.is_empty()
            && (self.singing.is_empty() || rng.gen_bool(self.policy.p_speech));
        let pool = if use_speech { &self.speech } else { &self.singing };
        pool[rng.gen_range(0..pool.len())]
    }

    fn independent<R: Rng + ?Sized>(&self, rng: &mut R) -> PairDraw {
        let first = self.sample_single(rng);
        let mut second = self.sample_single(rng);
        let total = self.singing.len() + self.speech.len();
        if total > 1 {
            while second == first {
                second = self.sample_single(rng);
            }
        }
        PairDraw {
            first,
            second,
            kind: PairKind::Independent,
        }
    }

    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> PairDraw {
        if rng.gen_bool(self.policy.p_same_singer) {
            if self.multi_singers.is_empty() {
                log::debug!("no singer with two eligible utterances; drawing independently");
                return self.independent(rng);
            }
            let group = &self.multi_singers[rng.gen_range(0..self.multi_singers.len())];
            let picked: Vec<usize> = group.choose_multiple(rng, 2).copied().collect();
            return PairDraw {
                first: picked[0],
                second: picked[1],
                kind: PairKind::SameSinger,
            };
        }
        if rng.gen_bool(self.policy.p_same_song) {
            if self.multi_songs.is_empty() {
                log::debug!("no song with two eligible singers; drawing independently");
                return self.independent(rng);
            }
            let song = &self.multi_songs[rng.gen_range(0..self.multi_songs.len())];
            let singers: Vec<&Vec<usize>> = song.choose_multiple(rng, 2).collect();
            let first = singers[0][rng.gen_range(0..singers[0].len())];
            let second = singers[1][rng.gen_range(0..singers[1].len())];
            return PairDraw {
                first,
                second,
                kind: PairKind::SameSong,
            };
        }
        self.independent(rng)
    }

    /// Main plus `n_rest` others; the first rest voice follows the pair policy.
    pub fn sample_group<R: Rng + ?Sized>(&self, n_rest: usize, rng: &mut R) -> (Vec<usize>, PairKind) {
        let pair = self.sample_pair(rng);
        let mut out = vec![pair.first, pair.second];
        while out.len() < n_rest + 1 {
            out.push(self.sample_single(rng));
        }
        out.truncate(n_rest + 1);
        (out, pair.kind)
    }
}

/// Draws a correlated pair from `manifest` under `policy`.
pub fn sample_pair<R: Rng + ?Sized>(
    manifest: &Manifest,
    policy: &MixPolicy,
    rng: &mut R,
) -> Result<(SourceRecord, SourceRecord, PairKind)> {
    let sampler = Sampler::new(manifest.clone(), policy.clone())?;
    let d = sampler.sample_pair(rng);
    Ok((sampler.record(d.first).clone(), sampler.record(d.second).clone(), d.kind))
}

const CACHE_LIMIT: usize = 1024;
const DRAW_RETRIES: usize = 16;

/// Loads audio for sampled records and builds mixtures for the policy's arm.
pub struct DynamicMixer {
    sampler: Sampler,
    sample_rate: u32,
    cache: HashMap<usize, AudioBuffer>,
}

impl DynamicMixer {
    pub fn new(manifest: Manifest, policy: MixPolicy, sample_rate: u32) -> Result<Self> {
        if !crate::audio::PIPELINE_RATES.contains(&sample_rate) {
            return Err(Error::config(format!(
                "pipeline sample rate {sample_rate} is not one of {:?}",
                crate::audio::PIPELINE_RATES
            )));
        }
        Ok(Self {
            sampler: Sampler::new(manifest, policy)?,
            sample_rate,
            cache: HashMap::new(),
        })
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn audio(&mut self, i: usize) -> Result<AudioBuffer> {
        if let Some(a) = self.cache.get(&i) {
            return Ok(a.clone());
        }
        let raw = read_wav(&self.sampler.record(i).audio_path)?;
        let a = resample(&raw, self.sample_rate)?;
        if self.cache.len() >= CACHE_LIMIT {
            self.cache.clear();
        }
        self.cache.insert(i, a.clone());
        Ok(a)
    }

    /// Draws one example, resampling records when a draw yields silence or a
    /// too-short file.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<MixtureExample> {
        let mut last_err = None;
        for _ in 0..DRAW_RETRIES {
            match self.try_draw(rng) {
                Ok(ex) => return Ok(ex),
                Err(e @ (Error::SilentSource(_) | Error::InvalidInput(_))) => {
                    log::debug!("redrawing after: {e}");
                    last_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.unwrap_or_else(|| Error::invalid("mixture draw failed")))
    }

    fn try_draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<MixtureExample> {
        let policy = self.sampler.policy().clone();
        let (ids, pairing) = match policy.category {
            Category::Unison => (vec![self.sampler.sample_single(rng)], None),
            Category::Duet => {
                let d = self.sampler.sample_pair(rng);
                (vec![d.first, d.second], Some(d.kind))
            }
            Category::MainVsRest => {
                let [lo, hi] = policy.n_rest_range;
                let n_rest = rng.gen_range(lo..=hi);
                let (ids, kind) = self.sampler.sample_group(n_rest, rng);
                (ids, Some(kind))
            }
            Category::NSinging => unreachable!("rejected by policy validation"),
        };
        let audio = ids
            .iter()
            .map(|&i| self.audio(i))
            .collect::<Result<Vec<_>>>()?;
        let mut ex = match policy.category {
            Category::Unison => make_unison(&audio[0], &policy, rng)?,
            Category::Duet => make_duet(&audio[0], &audio[1], &policy, rng)?,
            _ => make_main_vs_rest(&audio[0], &audio[1..], &policy, rng)?,
        };
        ex.provenance.utterance_ids = ids
            .iter()
            .map(|&i| self.sampler.record(i).utterance_id.clone())
            .collect();
        ex.provenance.singer_ids = ids
            .iter()
            .map(|&i| self.sampler.record(i).singer_id.clone())
            .collect();
        ex.provenance.pairing = pairing;
        Ok(ex)
    }
}
