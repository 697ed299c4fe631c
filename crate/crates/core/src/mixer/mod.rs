//! On-the-fly construction of multi-singing training mixtures.
//!
//! Three arms: unison (a chunk mixed with a pitch/formant-shifted copy of
//! itself), duet (two independent chunks), and main-vs-rest (one chunk kept
//! louder than the sum of one to three others, returned as two sources).
//! Every example satisfies `mixture == sum(sources)` bit for bit because the
//! mixture is computed as that sum.

mod sampling;
mod transform;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{db_to_gain, loudness, loudness_of, sum_buffers, AudioBuffer};
use crate::corpus::Category;
use crate::error::{Error, Result};

pub use sampling::{sample_pair, DynamicMixer, PairDraw, PairKind, Sampler};
pub use transform::{
    formant_shift, formant_warp, pitch_shift, pitch_shift_unchecked, true_envelope,
    MAX_SHIFT_CENTS,
};

/// Chunks quieter than this are treated as silence.
pub const SILENCE_DB: f64 = -60.0;
/// Largest sample magnitude allowed in an emitted example.
pub const PEAK_LIMIT: f64 = 0.99;
const CHUNK_RETRIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixPolicy {
    pub category: Category,
    pub p_same_singer: f64,
    pub p_same_song: f64,
    pub p_speech: f64,
    pub n_rest_range: [usize; 2],
    pub detune_cents_range: [f64; 2],
    pub octave_choices: Vec<f64>,
    pub formant_ratio_range: [f64; 2],
    pub gain_range_db: [f64; 2],
    pub main_margin_db: f64,
    pub chunk_seconds: f64,
    /// RMS level every chunk is brought to before gains are drawn; `None`
    /// leaves chunks at their recorded level.
    pub normalize_db: Option<f64>,
}

impl Default for MixPolicy {
    fn default() -> Self {
        Self {
            category: Category::Duet,
            p_same_singer: 0.1,
            p_same_song: 0.1,
            p_speech: 0.3,
            n_rest_range: [1, 3],
            detune_cents_range: [-20.0, 20.0],
            octave_choices: vec![-1200.0, 0.0, 1200.0],
            formant_ratio_range: [0.9, 1.1],
            gain_range_db: [-5.0, 0.0],
            main_margin_db: 1.0,
            chunk_seconds: 3.0,
            normalize_db: Some(-20.0),
        }
    }
}

impl MixPolicy {
    pub fn with_category(category: Category) -> Self {
        Self {
            category,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.category == Category::NSinging {
            return Err(Error::config("mixer supports unison, duet and main_vs_rest only"));
        }
        for (name, p) in [
            ("p_same_singer", self.p_same_singer),
            ("p_same_song", self.p_same_song),
            ("p_speech", self.p_speech),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        let [lo, hi] = self.n_rest_range;
        if lo < 1 || hi > 3 || lo > hi {
            return Err(Error::config(format!(
                "n_rest_range {:?} must lie within [1, 3]",
                self.n_rest_range
            )));
        }
        let [dlo, dhi] = self.detune_cents_range;
        if dlo < -20.0 || dhi > 20.0 || dlo > dhi {
            return Err(Error::config(format!(
                "detune_cents_range {:?} must lie within [-20, 20]",
                self.detune_cents_range
            )));
        }
        if self.octave_choices.is_empty()
            || self
                .octave_choices
                .iter()
                .any(|c| ![-1200.0, 0.0, 1200.0].contains(c))
        {
            return Err(Error::config("octave_choices must be drawn from {-1200, 0, 1200}"));
        }
        let [flo, fhi] = self.formant_ratio_range;
        if !(flo > 0.0) || flo > fhi {
            return Err(Error::config(format!(
                "invalid formant_ratio_range {:?}",
                self.formant_ratio_range
            )));
        }
        let [glo, ghi] = self.gain_range_db;
        if glo > ghi || !glo.is_finite() || !ghi.is_finite() {
            return Err(Error::config(format!("invalid gain_range_db {:?}", self.gain_range_db)));
        }
        if !(self.main_margin_db > 0.0) {
            return Err(Error::config("main_margin_db must be positive"));
        }
        if !(self.chunk_seconds > 0.0) {
            return Err(Error::config("chunk_seconds must be positive"));
        }
        Ok(())
    }

    pub fn chunk_len(&self, sample_rate: u32) -> usize {
        ((self.chunk_seconds * sample_rate as f64).round() as usize).max(1)
    }

    fn draw_gain_db<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        uniform(rng, self.gain_range_db)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    PitchShift { source: usize, cents: f64 },
    FormantShift { source: usize, ratio: f64 },
    /// Extra gain applied to the main source to hold the loudness margin.
    MarginBoost { db: f64 },
    /// Uniform gain applied to every source to keep peaks below the limit.
    PeakLimit { gain: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub utterance_ids: Vec<String>,
    pub singer_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing: Option<PairKind>,
    /// Chunk start (samples) within each input.
    pub offsets: Vec<usize>,
    /// Random gain drawn for each input, before margin and peak handling.
    pub gains_db: Vec<f64>,
    pub transforms: Vec<Transform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub mixture: AudioBuffer,
    pub sources: Vec<AudioBuffer>,
    pub category: Category,
    pub provenance: Provenance,
}

impl MixtureExample {
    /// Sums the sources into the mixture after limiting peaks.
    fn assemble(
        mut sources: Vec<AudioBuffer>,
        category: Category,
        mut provenance: Provenance,
    ) -> Result<Self> {
        let mixture = sum_buffers(&sources)?;
        let peak = sources
            .iter()
            .map(AudioBuffer::peak)
            .fold(mixture.peak(), f64::max);
        if peak > PEAK_LIMIT {
            let gain = PEAK_LIMIT / peak;
            sources = sources.iter().map(|s| s.scaled(gain)).collect();
            provenance.transforms.push(Transform::PeakLimit { gain });
        }
        let mixture = sum_buffers(&sources)?;
        Ok(Self {
            mixture,
            sources,
            category,
            provenance,
        })
    }
}

/// Scales a chunk to the policy's RMS level, leaving silence untouched.
pub fn normalize_chunk(x: &AudioBuffer, policy: &MixPolicy) -> AudioBuffer {
    match policy.normalize_db {
        Some(target) => {
            let level = loudness(x);
            if level > SILENCE_DB {
                x.scaled(db_to_gain(target - level))
            } else {
                x.clone()
            }
        }
        None => x.clone(),
    }
}

/// Picks a chunk offset, preferring non-silent chunks when `avoid_silence`.
fn draw_offset<R: Rng + ?Sized>(
    x: &AudioBuffer,
    len: usize,
    avoid_silence: bool,
    rng: &mut R,
) -> Result<usize> {
    if x.len() < len {
        return Err(Error::invalid(format!(
            "source of {} samples is shorter than the {len}-sample chunk",
            x.len()
        )));
    }
    let span = x.len() - len;
    let mut offset = rng.gen_range(0..=span);
    if avoid_silence {
        for _ in 0..CHUNK_RETRIES {
            if loudness_of(&x.samples()[offset..offset + len]) > SILENCE_DB {
                return Ok(offset);
            }
            offset = rng.gen_range(0..=span);
        }
        if loudness_of(&x.samples()[offset..offset + len]) <= SILENCE_DB {
            return Err(Error::SilentSource(format!(
                "no non-silent {len}-sample chunk found"
            )));
        }
    }
    Ok(offset)
}

/// All random choices behind one unison example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnisonDraw {
    pub offset: usize,
    pub octave_cents: f64,
    pub detune_cents: f64,
    pub formant_ratio: f64,
    pub gains_db: [f64; 2],
}

impl UnisonDraw {
    pub fn sample<R: Rng + ?Sized>(
        x: &AudioBuffer,
        policy: &MixPolicy,
        rng: &mut R,
    ) -> Result<Self> {
        let len = policy.chunk_len(x.sample_rate());
        let offset = draw_offset(x, len, true, rng)?;
        let octave_cents = policy.octave_choices[rng.gen_range(0..policy.octave_choices.len())];
        Ok(Self {
            offset,
            octave_cents,
            detune_cents: uniform(rng, policy.detune_cents_range),
            formant_ratio: uniform(rng, policy.formant_ratio_range),
            gains_db: [policy.draw_gain_db(rng), policy.draw_gain_db(rng)],
        })
    }
}

pub fn make_unison<R: Rng + ?Sized>(
    x: &AudioBuffer,
    policy: &MixPolicy,
    rng: &mut R,
) -> Result<MixtureExample> {
    let draw = UnisonDraw::sample(x, policy, rng)?;
    make_unison_with(x, policy, &draw)
}

/// Unison example for a fixed draw: the chunk and a shifted copy of it.
/// Only the second copy is transformed.
pub fn make_unison_with(
    x: &AudioBuffer,
    policy: &MixPolicy,
    draw: &UnisonDraw,
) -> Result<MixtureExample> {
    let len = policy.chunk_len(x.sample_rate());
    let chunk = x.slice(draw.offset, len)?;
    let cents = draw.octave_cents + draw.detune_cents;
    let shifted = formant_shift(&pitch_shift(&chunk, cents)?, draw.formant_ratio)?;
    let first = normalize_chunk(&chunk, policy).scaled(db_to_gain(draw.gains_db[0]));
    let second = normalize_chunk(&shifted, policy).scaled(db_to_gain(draw.gains_db[1]));
    let provenance = Provenance {
        offsets: vec![draw.offset],
        gains_db: draw.gains_db.to_vec(),
        transforms: vec![
            Transform::PitchShift { source: 1, cents },
            Transform::FormantShift {
                source: 1,
                ratio: draw.formant_ratio,
            },
        ],
        ..Default::default()
    };
    MixtureExample::assemble(vec![first, second], Category::Unison, provenance)
}

/// Two gain-scaled chunks, trimmed to the shorter input or the chunk length.
pub fn make_duet<R: Rng + ?Sized>(
    a: &AudioBuffer,
    b: &AudioBuffer,
    policy: &MixPolicy,
    rng: &mut R,
) -> Result<MixtureExample> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::shape("duet sources have different sample rates"));
    }
    let len = policy.chunk_len(a.sample_rate()).min(a.len()).min(b.len());
    let oa = draw_offset(a, len, true, rng)?;
    let ob = draw_offset(b, len, true, rng)?;
    let gains = [policy.draw_gain_db(rng), policy.draw_gain_db(rng)];
    let sources = vec![
        normalize_chunk(&a.slice(oa, len)?, policy).scaled(db_to_gain(gains[0])),
        normalize_chunk(&b.slice(ob, len)?, policy).scaled(db_to_gain(gains[1])),
    ];
    let provenance = Provenance {
        offsets: vec![oa, ob],
        gains_db: gains.to_vec(),
        ..Default::default()
    };
    MixtureExample::assemble(sources, Category::Duet, provenance)
}

/// Returns `[main, rest_sum]` with the main source at least
/// `main_margin_db` louder than the rest sum.
pub fn make_main_vs_rest<R: Rng + ?Sized>(
    main: &AudioBuffer,
    rest: &[AudioBuffer],
    policy: &MixPolicy,
    rng: &mut R,
) -> Result<MixtureExample> {
    if rest.is_empty() || rest.len() > 3 {
        return Err(Error::invalid(format!(
            "main_vs_rest needs 1 to 3 rest sources, got {}",
            rest.len()
        )));
    }
    let rate = main.sample_rate();
    if rest.iter().any(|r| r.sample_rate() != rate) {
        return Err(Error::shape("main_vs_rest sources have different sample rates"));
    }
    let len = policy.chunk_len(rate);
    let main_offset = draw_offset(main, len, true, rng)?;
    let main_chunk = normalize_chunk(&main.slice(main_offset, len)?, policy);

    let mut offsets = vec![main_offset];
    let mut gains_db = vec![policy.draw_gain_db(rng)];
    let mut scaled_rest = Vec::with_capacity(rest.len());
    for r in rest {
        let o = draw_offset(r, len, false, rng)?;
        let g = policy.draw_gain_db(rng);
        scaled_rest.push(normalize_chunk(&r.slice(o, len)?, policy).scaled(db_to_gain(g)));
        offsets.push(o);
        gains_db.push(g);
    }
    let rest_sum = sum_buffers(&scaled_rest)?;
    let rest_level = loudness(&rest_sum);

    let mut transforms = Vec::new();
    let mut main_db = gains_db[0];
    let mut main_scaled = main_chunk.scaled(db_to_gain(main_db));
    let required = rest_level + policy.main_margin_db;
    let mut boost_total = 0.0;
    // Boosting is repeated because rounding can leave the level a hair short.
    while loudness(&main_scaled) < required {
        let boost = required - loudness(&main_scaled) + 1e-6;
        boost_total += boost;
        main_db += boost;
        main_scaled = main_chunk.scaled(db_to_gain(main_db));
    }
    if boost_total > 0.0 {
        transforms.push(Transform::MarginBoost { db: boost_total });
    }
    let provenance = Provenance {
        offsets,
        gains_db,
        transforms,
        ..Default::default()
    };
    MixtureExample::assemble(vec![main_scaled, rest_sum], Category::MainVsRest, provenance)
}
