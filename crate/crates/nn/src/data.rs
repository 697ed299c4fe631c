//! Batch sources for training. A batch is a pure function of the step
//! index, so worker count and scheduling never change what a step sees.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use candle_core::{DType, Device, Tensor};
use medleysep_core::corpus::{Category, Manifest};
use medleysep_core::mixer::{DynamicMixer, MixPolicy, MixtureExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::batch_tensor;
use crate::error::{Error, Result};

/// One training batch, all examples from the same task arm.
#[derive(Debug, Clone)]
pub struct Batch {
    pub step: u64,
    pub category: Category,
    /// `[B, L]`
    pub mixture: Tensor,
    /// `[B, 2, L]`; for main_vs_rest `[main, rest_sum]`.
    pub targets: Tensor,
    pub examples: Vec<MixtureExample>,
}

impl Batch {
    pub fn from_examples(step: u64, examples: Vec<MixtureExample>, dtype: DType) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::config("a batch needs at least one example"))?;
        let category = first.category;
        if examples.iter().any(|e| e.category != category || e.sources.len() != 2) {
            return Err(Error::config("batch examples must share a category and have two targets"));
        }
        let dev = Device::Cpu;
        let mixes: Vec<_> = examples.iter().map(|e| &e.mixture).collect();
        let mixture = batch_tensor(&mixes, dtype, &dev)?;
        let firsts: Vec<_> = examples.iter().map(|e| &e.sources[0]).collect();
        let seconds: Vec<_> = examples.iter().map(|e| &e.sources[1]).collect();
        let targets = Tensor::stack(&[batch_tensor(&firsts, dtype, &dev)?, batch_tensor(&seconds, dtype, &dev)?], 1)?;
        Ok(Self {
            step,
            category,
            mixture,
            targets,
            examples,
        })
    }
}

pub trait BatchSource: Send {
    fn batch(&mut self, step: u64) -> Result<Batch>;
    /// An independent copy for another worker thread.
    fn fork(&self) -> Result<Box<dyn BatchSource>>;
}

/// Cycles through a fixed example list.
#[derive(Debug, Clone)]
pub struct FixedSource {
    examples: Vec<MixtureExample>,
    batch_size: usize,
}

impl FixedSource {
    pub fn new(examples: Vec<MixtureExample>, batch_size: usize) -> Result<Self> {
        if examples.is_empty() || batch_size == 0 {
            return Err(Error::config("fixed source needs examples and a positive batch size"));
        }
        Ok(Self { examples, batch_size })
    }

    pub fn examples(&self) -> &[MixtureExample] {
        &self.examples
    }
}

impl BatchSource for FixedSource {
    fn batch(&mut self, step: u64) -> Result<Batch> {
        let n = self.examples.len();
        let start = (step as usize).wrapping_mul(self.batch_size) % n;
        let ex = (0..self.batch_size)
            .map(|i| self.examples[(start + i) % n].clone())
            .collect();
        Batch::from_examples(step, ex, DType::F32)
    }

    fn fork(&self) -> Result<Box<dyn BatchSource>> {
        Ok(Box::new(self.clone()))
    }
}

/// Dynamic mixing from a manifest. Each step seeds its own RNG stream,
/// picks a task arm by weight, then draws every example of the batch.
pub struct DynamicSource {
    manifest: Manifest,
    arms: Vec<(Category, f64)>,
    policy: MixPolicy,
    sample_rate: u32,
    batch_size: usize,
    seed: u64,
    mixers: BTreeMap<Category, DynamicMixer>,
}

impl DynamicSource {
    pub fn new(
        manifest: Manifest,
        arms: &BTreeMap<Category, f64>,
        policy: MixPolicy,
        sample_rate: u32,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let arms: Vec<(Category, f64)> = arms.iter().filter(|(_, w)| **w > 0.0).map(|(c, w)| (*c, *w)).collect();
        if arms.is_empty() {
            return Err(Error::config("task arms need at least one positive weight"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let mut mixers = BTreeMap::new();
        for (cat, _) in &arms {
            let p = MixPolicy {
                category: *cat,
                ..policy.clone()
            };
            mixers.insert(*cat, DynamicMixer::new(manifest.clone(), p, sample_rate)?);
        }
        Ok(Self {
            manifest,
            arms,
            policy,
            sample_rate,
            batch_size,
            seed,
            mixers,
        })
    }

    fn pick_arm<R: Rng>(&self, rng: &mut R) -> Category {
        let total: f64 = self.arms.iter().map(|(_, w)| w).sum();
        let mut u = rng.gen_range(0.0..total);
        for (c, w) in &self.arms {
            if u < *w {
                return *c;
            }
            u -= w;
        }
        self.arms.last().expect("non-empty").0
    }
}

impl BatchSource for DynamicSource {
    fn batch(&mut self, step: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let arm = self.pick_arm(&mut rng);
        let mixer = self.mixers.get_mut(&arm).expect("mixer per arm");
        let examples = (0..self.batch_size)
            .map(|_| mixer.draw(&mut rng))
            .collect::<medleysep_core::Result<Vec<_>>>()?;
        Batch::from_examples(step, examples, DType::F32)
    }

    fn fork(&self) -> Result<Box<dyn BatchSource>> {
        let arms = self.arms.iter().copied().collect();
        Ok(Box::new(DynamicSource::new(
            self.manifest.clone(),
            &arms,
            self.policy.clone(),
            self.sample_rate,
            self.batch_size,
            self.seed,
        )?))
    }
}

/// Builds batches `start..end` ahead of the optimizer on worker threads.
/// Step `k` is produced by worker `(k - start) % workers` and consumed in
/// order, so output is independent of thread timing.
pub struct Prefetcher {
    inline: Option<Box<dyn BatchSource>>,
    receivers: Vec<Receiver<Result<Batch>>>,
    handles: Vec<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
    start: u64,
}

impl Prefetcher {
    pub fn new(source: &dyn BatchSource, workers: usize, depth: usize, start: u64, end: u64) -> Result<Self> {
        let stop = Arc::new(AtomicBool::new(false));
        if workers == 0 {
            return Ok(Self {
                inline: Some(source.fork()?),
                receivers: Vec::new(),
                handles: Vec::new(),
                stop,
                start,
            });
        }
        let mut receivers = Vec::new();
        let mut handles = Vec::new();
        for w in 0..workers {
            let (tx, rx) = sync_channel(depth.max(1));
            let mut src = source.fork()?;
            let stop = stop.clone();
            let first = start + w as u64;
            handles.push(std::thread::spawn(move || {
                let mut k = first;
                while k < end && !stop.load(Ordering::Relaxed) {
                    if tx.send(src.batch(k)).is_err() {
                        break;
                    }
                    k += workers as u64;
                }
            }));
            receivers.push(rx);
        }
        Ok(Self {
            inline: None,
            receivers,
            handles,
            stop,
            start,
        })
    }

    pub fn next(&mut self, step: u64) -> Result<Batch> {
        if let Some(src) = self.inline.as_mut() {
            return src.batch(step);
        }
        let w = ((step - self.start) % self.receivers.len() as u64) as usize;
        let batch = self.receivers[w]
            .recv()
            .map_err(|_| Error::Aborted(format!("data worker {w} exited before step {step}")))??;
        debug_assert_eq!(batch.step, step);
        Ok(batch)
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.receivers.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
