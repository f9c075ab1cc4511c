//! Training loop: per-sample tapes, a batch computed in parallel and reduced
//! in a fixed order, global-norm clipping and AdamW.

use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{CurriculumSettings, RunConfig, TrainSettings};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, Normalize};
use crate::model::OcrModel;
use crate::nn::Binder;
use crate::optim::{clip_global_norm, AdamW};
use crate::parallel;
use crate::synth::augment::{augment, AugmentSpec};
use crate::synth::dataset::{load_sentences, synth_sample, DatasetConfig};
use crate::synth::{load_manifest, read_pgm, to_ink};
use crate::tensor::Tensor;

const BEST_CER: &str = "best_cer";

#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub image: GrayImage,
    pub text: String,
}

impl LoadedSample {
    pub fn lines(&self) -> usize {
        self.text.split('\n').count()
    }
}

pub fn load_samples(manifest: &Path) -> Result<Vec<LoadedSample>> {
    load_manifest(manifest)?
        .into_iter()
        .map(|s| {
            let id = s.image.file_stem().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(LoadedSample { id, image: read_pgm(&s.image)?, text: s.transcript })
        })
        .collect()
}

/// Greedy-decodes every sample and scores it.
pub fn evaluate(model: &OcrModel<f32>, samples: &[LoadedSample], norm: Normalize) -> Result<EvalReport> {
    let hyps: Vec<Result<String>> =
        parallel::install(|| samples.par_iter().map(|s| model.decode_image(&s.image)).collect());
    let mut report = EvalReport::new();
    for (s, h) in samples.iter().zip(hyps) {
        report.add(s.id.clone(), &s.text, &h?, norm)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step { step: u64, loss: f64, grad_norm: f64 },
    Eval { step: u64, cer: f64, best: bool },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last_loss: f64,
    pub best_cer: Option<f64>,
    /// Snapshot taken at the best evaluation.
    pub best: Option<Checkpoint>,
    pub reached_target: bool,
}

type SampleGrad = (f64, Vec<Option<Tensor<f32>>>);

fn sample_grad(model: &OcrModel<f32>, image: &GrayImage, text: &str) -> Result<SampleGrad> {
    let tape = Tape::new();
    let bx = Binder::new(&tape, &model.store, true);
    let loss = model.loss(&bx, &to_ink(image), text)?;
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    Ok((value, bx.param_grads(&mut grads)))
}

pub struct Trainer {
    pub model: OcrModel<f32>,
    pub opt: AdamW<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub best_cer: Option<f64>,
    settings: TrainSettings,
    curriculum: Option<CurriculumSettings>,
    augment: Option<AugmentSpec>,
    synth: DatasetConfig,
    sentences: Vec<String>,
    norm: Normalize,
    train: Vec<LoadedSample>,
    eval: Vec<LoadedSample>,
}

impl Trainer {
    pub fn new(run: &RunConfig, train: Vec<LoadedSample>, eval: Vec<LoadedSample>) -> Result<Self> {
        let vocab = crate::decoders::Vocabulary::default_latin();
        let model = OcrModel::new(run.model.clone(), vocab, run.train.seed)?;
        let opt = AdamW::new(run.train.optim, &model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        rng.set_stream(1);
        Self::assemble(run, model, opt, rng, 0, None, train, eval)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(run: &RunConfig, ckpt: &Checkpoint, train: Vec<LoadedSample>, eval: Vec<LoadedSample>) -> Result<Self> {
        if ckpt.model != run.model {
            return Err(Error::CheckpointMismatch("model configuration differs from the checkpoint".into()));
        }
        let model = ckpt.restore_model()?;
        let opt = match ckpt.restore_optimizer(run.train.optim, &model)? {
            Some(o) => o,
            None => AdamW::new(run.train.optim, &model.store),
        };
        let best = match ckpt.meta(BEST_CER) {
            Some(v) => Some(v.parse().map_err(|_| Error::Integrity(format!("bad {BEST_CER} {v:?}")))?),
            None => None,
        };
        Self::assemble(run, model, opt, ckpt.rng.restore(), ckpt.step, best, train, eval)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        run: &RunConfig,
        model: OcrModel<f32>,
        opt: AdamW<f32>,
        rng: ChaCha8Rng,
        step: u64,
        best_cer: Option<f64>,
        train: Vec<LoadedSample>,
        eval: Vec<LoadedSample>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        for s in &train {
            if s.text.contains('\n') && !model.cfg.kind.supports_paragraphs() {
                return Err(Error::Config(format!("{}: {} reads single lines only", s.id, model.cfg.kind)));
            }
            model.check_alignment(s.image.height() as usize, s.image.width() as usize, &s.text)?;
        }
        let sentences = match &run.curriculum {
            Some(c) if c.synthetic_mix > 0.0 => load_sentences(run.data.corpus.as_deref(), &model.vocab)?,
            _ => Vec::new(),
        };
        let mut synth = run.data.clone();
        synth.augment = None;
        Ok(Trainer {
            model,
            opt,
            rng,
            step,
            best_cer,
            settings: run.train.clone(),
            curriculum: run.curriculum.clone(),
            augment: run.train.augment.then(|| run.augment.clone()),
            synth,
            sentences,
            norm: run.eval,
            train,
            eval,
        })
    }

    /// Lines allowed at the current step under the curriculum.
    pub fn allowed_lines(&self) -> usize {
        match &self.curriculum {
            None => usize::MAX,
            Some(c) if c.ramp_steps == 0 => c.max_lines,
            Some(c) => {
                let frac = (self.step as f64 / c.ramp_steps as f64).min(1.0);
                1 + ((c.max_lines - 1) as f64 * frac).floor() as usize
            }
        }
    }

    /// Draws the next batch. All randomness is consumed here, on one thread.
    fn draw_batch(&mut self) -> Result<(Vec<(GrayImage, String)>, Vec<usize>)> {
        let allowed = self.allowed_lines();
        let mut eligible: Vec<usize> = (0..self.train.len()).filter(|&i| self.train[i].lines() <= allowed).collect();
        if eligible.is_empty() {
            let fewest = self.train.iter().map(LoadedSample::lines).min().unwrap_or(1);
            eligible = (0..self.train.len()).filter(|&i| self.train[i].lines() == fewest).collect();
        }
        let mix = self.curriculum.as_ref().map_or(0.0, |c| c.synthetic_mix);
        let mut batch = Vec::with_capacity(self.settings.batch_size);
        let mut ids = Vec::with_capacity(self.settings.batch_size);
        for _ in 0..self.settings.batch_size {
            let (img, text, id) = if mix > 0.0 && self.rng.random::<f64>() < mix {
                let cfg = DatasetConfig { max_lines: allowed.min(self.curriculum.as_ref().unwrap().max_lines), ..self.synth.clone() };
                let seed: u64 = self.rng.random();
                let (text, img) = synth_sample(&cfg, &self.sentences, seed)?;
                (img, text, usize::MAX)
            } else {
                let i = eligible[self.rng.random_range(0..eligible.len())];
                (self.train[i].image.clone(), self.train[i].text.clone(), i)
            };
            let img = match &self.augment {
                Some(spec) => augment(&img, &spec.with_seed(self.rng.random())),
                None => img,
            };
            batch.push((img, text));
            ids.push(id);
        }
        Ok((batch, ids))
    }

    /// One optimizer step; returns the mean loss and the pre-clip norm.
    pub fn train_step(&mut self) -> Result<(f64, f64)> {
        let (batch, ids) = self.draw_batch()?;
        let model = &self.model;
        let results: Vec<Result<SampleGrad>> =
            parallel::install(|| batch.par_iter().map(|(img, text)| sample_grad(model, img, text)).collect());
        let nan = |s: &Self| Error::NanLoss { step: s.step + 1, lr: s.settings.optim.lr, batch: ids.clone() };
        let mut total = 0.0;
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; self.model.store.len()];
        for r in results {
            let (loss, grads) = match r {
                Err(Error::NonFinite { .. }) => return Err(nan(self)),
                r => r?,
            };
            total += loss;
            for (a, g) in acc.iter_mut().zip(grads) {
                match (a.as_mut(), g) {
                    (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += *y),
                    (None, Some(g)) => *a = Some(g),
                    _ => {}
                }
            }
        }
        let n = batch.len() as f32;
        acc.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x /= n));
        let loss = total / batch.len() as f64;
        let norm = clip_global_norm(&mut acc, self.settings.clip);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(nan(self));
        }
        self.opt.update(&mut self.model.store, &acc)?;
        self.step += 1;
        Ok((loss, norm))
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.model, &self.eval, self.norm)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = self.best_cer.map(|c| vec![(BEST_CER.to_string(), format!("{c:?}"))]).unwrap_or_default();
        Checkpoint::capture(&self.model, Some(&self.opt), RngState::of(&self.rng), self.step, meta)
    }

    /// Trains until `max_steps` or until an evaluation reaches the target CER.
    pub fn run(&mut self, mut log: impl FnMut(&TrainEvent)) -> Result<TrainOutcome> {
        let mut out = TrainOutcome { steps: self.step, last_loss: f64::NAN, best_cer: self.best_cer, best: None, reached_target: false };
        while self.step < self.settings.max_steps {
            let (loss, grad_norm) = self.train_step()?;
            out.last_loss = loss;
            log(&TrainEvent::Step { step: self.step, loss, grad_norm });
            if self.eval.is_empty() || (!self.step.is_multiple_of(self.settings.eval_every) && self.step != self.settings.max_steps) {
                continue;
            }
            let cer = self.evaluate()?.cer()?;
            let best = self.best_cer.is_none_or(|b| cer < b);
            if best {
                self.best_cer = Some(cer);
                out.best = Some(self.checkpoint());
            }
            log(&TrainEvent::Eval { step: self.step, cer, best });
            if self.settings.target_cer.is_some_and(|t| cer <= t) {
                out.reached_target = true;
                break;
            }
        }
        out.steps = self.step;
        out.best_cer = self.best_cer;
        Ok(out)
    }
}
