//! Full recognizers: encoder, bidirectional connector and one head.

use std::fmt;

use image::GrayImage;

use crate::autodiff::{Tape, Var};
use crate::decoders::heads::{ctc_greedy_decode, nar_decode};
use crate::decoders::{ctc, ArDecoder, AttnConfig, AttnDecoder, CtcDecoder, Decoded, NarDecoder, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{Binder, Init, ParamStore};
use crate::ssm::{BiMambaConnector, MambaConfig, ScanMode};
use crate::synth::io::to_ink;
use crate::tensor::{Float, Tensor};
use crate::vision::{EncoderConfig, VisionEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    MambaCtc,
    MambaAr,
    MambaNar,
    /// Attention decoder used only as the scaling counterpart.
    AttnArBaseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::MambaCtc, ModelKind::MambaAr, ModelKind::MambaNar, ModelKind::AttnArBaseline];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MambaCtc => "mamba-ctc",
            ModelKind::MambaAr => "mamba-ar",
            ModelKind::MambaNar => "mamba-nar",
            ModelKind::AttnArBaseline => "attn-ar-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }

    /// Whether the head can read multi-line paragraph images.
    pub fn supports_paragraphs(self) -> bool {
        matches!(self, ModelKind::MambaAr | ModelKind::AttnArBaseline)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    /// Decoder depth.
    pub layers: usize,
    /// NAR query count.
    pub t_max: usize,
    /// AR generation limit.
    pub max_len: usize,
    pub scan_mode: ScanMode,
    pub encoder: EncoderConfig,
    pub attn_heads: usize,
    pub attn_max_context: usize,
}

impl ModelConfig {
    pub fn preset(kind: ModelKind, preset: Preset) -> Self {
        match preset {
            Preset::Paper => ModelConfig {
                kind,
                d_model: 256,
                d_state: 16,
                expand: 2,
                layers: 4,
                t_max: 500,
                max_len: 500,
                scan_mode: ScanMode::Sequential,
                encoder: EncoderConfig::new(256),
                attn_heads: 4,
                attn_max_context: 4096,
            },
            Preset::Desk => ModelConfig {
                kind,
                d_model: 64,
                d_state: 16,
                expand: 2,
                layers: 4,
                t_max: 160,
                max_len: 160,
                scan_mode: ScanMode::Sequential,
                encoder: EncoderConfig {
                    channels: vec![8, 16, 32, 64, 64],
                    min_height: 32,
                    min_width: 64,
                    ..EncoderConfig::new(64)
                },
                attn_heads: 4,
                attn_max_context: 4096,
            },
        }
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig { d_model: self.d_model, d_state: self.d_state, expand: self.expand, scan_mode: self.scan_mode }
    }

    pub fn attention(&self) -> AttnConfig {
        AttnConfig {
            d_model: self.d_model,
            heads: self.attn_heads,
            layers: self.layers,
            max_context: self.attn_max_context,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.expand == 0 || self.layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.encoder.d_model() != self.d_model {
            return Err(Error::Config(format!(
                "encoder output channels {} differ from model dimension {}",
                self.encoder.d_model(),
                self.d_model
            )));
        }
        if self.t_max < 1 || self.max_len < 1 {
            return Err(Error::Config("t_max and max_len must be positive".into()));
        }
        self.encoder.validate()?;
        if self.kind == ModelKind::AttnArBaseline {
            self.attention().validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Ctc(CtcDecoder),
    Ar(ArDecoder),
    Nar(NarDecoder),
    Attn(AttnDecoder),
}

/// A recognizer with its parameters. Parameter creation order is fixed by
/// the configuration, so two models built from the same config and seed
/// are identical.
#[derive(Clone, Debug)]
pub struct OcrModel<T: Float> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub encoder: VisionEncoder,
    pub connector: BiMambaConnector,
    pub head: Head,
}

impl<T: Float> OcrModel<T> {
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let encoder = VisionEncoder::new(&mut store, &mut init, "encoder", cfg.encoder.clone())?;
        let connector = BiMambaConnector::new(&mut store, &mut init, "connector", cfg.mamba());
        let m = cfg.mamba();
        let head = match cfg.kind {
            ModelKind::MambaCtc => Head::Ctc(CtcDecoder::new(&mut store, &mut init, m, cfg.layers, &vocab)),
            ModelKind::MambaAr => Head::Ar(ArDecoder::new(&mut store, &mut init, m, cfg.layers, &vocab, cfg.max_len)),
            ModelKind::MambaNar => Head::Nar(NarDecoder::new(&mut store, &mut init, m, cfg.layers, &vocab, cfg.t_max)),
            ModelKind::AttnArBaseline => Head::Attn(AttnDecoder::new(&mut store, &mut init, cfg.attention(), vocab.size())?),
        };
        Ok(OcrModel { cfg, vocab, store, encoder, connector, head })
    }

    /// Visual sequence `h` (`L × D`).
    pub fn encode(&self, bx: &Binder<'_, T>, image: &Tensor<T>) -> Result<Var> {
        let (seq, _) = self.encoder.forward(bx, image)?;
        self.connector.forward(bx, seq)
    }

    /// Training loss for one image/transcript pair.
    pub fn loss(&self, bx: &Binder<'_, T>, image: &Tensor<T>, text: &str) -> Result<Var> {
        if text.contains('\n') && !self.cfg.kind.supports_paragraphs() {
            return Err(Error::Config(format!("{} reads single lines only", self.cfg.kind)));
        }
        let target = self.vocab.encode(text)?;
        let h = self.encode(bx, image)?;
        match &self.head {
            Head::Ctc(d) => d.loss(bx, h, &target),
            Head::Ar(d) => d.loss(bx, h, &target),
            Head::Nar(d) => d.loss(bx, h, &target),
            Head::Attn(_) => Err(Error::Usage("the attention baseline is inference-only".into())),
        }
    }

    /// Frames the encoder produces for an `h × w` image.
    pub fn frames(&self, h: usize, w: usize) -> usize {
        let (gh, gw) = self.cfg.encoder.grid_shape(h, w);
        gh * gw
    }

    /// Checks that the CTC head can align `text` to an `h × w` image.
    pub fn check_alignment(&self, h: usize, w: usize, text: &str) -> Result<()> {
        if self.cfg.kind != ModelKind::MambaCtc {
            return Ok(());
        }
        let target = self.vocab.encode(text)?;
        let frames = self.frames(h, w);
        let required = ctc::min_frames(&target);
        if frames < required {
            return Err(Error::InfeasibleAlignment { frames, required, target_len: target.len() });
        }
        Ok(())
    }

    pub fn visual_sequence(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bx = Binder::new(&tape, &self.store, false);
        let h = self.encode(&bx, image)?;
        Ok((*tape.value(h)).clone())
    }

    /// Greedy decoding with the head's canonical decoder.
    pub fn decode(&self, image: &Tensor<T>) -> Result<Decoded> {
        let tape = Tape::new();
        let bx = Binder::new(&tape, &self.store, false);
        let h = self.encode(&bx, image)?;
        match &self.head {
            Head::Ctc(d) => {
                let logits = tape.value(d.logits(&bx, h)?);
                Ok(Decoded { ids: ctc::greedy_path(&logits, self.vocab.blank())?, truncated: false })
            }
            Head::Ar(d) => d.generate(&self.store, &tape.value(h), self.cfg.max_len),
            Head::Nar(d) => nar_decode(&tape.value(d.logits(&bx, h)?), &self.vocab),
            Head::Attn(d) => {
                let v = &self.vocab;
                let (ids, truncated) = d.generate(
                    &self.store,
                    &tape.value(h),
                    v.sos(),
                    v.eos(),
                    &[v.blank(), v.pad(), v.sos()],
                    self.cfg.max_len,
                )?;
                Ok(Decoded { ids, truncated })
            }
        }
    }

    pub fn decode_image(&self, image: &GrayImage) -> Result<String> {
        Ok(self.decode(&to_ink(image))?.text(&self.vocab))
    }

    /// CTC frame logits, for callers that want the raw output.
    pub fn ctc_text(&self, logits: &Tensor<T>) -> Result<String> {
        ctc_greedy_decode(logits, &self.vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_line, GlyphSet};

    fn tiny(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_state: 4,
            layers: 2,
            t_max: 12,
            max_len: 12,
            encoder: EncoderConfig {
                channels: vec![4, 4, 8, 8, 16],
                min_height: 32,
                min_width: 32,
                ..EncoderConfig::new(16)
            },
            ..ModelConfig::preset(kind, Preset::Desk)
        }
    }

    #[test]
    fn every_kind_builds_and_decodes() {
        let img = to_ink::<f32>(&render_line("abc", &GlyphSet::builtin(3), 32).unwrap());
        for kind in ModelKind::ALL {
            let m = OcrModel::<f32>::new(tiny(kind), Vocabulary::default_latin(), 1).unwrap();
            let out = m.decode(&img).unwrap();
            assert!(out.ids.iter().all(|&id| m.vocab.is_char_id(id)));
            let tape = Tape::new();
            let bx = Binder::new(&tape, &m.store, true);
            let loss = m.loss(&bx, &img, "ab");
            match kind {
                ModelKind::AttnArBaseline => assert!(matches!(loss, Err(Error::Usage(_)))),
                _ => assert!(tape.value(loss.unwrap()).item().is_finite()),
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = OcrModel::<f32>::new(tiny(ModelKind::MambaAr), Vocabulary::default_latin(), 5).unwrap();
        let b = OcrModel::<f32>::new(tiny(ModelKind::MambaAr), Vocabulary::default_latin(), 5).unwrap();
        for (p, q) in a.store.params().iter().zip(b.store.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn line_heads_reject_paragraphs() {
        let m = OcrModel::<f32>::new(tiny(ModelKind::MambaCtc), Vocabulary::default_latin(), 1).unwrap();
        let tape = Tape::new();
        let bx = Binder::new(&tape, &m.store, true);
        let img = Tensor::zeros([64, 64]);
        assert!(matches!(m.loss(&bx, &img, "a\nb"), Err(Error::Config(_))));
        assert!(matches!(m.check_alignment(32, 32, "abc"), Err(Error::InfeasibleAlignment { frames: 2, .. })));
    }
}
