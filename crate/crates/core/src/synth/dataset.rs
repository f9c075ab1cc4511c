use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decoders::Vocabulary;
use crate::error::{Error, Result};
use crate::parallel;
use crate::synth::augment::{augment, AugmentSpec};
use crate::synth::glyphs::GlyphSet;
use crate::synth::io::{write_manifest, write_pgm, Sample};
use crate::synth::render::{render_line, render_paragraph};

/// Sentences in the style of a 19th-century French newspaper.
pub const SENTENCE_POOL: &[&str] = &[
    "Le conseil municipal s'est réuni hier soir sous la présidence du maire.",
    "On annonce l'arrivée prochaine du nouveau préfet dans notre ville.",
    "La récolte des blés promet d'être abondante cette année.",
    "Le marché aux bestiaux de jeudi a été très fréquenté.",
    "Une violente tempête a causé de grands dégâts sur la côte.",
    "Le prix du pain reste fixé à trente centimes le kilogramme.",
    "Les élèves de l'école communale ont donné une fête charmante.",
    "Le chemin de fer sera prolongé jusqu'à la frontière avant l'hiver.",
    "Un incendie s'est déclaré dans la nuit de samedi à dimanche.",
    "La société de musique donnera un concert sur la place publique.",
    "Les vendanges ont commencé dans tous les villages de la vallée.",
    "Le tribunal a prononcé hier son jugement dans l'affaire du moulin.",
    "On nous écrit de Luxembourg que la foire a été fort animée.",
    "Les députés ont voté le budget après une longue séance.",
    "La neige est tombée en abondance sur les hauteurs des Ardennes.",
    "Le bateau à vapeur reprendra son service dès le mois de mars.",
    "Une souscription est ouverte au profit des familles éprouvées.",
    "Le docteur recommande de faire bouillir l'eau avant de la boire.",
    "Les ouvriers de la filature réclament une augmentation de salaire.",
    "La gendarmerie recherche un voleur de chevaux signalé à Diekirch.",
    "Le nouveau pont sur la Moselle sera inauguré le premier dimanche de mai.",
    "Avis aux cultivateurs: la vente des engrais aura lieu mardi prochain.",
    "La bibliothèque publique est ouverte tous les jours sauf le lundi.",
    "Le théâtre donnera ce soir une comédie en trois actes.",
    "Mlle Müller a obtenu le premier prix de piano au conservatoire.",
    "Le garçon de ferme a été blessé par une voiture chargée de foin.",
    "On signale une crue subite de l'Alzette près du faubourg du Grund.",
    "Le pèlerinage annuel attirera cette année plus de dix mille fidèles.",
    "La commission des hospices se réunira le 12 à deux heures.",
    "Prière de déposer les annonces au bureau avant midi.",
    "Le cours des grains est resté ferme au marché d'Ettelbruck.",
    "Les enfants ont reçu des livres et des jouets à la distribution des prix.",
    "Une locomotive a déraillé près de la gare sans faire de victimes.",
    "Le club de gymnastique prépare sa grande fête fédérale.",
    "La poste recevra désormais les colis jusqu'à sept heures du soir.",
    "Le maître d'école a été décoré pour ses quarante années de service.",
    "Des pluies continuelles retardent la moisson dans le canton.",
    "Le nouveau règlement sur la chasse entrera en vigueur en août.",
    "La compagnie des eaux annonce des travaux dans la rue principale.",
    "Un aéronaute a survolé la ville hier après-midi, à la grande joie des curieux.",
];

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub out_dir: PathBuf,
    pub samples: usize,
    /// Train, valid, test fractions.
    pub split: (f64, f64, f64),
    pub seed: u64,
    pub glyph_scale: usize,
    pub line_height: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    /// Lines per sample are drawn uniformly from `1..=max_lines`.
    pub max_lines: usize,
    pub line_spacing: usize,
    pub augment: Option<AugmentSpec>,
    /// One sentence per line; the built-in pool when absent.
    pub corpus: Option<PathBuf>,
}

impl DatasetConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        DatasetConfig {
            out_dir: out_dir.into(),
            samples: 100,
            split: (0.8, 0.1, 0.1),
            seed: 0,
            glyph_scale: 4,
            line_height: 32,
            min_chars: 4,
            max_chars: 24,
            max_lines: 1,
            line_spacing: 4,
            augment: None,
            corpus: None,
        }
    }

    /// `(train, valid, test)` counts; the test split absorbs rounding.
    pub fn split_counts(&self) -> Result<(usize, usize, usize)> {
        let (a, b, c) = self.split;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {a}/{b}/{c} must be non-negative and sum to 1")));
        }
        let train = (self.samples as f64 * a).round() as usize;
        let valid = ((self.samples as f64 * b).round() as usize).min(self.samples - train);
        Ok((train, valid, self.samples - train - valid))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub manifests: [PathBuf; 3],
}

/// Random word window from `sentences` with `min..=max` characters.
pub fn sample_text(rng: &mut ChaCha8Rng, sentences: &[String], min_chars: usize, max_chars: usize) -> String {
    let s = &sentences[rng.random_range(0..sentences.len())];
    let words: Vec<&str> = s.split_whitespace().collect();
    let start = rng.random_range(0..words.len());
    let mut out = String::new();
    for w in &words[start..] {
        let extra = if out.is_empty() { w.chars().count() } else { w.chars().count() + 1 };
        if out.chars().count() + extra > max_chars {
            break;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(w);
    }
    if out.chars().count() < min_chars {
        // single long word or short tail: fall back to a character window
        let chars: Vec<char> = s.chars().collect();
        let len = max_chars.min(chars.len());
        let begin = rng.random_range(0..=chars.len() - len);
        out = chars[begin..begin + len].iter().collect::<String>().trim().to_string();
    }
    out
}

pub fn load_sentences(corpus: Option<&Path>, vocab: &Vocabulary) -> Result<Vec<String>> {
    let lines: Vec<String> = match corpus {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => SENTENCE_POOL.iter().map(|s| s.to_string()).collect(),
    };
    if lines.is_empty() {
        return Err(Error::Config("text corpus is empty".into()));
    }
    for l in &lines {
        let missing = vocab.missing(l);
        if !missing.is_empty() {
            return Err(Error::Vocabulary(format!("corpus line {l:?} uses characters outside the vocabulary: {missing:?}")));
        }
    }
    Ok(lines)
}

/// Transcript and rendered image for sample `id`.
pub fn synth_sample(cfg: &DatasetConfig, sentences: &[String], id: u64) -> Result<(String, image::GrayImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id);
    let glyphs = GlyphSet::builtin(cfg.glyph_scale);
    let n_lines = if cfg.max_lines > 1 { rng.random_range(1..=cfg.max_lines) } else { 1 };
    let lines: Vec<String> = (0..n_lines)
        .map(|_| sample_text(&mut rng, sentences, cfg.min_chars, cfg.max_chars))
        .collect();
    let img = if n_lines == 1 {
        render_line(&lines[0], &glyphs, cfg.line_height)?
    } else {
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        render_paragraph(&refs, &glyphs, cfg.line_height, cfg.line_spacing, cfg.max_lines)?
    };
    let img = match &cfg.augment {
        Some(spec) => augment(&img, &spec.with_seed(spec.seed ^ rng.random::<u64>())),
        None => img,
    };
    Ok((lines.join("\n"), img))
}

/// Renders every sample, then writes `train.tsv`, `valid.tsv` and
/// `test.tsv` next to an `images/` directory.
pub fn make_dataset(cfg: &DatasetConfig, vocab: &Vocabulary) -> Result<DatasetSummary> {
    let (train, valid, test) = cfg.split_counts()?;
    let sentences = load_sentences(cfg.corpus.as_deref(), vocab)?;
    let img_dir = cfg.out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let samples: Vec<Sample> = parallel::install(|| {
        (0..cfg.samples)
            .into_par_iter()
            .map(|id| {
                let (text, img) = synth_sample(cfg, &sentences, id as u64)?;
                let path = img_dir.join(format!("{id:06}.pgm"));
                write_pgm(&path, &img)?;
                Ok(Sample { image: path, transcript: text })
            })
            .collect::<Result<_>>()
    })?;
    let names = ["train.tsv", "valid.tsv", "test.tsv"].map(|n| cfg.out_dir.join(n));
    let bounds = [0, train, train + valid, cfg.samples];
    for (k, path) in names.iter().enumerate() {
        write_manifest(path, &samples[bounds[k]..bounds[k + 1]])?;
    }
    Ok(DatasetSummary { train, valid, test, manifests: names })
}
