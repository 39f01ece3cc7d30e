//! Seeded toy grammar: a 512-word vocabulary, three downstream tasks and
//! the MLM pretraining corpus built from the same sentence generators.
//!
//! Sentiment sentences carry class-marker adjectives, so a backbone
//! pretrained on text like `"… it was great ."` develops label-informative
//! features without any downstream supervision.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CLS, SEP};
use super::Example;
use crate::encoder::{mlm_eval, pretrain_toy, Backbone, EncoderWeights, MlmEval, ModelConfig, PretrainConfig};
use crate::error::{Error, Result};

pub const TOY_VOCAB_SIZE: usize = 512;

const FUNCTION: &[&str] = &[
    "the", "a", "it", "was", "is", "and", "but", "this", "that", "i", "found", "felt", "with",
    "of", "to", "in", "yet", "also", "what", "which", "did", "does", "one", "there", "for", "see",
];
const PUNCT: &[&str] = &[".", ",", "?", ":", "!"];
const LABEL_WORDS: &[&str] = &[
    "great", "terrible", "yes", "no", "maybe", "expression", "entity", "description", "human",
    "location", "number",
];
const POSITIVE: &[&str] = &[
    "fun", "lovely", "brilliant", "charming", "superb", "delightful", "moving", "clever", "warm",
    "fresh", "joyful", "stunning", "gripping", "witty", "elegant", "tender", "vivid", "heartfelt",
    "splendid", "gorgeous", "uplifting", "masterful", "sharp", "sweet",
];
const NEGATIVE: &[&str] = &[
    "dull", "boring", "awful", "bland", "clumsy", "messy", "tedious", "weak", "stale", "dreary",
    "silly", "shallow", "lazy", "flat", "hollow", "tiresome", "grim", "sloppy", "cheap", "painful",
    "forced", "lifeless", "murky", "awkward",
];
const NEUTRAL: &[&str] = &[
    "long", "short", "recent", "quiet", "loud", "french", "old", "new", "local", "early", "late",
    "big", "small", "plain", "strange", "typical",
];
const NOUNS: &[&str] = &[
    "movie", "film", "story", "plot", "acting", "script", "cast", "ending", "music", "director",
    "scene", "dialogue", "pacing", "premise", "hero", "villain", "soundtrack", "sequel", "drama",
    "comedy", "performance", "camera", "editing", "finale",
];
const ADVERBS: &[&str] = &["very", "really", "quite", "rather", "truly", "so", "too", "fairly"];
const TOPICS: &[&str] = &[
    "cat", "dog", "bird", "horse", "river", "city", "train", "ship", "king", "queen", "farmer",
    "doctor", "teacher", "child", "storm", "garden", "pilot", "singer", "sailor", "baker",
    "wolf", "fox", "student", "poet",
];
const VERBS: &[&str] = &["saw", "liked", "crossed", "left", "watched", "reached", "heard", "visited"];
const OBJECTS: &[&str] = &["house", "field", "road", "bridge", "market", "forest", "hill", "lake"];
/// Cue words for the six question classes, in label order.
const QUESTION_CUES: [&[&str]; 6] = [
    &["stand", "abbreviation", "acronym", "short-form"],
    &["animal", "color", "food", "instrument"],
    &["why", "how", "explain", "meaning"],
    &["who", "person", "author", "inventor"],
    &["where", "country", "town", "capital"],
    &["many", "much", "year", "distance"],
];

/// The toy vocabulary: specials, grammar words, then `w###` fillers up to 512.
pub fn toy_vocab() -> Vocab {
    let mut words: Vec<String> = [
        FUNCTION, PUNCT, LABEL_WORDS, POSITIVE, NEGATIVE, NEUTRAL, NOUNS, ADVERBS, TOPICS, VERBS,
        OBJECTS,
    ]
    .iter()
    .flat_map(|list| list.iter().map(|w| w.to_string()))
    .chain(QUESTION_CUES.iter().flat_map(|c| c.iter().map(|w| w.replace('-', ""))))
    .collect();
    let mut i = 0;
    while words.len() + super::vocab::SPECIALS.len() < TOY_VOCAB_SIZE {
        words.push(format!("w{i:03}"));
        i += 1;
    }
    Vocab::new(words).expect("toy vocabulary is well formed")
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    list.choose(rng).expect("non-empty word list")
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    format!("w{:03}", rng.gen_range(0..200))
}

fn marker_clause(rng: &mut ChaCha8Rng, marker: &str) -> String {
    let noun = pick(rng, NOUNS);
    match rng.gen_range(0..5) {
        0 => format!("the {noun} was {marker}"),
        1 => format!("a {} {marker} {noun}", pick(rng, ADVERBS)),
        2 => format!("{marker} {noun} with {} {}", pick(rng, NEUTRAL), pick(rng, NOUNS)),
        3 => format!("i found the {noun} {marker}"),
        _ => format!("the {} {noun} is {} {marker}", pick(rng, NEUTRAL), pick(rng, ADVERBS)),
    }
}

/// One sentiment sentence; label 0 = positive, 1 = negative.
///
/// The label's marker adjectives always strictly outnumber the other
/// class's, so the task is linearly separable over bag-of-words counts.
pub fn sentiment_sentence(rng: &mut ChaCha8Rng) -> (String, usize) {
    let label = rng.gen_range(0..2);
    let (major, minor) = if label == 0 { (POSITIVE, NEGATIVE) } else { (NEGATIVE, POSITIVE) };
    let n_major = rng.gen_range(1..=2);
    let mut clauses: Vec<String> = (0..n_major)
        .map(|_| {
            let m = pick(rng, major);
            marker_clause(rng, m)
        })
        .collect();
    if n_major == 2 && rng.gen_bool(0.3) {
        let m = pick(rng, minor);
        clauses.push(marker_clause(rng, m));
    }
    if rng.gen_bool(0.4) {
        clauses.push(format!("{} {}", pick(rng, NEUTRAL), filler(rng)));
    }
    clauses.shuffle(rng);
    let joiner = [" , ", " and ", " but "];
    let mut text = clauses[0].clone();
    for c in &clauses[1..] {
        text.push_str(pick(rng, &joiner));
        text.push_str(c);
    }
    (text, label)
}

fn event(rng: &mut ChaCha8Rng, topic: &str) -> String {
    format!("the {topic} {} the {}", pick(rng, VERBS), pick(rng, OBJECTS))
}

/// Sentence pair; label 0 (entailment) when both mention the same topic.
pub fn entailment_pair(rng: &mut ChaCha8Rng) -> (String, String, usize) {
    let topic = pick(rng, TOPICS);
    let label = rng.gen_range(0..2);
    let other = if label == 0 {
        topic
    } else {
        loop {
            let t = pick(rng, TOPICS);
            if t != topic {
                break t;
            }
        }
    };
    (event(rng, topic), event(rng, other), label)
}

/// Six-way question; the label is signalled by a class cue word.
pub fn question(rng: &mut ChaCha8Rng) -> (String, usize) {
    let label = rng.gen_range(0..6);
    let cue = pick(rng, QUESTION_CUES[label]).replace('-', "");
    let text = match rng.gen_range(0..3) {
        0 => format!("what {cue} did the {} see ?", pick(rng, TOPICS)),
        1 => format!("which {cue} is in the {} ?", pick(rng, OBJECTS)),
        _ => format!("{cue} of the {} {} ?", pick(rng, NOUNS), filler(rng)),
    };
    (text, label)
}

/// Which toy generator backs a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    Sentiment,
    Entailment,
    Questions,
}

pub fn generate(kind: ToyKind, count: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    (0..count)
        .map(|_| match kind {
            ToyKind::Sentiment => {
                let (text, label) = sentiment_sentence(rng);
                Example::single(text, label)
            }
            ToyKind::Entailment => {
                let (a, b, label) = entailment_pair(rng);
                Example::pair(a, b, label)
            }
            ToyKind::Questions => {
                let (text, label) = question(rng);
                Example::single(text, label)
            }
        })
        .collect()
}

/// Token ids of every label word used by the built-in tasks.
pub fn label_word_ids(vocab: &Vocab) -> Vec<usize> {
    LABEL_WORDS.iter().filter_map(|w| vocab.id(w)).collect()
}

/// MLM pretraining documents framed as `[CLS] … [SEP]`.
///
/// The mix follows the downstream templates so the frozen backbone has
/// seen label words in their prompt positions.
pub fn pretraining_corpus(vocab: &Vocab, docs: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..docs)
        .map(|_| {
            let text = match rng.gen_range(0..20) {
                0..=11 => {
                    let (s, y) = sentiment_sentence(rng);
                    format!("{s} it was {} .", ["great", "terrible"][y])
                }
                12..=15 => {
                    let (a, b, y) = entailment_pair(rng);
                    format!("{a} ? {} , {b}", ["yes", "no"][y])
                }
                16..=17 => {
                    let (q, y) = question(rng);
                    format!("{} : {q}", LABEL_WORDS[5 + y])
                }
                _ => sentiment_sentence(rng).0,
            };
            let mut ids = vec![CLS];
            ids.extend(vocab.tokenize(&text));
            ids.push(SEP);
            ids
        })
        .collect()
}

/// Settings for manufacturing the frozen toy backbone: corpus size and
/// seeds plus the MLM optimizer settings. Label words are masked as salient
/// tokens by default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyPretrain {
    pub corpus_docs: usize,
    pub held_out_docs: usize,
    pub corpus_seed: u64,
    pub mlm: PretrainConfig,
}

impl Default for ToyPretrain {
    fn default() -> Self {
        ToyPretrain {
            corpus_docs: 20_000,
            held_out_docs: 500,
            corpus_seed: 0,
            mlm: PretrainConfig {
                salient_prob: 1.0,
                salient_ids: label_word_ids(&toy_vocab()),
                ..PretrainConfig::default()
            },
        }
    }
}

impl ToyPretrain {
    /// Seeds both the corpus and the optimizer.
    pub fn with_seed(self, seed: u64) -> Self {
        ToyPretrain {
            corpus_seed: seed,
            mlm: PretrainConfig { seed, ..self.mlm },
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub docs: usize,
    pub tokens: usize,
    pub held_out_docs: usize,
    pub vocab_size: usize,
    pub salient_ids: usize,
    pub initial: MlmEval,
    pub trained: MlmEval,
    pub losses: Vec<f64>,
}

/// Generates the corpus, pretrains, and scores held-out MLM before and
/// after training (uniform 15% masking, fixed corruption seed).
pub fn pretrain_backbone(model: &ModelConfig, tp: &ToyPretrain) -> Result<(Backbone, CorpusStats)> {
    let vocab = toy_vocab();
    if model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model.vocab_size is {} but the toy vocabulary has {} words",
            model.vocab_size,
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tp.corpus_seed);
    let corpus = pretraining_corpus(&vocab, tp.corpus_docs, &mut rng);
    let held = pretraining_corpus(&vocab, tp.held_out_docs.max(1), &mut rng);
    let initial = mlm_eval(&EncoderWeights::init(model, tp.mlm.seed)?, model, &held, 0.15, 1)?;
    let (weights, report) = pretrain_toy(model, &corpus, &tp.mlm)?;
    let trained = mlm_eval(&weights, model, &held, 0.15, 1)?;
    let stats = CorpusStats {
        docs: corpus.len(),
        tokens: corpus.iter().map(Vec::len).sum(),
        held_out_docs: held.len(),
        vocab_size: vocab.len(),
        salient_ids: tp.mlm.salient_ids.len(),
        initial,
        trained,
        losses: report.losses,
    };
    Ok((Backbone::new(model.clone(), weights)?, stats))
}
