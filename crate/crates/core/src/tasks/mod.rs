//! Tasks as cloze problems: a template with one `[MASK]`, a verbalizer
//! naming one label word per class, plus data ingestion and the few-shot
//! sampling protocol.

pub mod toy;
mod vocab;

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use toy::ToyKind;
pub use vocab::{Vocab, CLS, MASK, PAD, SEP, SPECIALS, UNK};

pub const MASK_MARKER: &str = "[MASK]";
pub const SLOT_A: &str = "<S1>";
pub const SLOT_B: &str = "<S2>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    Acc,
    AccAndF1,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelWord {
    pub label: String,
    pub word: String,
}

/// A cloze task definition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub is_pair: bool,
    /// Uses `<S1>`, `<S2>` and exactly one `[MASK]`.
    pub template: String,
    /// Label order defines class ids.
    pub verbalizer: Vec<LabelWord>,
    pub metric: Metric,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

impl Example {
    pub fn single(text: impl Into<String>, label: usize) -> Self {
        Example {
            text_a: text.into(),
            text_b: None,
            label,
        }
    }

    pub fn pair(a: impl Into<String>, b: impl Into<String>, label: usize) -> Self {
        Example {
            text_a: a.into(),
            text_b: Some(b.into()),
            label,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

/// Templated token sequence with the index of its `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask_pos: usize,
}

enum Piece<'a> {
    Text(&'a str),
    SlotA,
    SlotB,
    Mask,
}

fn parse_template(template: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = template;
    loop {
        let next = [(SLOT_A, 0), (SLOT_B, 1), (MASK_MARKER, 2)]
            .iter()
            .filter_map(|&(m, k)| rest.find(m).map(|at| (at, m, k)))
            .min_by_key(|&(at, _, _)| at);
        let Some((at, marker, kind)) = next else {
            if !rest.trim().is_empty() {
                pieces.push(Piece::Text(rest));
            }
            return pieces;
        };
        if !rest[..at].trim().is_empty() {
            pieces.push(Piece::Text(&rest[..at]));
        }
        pieces.push(match kind {
            0 => Piece::SlotA,
            1 => Piece::SlotB,
            _ => Piece::Mask,
        });
        rest = &rest[at + marker.len()..];
    }
}

impl TaskSpec {
    pub fn labels(&self) -> Vec<&str> {
        self.verbalizer.iter().map(|lw| lw.label.as_str()).collect()
    }

    pub fn num_labels(&self) -> usize {
        self.verbalizer.len()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.verbalizer.iter().position(|lw| lw.label == name)
    }

    pub fn validate(&self) -> Result<()> {
        let pieces = parse_template(&self.template);
        let count = |f: fn(&Piece) -> bool| pieces.iter().filter(|p| f(p)).count();
        if count(|p| matches!(p, Piece::Mask)) != 1 {
            return Err(Error::Config(format!(
                "task {}: template must contain exactly one {MASK_MARKER}",
                self.name
            )));
        }
        if count(|p| matches!(p, Piece::SlotA)) != 1 {
            return Err(Error::Config(format!("task {}: template needs one {SLOT_A}", self.name)));
        }
        let has_b = count(|p| matches!(p, Piece::SlotB));
        if has_b != usize::from(self.is_pair) {
            return Err(Error::Config(format!(
                "task {}: pair tasks need exactly one {SLOT_B}, single-sentence tasks none",
                self.name
            )));
        }
        if self.verbalizer.len() < 2 {
            return Err(Error::Config(format!("task {}: verbalizer needs at least two labels", self.name)));
        }
        for (i, lw) in self.verbalizer.iter().enumerate() {
            if self.verbalizer[..i].iter().any(|o| o.label == lw.label) {
                return Err(Error::Config(format!("task {}: duplicate label {:?}", self.name, lw.label)));
            }
        }
        Ok(())
    }

    /// `[CLS] template(example) [SEP]` and the position of `[MASK]`.
    pub fn apply_template(&self, vocab: &Vocab, example: &Example) -> Result<Encoded> {
        let mut ids = vec![CLS];
        let mut mask_pos = None;
        for piece in parse_template(&self.template) {
            match piece {
                Piece::Text(t) => ids.extend(vocab.tokenize(t)),
                Piece::SlotA => ids.extend(vocab.tokenize(&example.text_a)),
                Piece::SlotB => {
                    let b = example.text_b.as_deref().ok_or_else(|| {
                        Error::Contract(format!("task {} is a pair task but the example has no text_b", self.name))
                    })?;
                    ids.extend(vocab.tokenize(b));
                }
                Piece::Mask => {
                    mask_pos = Some(ids.len());
                    ids.push(MASK);
                }
            }
        }
        ids.push(SEP);
        let mask_pos =
            mask_pos.ok_or_else(|| Error::Config(format!("task {}: template has no {MASK_MARKER}", self.name)))?;
        Ok(Encoded { ids, mask_pos })
    }

    /// Like [`TaskSpec::apply_template`] but cut from the right to at most
    /// `max_len` tokens (keeping the closing `[SEP]`). Fails if the mask
    /// itself would be cut.
    pub fn encode(&self, vocab: &Vocab, example: &Example, max_len: usize) -> Result<Encoded> {
        let mut enc = self.apply_template(vocab, example)?;
        if enc.ids.len() > max_len {
            if max_len < 2 || enc.mask_pos >= max_len - 1 {
                return Err(Error::Unsupported(format!(
                    "[MASK] at position {} does not survive truncation to {max_len} tokens",
                    enc.mask_pos
                )));
            }
            enc.ids.truncate(max_len - 1);
            enc.ids.push(SEP);
        }
        Ok(enc)
    }

    /// Label-word token ids in label order.
    pub fn verbalize(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(self.verbalizer.len());
        for lw in &self.verbalizer {
            let toks = vocab.tokenize(&lw.word);
            let id = match toks.as_slice() {
                [id] if *id != UNK => *id,
                _ => {
                    return Err(Error::Config(format!(
                        "label word {:?} for {:?} is not a single in-vocabulary token",
                        lw.word, lw.label
                    )))
                }
            };
            if ids.contains(&id) {
                return Err(Error::Config(format!("label word {:?} is used by two labels", lw.word)));
            }
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn toy_sentiment() -> Self {
        TaskSpec {
            name: "toy-sentiment".into(),
            is_pair: false,
            template: "<S1> It was [MASK] .".into(),
            verbalizer: label_words(&[("positive", "great"), ("negative", "terrible")]),
            metric: Metric::Acc,
        }
    }

    pub fn toy_entailment() -> Self {
        TaskSpec {
            name: "toy-entailment".into(),
            is_pair: true,
            template: "<S1> ? [MASK] , <S2>".into(),
            verbalizer: label_words(&[("entailment", "Yes"), ("not_entailment", "No")]),
            metric: Metric::AccAndF1,
        }
    }

    pub fn toy_questions() -> Self {
        TaskSpec {
            name: "toy-questions".into(),
            is_pair: false,
            template: "[MASK] : <S1>".into(),
            verbalizer: label_words(&[
                ("abbreviation", "Expression"),
                ("entity", "Entity"),
                ("description", "Description"),
                ("human", "Human"),
                ("location", "Location"),
                ("numeric", "Number"),
            ]),
            metric: Metric::Acc,
        }
    }

    /// Built-in task by name, with its toy generator.
    pub fn builtin(name: &str) -> Option<(Self, ToyKind)> {
        match name {
            "toy-sentiment" => Some((Self::toy_sentiment(), ToyKind::Sentiment)),
            "toy-entailment" => Some((Self::toy_entailment(), ToyKind::Entailment)),
            "toy-questions" => Some((Self::toy_questions(), ToyKind::Questions)),
            _ => None,
        }
    }
}

fn label_words(pairs: &[(&str, &str)]) -> Vec<LabelWord> {
    pairs
        .iter()
        .map(|(l, w)| LabelWord {
            label: l.to_string(),
            word: w.to_string(),
        })
        .collect()
}

/// Generated data for a built-in task: a large training pool and a held-out
/// set that plays the role of the original dev set.
pub fn toy_data(kind: ToyKind, train: usize, held_out: usize, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = toy::generate(kind, train, &mut rng);
    let test = toy::generate(kind, held_out, &mut rng);
    (pool, test)
}

/// Few-shot protocol: draw `shots` training and `dev_size` dev examples
/// uniformly without replacement from `full_train`, disjointly; the
/// original held-out set becomes the test split.
pub fn few_shot_split(
    full_train: &[Example],
    test: &[Example],
    shots: usize,
    dev_size: usize,
    seed: u64,
) -> Result<Split> {
    let need = shots + dev_size;
    if full_train.len() < need {
        return Err(Error::Config(format!(
            "training pool has {} examples but {shots} shots + {dev_size} dev need {need}; \
             reduce the dev size with a config override",
            full_train.len()
        )));
    }
    let idx = few_shot_indices(full_train.len(), shots, dev_size, seed);
    Ok(Split {
        train: idx.0.iter().map(|&i| full_train[i].clone()).collect(),
        dev: idx.1.iter().map(|&i| full_train[i].clone()).collect(),
        test: test.to_vec(),
    })
}

/// Index sets behind [`few_shot_split`].
pub fn few_shot_indices(pool: usize, shots: usize, dev_size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn = sample(&mut rng, pool, shots + dev_size).into_vec();
    let (train, dev) = drawn.split_at(shots);
    (train.to_vec(), dev.to_vec())
}

/// Reads a UTF-8 TSV with header `text_a[\ttext_b]\tlabel`.
pub fn load_tsv(path: &Path, spec: &TaskSpec) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .from_reader(file);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header = reader.headers()?.clone();
    let expected: &[&str] = if spec.is_pair {
        &["text_a", "text_b", "label"]
    } else {
        &["text_a", "label"]
    };
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(1, format!("expected header {:?}, found {:?}", expected.join("\t"), header)));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != expected.len() {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", expected.len(), record.len()),
            ));
        }
        let label_name = &record[expected.len() - 1];
        let label = spec
            .label_id(label_name)
            .ok_or_else(|| parse_err(line, format!("unknown label {label_name:?} for task {}", spec.name)))?;
        out.push(Example {
            text_a: record[0].to_string(),
            text_b: spec.is_pair.then(|| record[1].to_string()),
            label,
        });
    }
    Ok(out)
}

/// Writes examples in the format [`load_tsv`] reads.
pub fn write_tsv(path: &Path, spec: &TaskSpec, examples: &[Example]) -> Result<()> {
    let mut out = String::from(if spec.is_pair { "text_a\ttext_b\tlabel\n" } else { "text_a\tlabel\n" });
    for ex in examples {
        out.push_str(&ex.text_a);
        if let Some(b) = &ex.text_b {
            out.push('\t');
            out.push_str(b);
        }
        out.push('\t');
        out.push_str(&spec.verbalizer[ex.label].label);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
