//! Dataset records, file loaders, and a seeded synthesiser for toy corpora.
//!
//! Sentiment and paraphrase files are tab-separated with a header row whose
//! column names locate the fields (`id, sentence, label` and
//! `id, question1, question2, is_duplicate`). Sonnet files are plain text
//! with poems separated by blank lines, each optionally preceded by a line
//! holding only its number.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::nn::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentimentExample {
    pub id: String,
    pub sentence: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParaphraseExample {
    pub id: String,
    pub question1: String,
    pub question2: String,
    pub is_duplicate: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sonnet {
    pub number: Option<usize>,
    pub lines: Vec<String>,
}

impl Sonnet {
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Rows of a header-bearing TSV as `(line number, fields)` in the order of
/// `columns`.
fn tsv_rows(text: &str, path: &Path, columns: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing header row"))?;
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            names
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| parse_err(path, 1, format!("header lacks column `{c}`")))
        })
        .collect::<Result<_>>()?;
    lines
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != names.len() {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("expected {} fields, found {}", names.len(), fields.len()),
                ));
            }
            Ok((i + 1, idx.iter().map(|&j| fields[j].to_string()).collect()))
        })
        .collect()
}

pub fn parse_sentiment(text: &str, num_classes: usize, path: &Path) -> Result<Vec<SentimentExample>> {
    tsv_rows(text, path, &["id", "sentence", "label"])?
        .into_iter()
        .map(|(line, mut f)| {
            let label: usize = f[2]
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("label `{}` is not an integer", f[2])))?;
            if label >= num_classes {
                return Err(parse_err(
                    path,
                    line,
                    format!("label {label} outside 0..{}", num_classes - 1),
                ));
            }
            Ok(SentimentExample {
                sentence: std::mem::take(&mut f[1]),
                id: std::mem::take(&mut f[0]),
                label,
            })
        })
        .collect()
}

pub fn parse_paraphrase(text: &str, path: &Path) -> Result<Vec<ParaphraseExample>> {
    tsv_rows(text, path, &["id", "question1", "question2", "is_duplicate"])?
        .into_iter()
        .map(|(line, mut f)| {
            let is_duplicate = match f[3].trim() {
                "1" | "1.0" => true,
                "0" | "0.0" => false,
                other => {
                    return Err(parse_err(path, line, format!("is_duplicate `{other}` is not 0 or 1")));
                }
            };
            Ok(ParaphraseExample {
                question2: std::mem::take(&mut f[2]),
                question1: std::mem::take(&mut f[1]),
                id: std::mem::take(&mut f[0]),
                is_duplicate,
            })
        })
        .collect()
}

pub fn parse_sonnets(text: &str) -> Vec<Sonnet> {
    let mut out = Vec::new();
    let mut pending_number = None;
    let mut current: Vec<String> = Vec::new();
    let flush = |current: &mut Vec<String>, pending: &mut Option<usize>, out: &mut Vec<Sonnet>| {
        if current.is_empty() {
            return;
        }
        let mut lines = std::mem::take(current);
        let mut number = pending.take();
        if let Ok(n) = lines[0].trim().parse::<usize>() {
            lines.remove(0);
            if lines.is_empty() {
                *pending = Some(n);
                return;
            }
            number = Some(n);
        }
        out.push(Sonnet { number, lines });
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut pending_number, &mut out);
        } else {
            current.push(line.trim_end().to_string());
        }
    }
    flush(&mut current, &mut pending_number, &mut out);
    out
}

pub fn load_sentiment(path: &Path, num_classes: usize) -> Result<Vec<SentimentExample>> {
    parse_sentiment(&std::fs::read_to_string(path)?, num_classes, path)
}

pub fn load_paraphrase(path: &Path) -> Result<Vec<ParaphraseExample>> {
    parse_paraphrase(&std::fs::read_to_string(path)?, path)
}

pub fn load_sonnets(path: &Path) -> Result<Vec<Sonnet>> {
    Ok(parse_sonnets(&std::fs::read_to_string(path)?))
}

pub fn write_sentiment_tsv(rows: &[SentimentExample]) -> String {
    let mut s = String::from("id\tsentence\tlabel\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\n", r.id, r.sentence, r.label));
    }
    s
}

pub fn write_paraphrase_tsv(rows: &[ParaphraseExample]) -> String {
    let mut s = String::from("id\tquestion1\tquestion2\tis_duplicate\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.id, r.question1, r.question2, r.is_duplicate as u8
        ));
    }
    s
}

pub fn write_sonnets(sonnets: &[Sonnet]) -> String {
    let mut s = String::new();
    for (i, son) in sonnets.iter().enumerate() {
        s.push_str(&format!("{}\n", son.number.unwrap_or(i + 1)));
        s.push_str(&son.text());
        s.push_str("\n\n");
    }
    s
}

const SUBJECTS: [&str; 6] = [
    "the film",
    "this movie",
    "the plot",
    "the cast",
    "the story",
    "the ending",
];
const TAILS: [&str; 4] = ["", " overall", " to me", " honestly"];

/// Sentiment words by polarity; five classes use all rows, two classes
/// use the first and last.
const POLARITY: [[&str; 3]; 5] = [
    ["awful", "dreadful", "horrid"],
    ["dull", "weak", "bland"],
    ["fine", "okay", "so-so"],
    ["good", "fun", "nice"],
    ["superb", "brilliant", "stunning"],
];

/// Pattern-based sentiment sentences with balanced labels. The label is
/// carried by one polarity word.
pub fn synth_sentiment(n: usize, num_classes: usize, seed: u64) -> Result<Vec<SentimentExample>> {
    let rows: Vec<&[&str; 3]> = match num_classes {
        2 => vec![&POLARITY[0], &POLARITY[4]],
        5 => POLARITY.iter().collect(),
        c => {
            return Err(Error::InvalidArgument(format!(
                "synthetic sentiment supports 2 or 5 classes, not {c}"
            )))
        }
    };
    let mut rng = Rng::seed_from_u64(seed);
    let mut out: Vec<SentimentExample> = (0..n)
        .map(|i| {
            let label = i % num_classes;
            let sentence = format!(
                "{} was {}{}",
                SUBJECTS.choose(&mut rng).expect("non-empty"),
                rows[label].choose(&mut rng).expect("non-empty"),
                TAILS.choose(&mut rng).expect("non-empty"),
            );
            SentimentExample {
                id: String::new(),
                sentence,
                label,
            }
        })
        .collect();
    out.shuffle(&mut rng);
    for (i, ex) in out.iter_mut().enumerate() {
        ex.id = format!("s{i}");
    }
    Ok(out)
}

const SKILLS: [&str; 8] = [
    "python", "guitar", "chess", "french", "cooking", "math", "drawing", "swimming",
];
const QUESTION_FORMS: [&str; 4] = [
    "how do i learn {}?",
    "what is the best way to learn {}?",
    "how can i get better at {}?",
    "where should i start with {}?",
];

/// Question pairs: duplicates ask about the same skill in different words,
/// non-duplicates ask about different skills.
pub fn synth_paraphrase(n: usize, seed: u64) -> Vec<ParaphraseExample> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let is_duplicate = i % 2 == 0;
            let a = *SKILLS.choose(&mut rng).expect("non-empty");
            let b = if is_duplicate {
                a
            } else {
                *SKILLS
                    .iter()
                    .filter(|&&s| s != a)
                    .collect::<Vec<_>>()
                    .choose(&mut rng)
                    .expect("non-empty")
            };
            let fa = QUESTION_FORMS.choose(&mut rng).expect("non-empty");
            let fb = QUESTION_FORMS.choose(&mut rng).expect("non-empty");
            ParaphraseExample {
                id: format!("p{i}"),
                question1: fa.replace("{}", a),
                question2: fb.replace("{}", b),
                is_duplicate,
            }
        })
        .collect()
}

const NOUNS: [&str; 10] = [
    "rose", "heart", "time", "eye", "night", "sun", "love", "youth", "grace", "verse",
];
const VERBS: [&str; 6] = [
    "doth hold",
    "shall keep",
    "must fade",
    "will bless",
    "doth burn",
    "can mend",
];
const ADJS: [&str; 6] = ["sweet", "fair", "cold", "bright", "gentle", "proud"];

/// Fourteen-line pseudo-sonnets with no rhyme scheme.
pub fn synth_sonnets(n: usize, seed: u64) -> Vec<Sonnet> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let lines = (0..14)
                .map(|_| {
                    let pick = |xs: &[&'static str], rng: &mut Rng| *xs.choose(rng).expect("non-empty");
                    format!(
                        "thy {} {} the {} {}",
                        pick(&NOUNS, &mut rng),
                        pick(&VERBS, &mut rng),
                        pick(&ADJS, &mut rng),
                        pick(&NOUNS, &mut rng)
                    )
                })
                .collect();
            Sonnet {
                number: Some(i + 1),
                lines,
            }
        })
        .collect()
}
