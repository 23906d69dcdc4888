//! Synthetic task corpus: a character tokenizer, deterministic System-1
//! (single-step) and System-2 (multi-step) task generators, the pretraining
//! mixture, answer extraction and the tab-separated corpus file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::TokenId;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocab(char),
    #[error("token id {0} is not in the vocabulary")]
    BadToken(TokenId),
    #[error("invalid request: {0}")]
    Request(String),
    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
/// Answer separator, written `=>` in text.
pub const SEP: TokenId = 2;
pub const SEP_TEXT: &str = "=>";

const CHARS: &str = "0123456789+-*()=: abcdefghijklmnopqrstuvwxyzK";

/// Fixed character-level tokenizer. `=>` always encodes to [`SEP`].
#[derive(Debug, Clone)]
pub struct Tokenizer {
    chars: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            chars: CHARS.chars().collect(),
        }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        3 + self.chars.len()
    }

    /// Ids of the plain character tokens.
    pub fn char_ids(&self) -> std::ops::Range<TokenId> {
        3..self.vocab_size()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, CorpusError> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::with_capacity(chars.len());
        let mut i = 0;
        while i < chars.len() {
            if chars[i] == '=' && chars.get(i + 1) == Some(&'>') {
                out.push(SEP);
                i += 2;
                continue;
            }
            let pos = self
                .chars
                .iter()
                .position(|&c| c == chars[i])
                .ok_or(CorpusError::OutOfVocab(chars[i]))?;
            out.push(3 + pos);
            i += 1;
        }
        Ok(out)
    }

    /// Text of `tokens`; BOS and EOS render as nothing.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, CorpusError> {
        let mut out = String::new();
        for &t in tokens {
            match t {
                BOS | EOS => {}
                SEP => out.push_str(SEP_TEXT),
                t => out.push(*self.chars.get(t - 3).ok_or(CorpusError::BadToken(t))?),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SystemLabel {
    One,
    Two,
    Unknown,
}

impl fmt::Display for SystemLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemLabel::One => "1",
            SystemLabel::Two => "2",
            SystemLabel::Unknown => "unknown",
        })
    }
}

impl std::str::FromStr for SystemLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "1" => Ok(SystemLabel::One),
            "2" => Ok(SystemLabel::Two),
            "unknown" => Ok(SystemLabel::Unknown),
            other => Err(format!("bad system label {other:?}")),
        }
    }
}

/// One prompt/answer pair. `prompt_tokens` starts with BOS and
/// `answer_tokens` ends with EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub id: String,
    pub prompt: String,
    pub answer: String,
    pub prompt_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
    pub gold_system: SystemLabel,
    /// One entry per token of `prompt_tokens ++ answer_tokens`.
    pub loss_mask: Vec<u8>,
}

/// Next-token training view of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSequence {
    pub id: String,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl LossSequence {
    /// Language-modelling view with every target position scored.
    pub fn unmasked(id: impl Into<String>, tokens: &[TokenId]) -> Self {
        let n = tokens.len() - 1;
        Self {
            id: id.into(),
            inputs: tokens[..n].to_vec(),
            targets: tokens[1..].to_vec(),
            mask: vec![true; n],
        }
    }
}

impl TaskExample {
    pub fn new(
        tok: &Tokenizer,
        id: impl Into<String>,
        prompt: &str,
        answer: &str,
        gold_system: SystemLabel,
    ) -> Result<Self, CorpusError> {
        let mut prompt_tokens = vec![BOS];
        prompt_tokens.extend(tok.encode(prompt)?);
        let mut answer_tokens = tok.encode(answer)?;
        answer_tokens.push(EOS);
        let mut loss_mask = vec![0u8; prompt_tokens.len()];
        loss_mask.extend(std::iter::repeat_n(1u8, answer_tokens.len()));
        Ok(Self {
            id: id.into(),
            prompt: prompt.to_string(),
            answer: answer.to_string(),
            prompt_tokens,
            answer_tokens,
            gold_system,
            loss_mask,
        })
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.answer_tokens);
        t
    }

    /// Inputs are all but the last token; a target is scored when the token
    /// it predicts belongs to the answer.
    pub fn loss_sequence(&self) -> LossSequence {
        let tokens = self.tokens();
        let n = tokens.len() - 1;
        LossSequence {
            id: self.id.clone(),
            inputs: tokens[..n].to_vec(),
            targets: tokens[1..].to_vec(),
            mask: self.loss_mask[1..].iter().map(|&m| m == 1).collect(),
        }
    }

    /// The gold final answer as compared by evaluation.
    pub fn gold_answer(&self) -> &str {
        final_answer(&self.answer)
    }
}

/// Text after the last `=>` marker, trimmed; `None` without a marker.
pub fn extract_answer(text: &str) -> Option<&str> {
    text.rfind(SEP_TEXT).map(|i| text[i + SEP_TEXT.len()..].trim())
}

/// [`extract_answer`] when a marker is present, otherwise the whole trimmed
/// text (single-step answers carry no marker).
pub fn final_answer(text: &str) -> &str {
    extract_answer(text).unwrap_or_else(|| text.trim())
}

/// Synthetic key → value table recalled by System-1 fact items.
#[derive(Debug, Clone, PartialEq)]
pub struct FactTable {
    entries: BTreeMap<String, String>,
}

impl FactTable {
    pub fn generate(count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let letters: Vec<char> = ('a'..='z').collect();
        let entries = (0..count)
            .map(|i| {
                let value: String = (0..3).map(|_| letters[rng.random_range(0..26)]).collect();
                (format!("K{i:02}"), value)
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn nth(&self, i: usize) -> (&str, &str) {
        let (k, v) = self.entries.iter().nth(i).expect("index in range");
        (k, v)
    }
}

pub const FACT_PREFIX: &str = "capof:";

/// Proportions of the pretraining mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainMix {
    pub system1: f64,
    pub system2: f64,
    pub random: f64,
}

impl PretrainMix {
    /// Exact item counts for `total` items: floors for the task families,
    /// remainder to random strings.
    pub fn counts(&self, total: usize) -> (usize, usize, usize) {
        let sum = self.system1 + self.system2 + self.random;
        let n1 = (total as f64 * self.system1 / sum).floor() as usize;
        let n2 = (total as f64 * self.system2 / sum).floor() as usize;
        (n1, n2, total - n1 - n2)
    }
}

/// Deterministic task generator sharing one tokenizer and fact table.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    pub tokenizer: Tokenizer,
    pub facts: FactTable,
    /// Fraction of System-1 items that are fact recall rather than arithmetic.
    pub fact_fraction: f64,
}

impl TaskGenerator {
    pub fn new(fact_count: usize, fact_seed: u64, fact_fraction: f64) -> Self {
        Self {
            tokenizer: Tokenizer::default(),
            facts: FactTable::generate(fact_count, fact_seed),
            fact_fraction,
        }
    }

    /// Single-step items: one arithmetic operation on two digits, or one fact lookup.
    pub fn gen_system1(&self, count: usize, seed: u64) -> Result<Vec<TaskExample>, CorpusError> {
        if count == 0 {
            return Err(CorpusError::Request("count must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_0001);
        (0..count)
            .map(|i| {
                let id = format!("s1-{seed:x}-{i}");
                let (prompt, answer) = if !self.facts.is_empty() && rng.random_bool(self.fact_fraction) {
                    let (k, v) = self.facts.nth(rng.random_range(0..self.facts.len()));
                    (format!("{FACT_PREFIX}{k}="), v.to_string())
                } else {
                    single_step(&mut rng)
                };
                TaskExample::new(&self.tokenizer, id, &prompt, &answer, SystemLabel::One)
            })
            .collect()
    }

    /// Chained arithmetic of `2..=max_depth` operations with a step trace.
    ///
    /// Depths cycle through the whole range, so any `count >= max_depth - 1`
    /// covers every depth. Every intermediate value stays in `0..=99`.
    pub fn gen_system2(
        &self,
        count: usize,
        max_depth: usize,
        seed: u64,
    ) -> Result<Vec<TaskExample>, CorpusError> {
        if count == 0 {
            return Err(CorpusError::Request("count must be >= 1".into()));
        }
        if max_depth < 2 {
            return Err(CorpusError::Request(format!("max_depth must be >= 2, got {max_depth}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_0002);
        (0..count)
            .map(|i| {
                let depth = 2 + i % (max_depth - 1);
                let (prompt, answer) = multi_step(&mut rng, depth);
                TaskExample::new(
                    &self.tokenizer,
                    format!("s2-{seed:x}-{i}"),
                    &prompt,
                    &answer,
                    SystemLabel::Two,
                )
            })
            .collect()
    }

    /// Pretraining sequences (BOS … EOS): both task families plus random
    /// character strings, in exact proportions, shuffled.
    pub fn gen_pretrain(
        &self,
        count: usize,
        max_depth: usize,
        mix: PretrainMix,
        seed: u64,
    ) -> Result<Vec<Vec<TokenId>>, CorpusError> {
        let (n1, n2, n_rand) = mix.counts(count);
        let mut out = Vec::with_capacity(count);
        if n1 > 0 {
            out.extend(self.gen_system1(n1, seed ^ 0xA1)?.iter().map(TaskExample::tokens));
        }
        if n2 > 0 {
            out.extend(self.gen_system2(n2, max_depth, seed ^ 0xA2)?.iter().map(TaskExample::tokens));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA3);
        let chars = self.tokenizer.char_ids();
        for _ in 0..n_rand {
            let len = rng.random_range(4..=16);
            let mut seq = vec![BOS];
            seq.extend((0..len).map(|_| rng.random_range(chars.clone())));
            seq.push(EOS);
            out.push(seq);
        }
        out.shuffle(&mut rng);
        Ok(out)
    }
}

fn single_step(rng: &mut ChaCha8Rng) -> (String, String) {
    let mut a: i64 = rng.random_range(0..=9);
    let mut b: i64 = rng.random_range(0..=9);
    let op = ['+', '-', '*'][rng.random_range(0..3)];
    if op == '-' && a < b {
        std::mem::swap(&mut a, &mut b);
    }
    (format!("{a}{op}{b}="), apply(a, op, b).to_string())
}

fn apply(a: i64, op: char, b: i64) -> i64 {
    match op {
        '+' => a + b,
        '-' => a - b,
        '*' => a * b,
        _ => unreachable!("generator only emits + - *"),
    }
}

fn multi_step(rng: &mut ChaCha8Rng, depth: usize) -> (String, String) {
    let mut value: i64 = rng.random_range(1..=9);
    let mut expr = value.to_string();
    let mut trace = Vec::with_capacity(depth);
    for step in 0..depth {
        let (op, b, next) = loop {
            let op = ['+', '-', '*'][rng.random_range(0..3)];
            let b: i64 = rng.random_range(1..=9);
            let next = apply(value, op, b);
            if (0..=99).contains(&next) {
                break (op, b, next);
            }
        };
        expr = if step == 0 {
            format!("{expr}{op}{b}")
        } else {
            format!("({expr}){op}{b}")
        };
        value = next;
        trace.push(next);
    }
    let mut answer = String::new();
    for v in &trace[..depth - 1] {
        answer.push_str(&format!("{v} "));
    }
    answer.push_str(&format!("{SEP_TEXT} {value}"));
    (format!("{expr}{SEP_TEXT}"), answer)
}

/// Writes `id \t gold_system \t prompt \t answer` lines, plus an
/// `assigned_system` column when `assigned` is given.
pub fn write_corpus(
    path: &Path,
    examples: &[TaskExample],
    assigned: Option<&[SystemLabel]>,
) -> Result<(), CorpusError> {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{}\t{}", ex.id, ex.gold_system, ex.prompt, ex.answer));
        if let Some(a) = assigned {
            out.push_str(&format!("\t{}", a[i]));
        }
        out.push('\n');
    }
    crate::binio::write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Reads a corpus file; the optional fifth column is the assigned system.
pub fn read_corpus(
    path: &Path,
    tok: &Tokenizer,
) -> Result<Vec<(TaskExample, Option<SystemLabel>)>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |reason: String| CorpusError::Record { line: i + 1, reason };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 && cols.len() != 5 {
                return Err(bad(format!("expected 4 or 5 columns, got {}", cols.len())));
            }
            let gold = cols[1].parse().map_err(bad)?;
            let ex = TaskExample::new(tok, cols[0], cols[2], cols[3], gold)?;
            let assigned = cols.get(4).map(|c| c.parse()).transpose().map_err(bad)?;
            Ok((ex, assigned))
        })
        .collect()
}
