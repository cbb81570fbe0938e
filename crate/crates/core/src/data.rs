//! Tokenization, vocabularies and contiguous batching for truncated BPTT.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State of the Union addresses 1790-1831 (public domain).
pub const BUNDLED_CORPUS: &str = include_str!("../data/sotu_1790_1831.txt");
pub const BUNDLED_CORPUS_NAME: &str = "bundled:sotu_1790_1831";

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
const SPECIALS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    /// Whitespace-separated words, `<eos>` after every line.
    Word,
    /// Every Unicode scalar value is a token, newlines included.
    Char,
}

impl std::str::FromStr for TokenMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            other => Err(Error::Parameter(format!("unknown token mode {other:?}"))),
        }
    }
}

fn tokens(text: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Char => text.chars().map(String::from).collect(),
        TokenMode::Word => text
            .lines()
            .flat_map(|line| line.split_whitespace().map(str::to_owned).chain(std::iter::once(EOS.to_owned())))
            .collect(),
    }
}

/// Token/id bijection. Ids 0 and 1 are `<unk>` and `<eos>`; the rest are
/// ordered by descending frequency, then lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenMode,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(mode: TokenMode, tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parameter(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { mode, tokens, index })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokens(text, self.mode).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let lookup = |id: u32| self.token(id).unwrap_or(UNK);
        match self.mode {
            TokenMode::Char => ids.iter().map(|&id| lookup(id)).collect(),
            TokenMode::Word => {
                let mut out = String::new();
                let mut line_start = true;
                for &id in ids {
                    if id == EOS_ID {
                        out.push('\n');
                        line_start = true;
                    } else {
                        if !line_start {
                            out.push(' ');
                        }
                        out.push_str(lookup(id));
                        line_start = false;
                    }
                }
                out
            }
        }
    }

    /// One token per line, id = line number. Backslash, newline, carriage
    /// return and tab are written as `\\`, `\n`, `\r`, `\t`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            for ch in t.chars() {
                match ch {
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    '\t' => out.push_str("\\t"),
                    c => out.push(c),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_dump(mode: TokenMode, dump: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in dump.lines() {
            let mut t = String::new();
            let mut chars = line.chars();
            while let Some(c) = chars.next() {
                if c != '\\' {
                    t.push(c);
                    continue;
                }
                match chars.next() {
                    Some('\\') => t.push('\\'),
                    Some('n') => t.push('\n'),
                    Some('r') => t.push('\r'),
                    Some('t') => t.push('\t'),
                    other => return Err(Error::Parameter(format!("bad escape in vocab dump: \\{other:?}"))),
                }
            }
            tokens.push(t);
        }
        if tokens.len() < SPECIALS || tokens[0] != UNK || tokens[1] != EOS {
            return Err(Error::Parameter("vocab dump must start with <unk> and <eos>".into()));
        }
        Vocab::from_tokens(mode, tokens)
    }
}

/// Builds a vocabulary of at most `max_size` entries (specials included).
pub fn build_vocab(text: &str, mode: TokenMode, max_size: Option<usize>) -> Result<Vocab> {
    if text.is_empty() {
        return Err(Error::Parameter("cannot build a vocabulary from empty text".into()));
    }
    if let Some(m) = max_size {
        if m <= SPECIALS {
            return Err(Error::Parameter(format!("vocabulary size {m} leaves no room for tokens")));
        }
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for t in tokens(text, mode) {
        if t != EOS && t != UNK {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let limit = max_size.map_or(ranked.len(), |m| (m - SPECIALS).min(ranked.len()));
    let mut all = vec![UNK.to_owned(), EOS.to_owned()];
    all.extend(ranked.into_iter().take(limit).map(|(t, _)| t));
    Vocab::from_tokens(mode, all)
}

/// One truncated-BPTT minibatch: `inputs` and `targets` are `batch x steps`,
/// row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub steps: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn input(&self, n: usize, t: usize) -> u32 {
        self.inputs[n * self.steps + t]
    }

    pub fn target(&self, n: usize, t: usize) -> u32 {
        self.targets[n * self.steps + t]
    }

    /// Input ids of every row at timestep `t`.
    pub fn inputs_at(&self, t: usize) -> Vec<u32> {
        (0..self.batch).map(|n| self.input(n, t)).collect()
    }

    pub fn targets_at(&self, t: usize) -> Vec<u32> {
        (0..self.batch).map(|n| self.target(n, t)).collect()
    }
}

/// An id stream split into `batch` contiguous rows, read `steps` columns at
/// a time. Row `n` of batch `b + 1` continues where row `n` of batch `b`
/// ended.
#[derive(Clone, Debug)]
pub struct BatchStream {
    rows: Vec<Vec<u32>>,
    batch: usize,
    steps: usize,
    cursor: usize,
}

impl BatchStream {
    pub fn new(ids: &[u32], batch: usize, steps: usize) -> Result<Self> {
        if batch == 0 || steps == 0 {
            return Err(Error::Parameter("batch and unroll length must be positive".into()));
        }
        if ids.len() < batch * (steps + 1) {
            return Err(Error::Parameter(format!(
                "stream of {} tokens is too short for {batch} rows of {} tokens",
                ids.len(),
                steps + 1
            )));
        }
        let seg = ids.len() / batch;
        let rows = (0..batch).map(|n| ids[n * seg..(n + 1) * seg].to_vec()).collect();
        Ok(BatchStream {
            rows,
            batch,
            steps,
            cursor: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        (self.rows[0].len() - 1) / self.steps
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn reset(&mut self) {
        self.cursor = 0;
    }

    pub fn get(&self, b: usize) -> Option<Batch> {
        if b >= self.num_batches() {
            return None;
        }
        let start = b * self.steps;
        let mut inputs = Vec::with_capacity(self.batch * self.steps);
        let mut targets = Vec::with_capacity(self.batch * self.steps);
        for row in &self.rows {
            inputs.extend_from_slice(&row[start..start + self.steps]);
            targets.extend_from_slice(&row[start + 1..start + self.steps + 1]);
        }
        Some(Batch {
            batch: self.batch,
            steps: self.steps,
            inputs,
            targets,
        })
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.get(self.cursor)?;
        self.cursor += 1;
        Some(b)
    }
}

pub fn batch_iterate(ids: &[u32], batch: usize, steps: usize) -> Result<BatchStream> {
    BatchStream::new(ids, batch, steps)
}

/// Encoded training and validation streams with their vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
}

impl Corpus {
    /// Splits `text` at `1 - valid_fraction` of its characters; the
    /// vocabulary is built from the training part only.
    pub fn from_text(text: &str, mode: TokenMode, max_vocab: Option<usize>, valid_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) || valid_fraction == 0.0 {
            return Err(Error::Parameter(format!("validation fraction {valid_fraction} not in (0, 1)")));
        }
        let chars = text.chars().count();
        let split_char = ((chars as f64) * (1.0 - valid_fraction)).round() as usize;
        let split = text.char_indices().nth(split_char).map_or(text.len(), |(i, _)| i);
        let (train_text, valid_text) = text.split_at(split);
        let vocab = build_vocab(train_text, mode, max_vocab)?;
        let train = vocab.encode(train_text);
        let valid = vocab.encode(valid_text);
        Ok(Corpus { vocab, train, valid })
    }

    /// Loads `path`, or the bundled corpus for `None`.
    pub fn load(path: Option<&std::path::Path>, mode: TokenMode, max_vocab: Option<usize>, valid_fraction: f64) -> Result<Self> {
        match path {
            Some(p) => Corpus::from_text(&std::fs::read_to_string(p)?, mode, max_vocab, valid_fraction),
            None => Corpus::from_text(BUNDLED_CORPUS, mode, max_vocab, valid_fraction),
        }
    }
}

/// Where the corpus comes from and how it is tokenized and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Path to a UTF-8 text file; `None` selects the bundled corpus.
    pub corpus: Option<String>,
    pub mode: TokenMode,
    pub max_vocab: Option<usize>,
    pub valid_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            mode: TokenMode::Char,
            max_vocab: None,
            valid_fraction: 0.05,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Corpus> {
        Corpus::load(self.corpus.as_deref().map(std::path::Path::new), self.mode, self.max_vocab, self.valid_fraction)
    }

    pub fn corpus_name(&self) -> &str {
        self.corpus.as_deref().unwrap_or(BUNDLED_CORPUS_NAME)
    }
}
