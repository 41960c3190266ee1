//! Reading and writing sequence files, alphabets and triplet files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use specmoment_core::{SymbolSequence, TripletDataset};

use crate::{BenchError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// Whitespace-separated tokens.
    #[default]
    Whitespace,
    /// Every character is a token.
    Character,
}

impl std::str::FromStr for TokenMode {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" | "token" => Ok(Self::Whitespace),
            "character" | "char" => Ok(Self::Character),
            other => Err(BenchError::Config(format!("unknown token mode '{other}'"))),
        }
    }
}

/// Token <-> index mapping. Stored on disk as a JSON array of strings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alphabet {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Alphabet {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(BenchError::Config(format!("duplicate alphabet token '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.tokens)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_tokens(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

fn split_line(line: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Whitespace => line.split_whitespace().map(str::to_string).collect(),
        TokenMode::Character => line.chars().map(String::from).collect(),
    }
}

/// Parses one sequence per non-empty line. With a fixed alphabet unknown
/// tokens are an error; otherwise the alphabet is induced in first-seen order.
pub fn parse_sequences(
    text: &str,
    alphabet: Option<&Alphabet>,
    mode: TokenMode,
) -> Result<(Vec<SymbolSequence>, Alphabet)> {
    let mut induced = alphabet.cloned().unwrap_or_default();
    let mut seqs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        let tokens = split_line(line, mode);
        if tokens.is_empty() {
            continue;
        }
        let mut symbols = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let idx = match alphabet {
                Some(a) => a
                    .get(&tok)
                    .ok_or(BenchError::UnknownToken { token: tok.clone(), line: lineno + 1 })?,
                None => induced.intern(&tok),
            };
            symbols.push(idx);
        }
        seqs.push(SymbolSequence::new(symbols));
    }
    if seqs.is_empty() {
        return Err(BenchError::EmptyInput("sequence input".into()));
    }
    Ok((seqs, induced))
}

pub fn load_sequences(
    path: &Path,
    alphabet: Option<&Alphabet>,
    mode: TokenMode,
) -> Result<(Vec<SymbolSequence>, Alphabet)> {
    let text = fs::read_to_string(path)?;
    parse_sequences(&text, alphabet, mode).map_err(|e| match e {
        BenchError::EmptyInput(_) => BenchError::EmptyInput(path.display().to_string()),
        other => other,
    })
}

pub fn format_sequences(seqs: &[SymbolSequence], alphabet: &Alphabet, mode: TokenMode) -> Result<String> {
    let mut out = String::new();
    for seq in seqs {
        seq.check_alphabet(alphabet.len())?;
        let toks: Vec<&str> = seq.symbols().iter().map(|&x| alphabet.tokens[x].as_str()).collect();
        match mode {
            TokenMode::Whitespace => out.push_str(&toks.join(" ")),
            TokenMode::Character => out.push_str(&toks.concat()),
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_sequences(path: &Path, seqs: &[SymbolSequence], alphabet: &Alphabet, mode: TokenMode) -> Result<()> {
    fs::write(path, format_sequences(seqs, alphabet, mode)?)?;
    Ok(())
}

/// Parses `x1 x2 x3` lines; blank lines and `#` comments are skipped. The
/// alphabet size defaults to the largest symbol plus one.
pub fn parse_triplets(text: &str, n_obs: Option<usize>) -> Result<TripletDataset> {
    let mut triplets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(BenchError::Format {
                line: lineno + 1,
                msg: format!("expected 3 symbols, found {}", fields.len()),
            });
        }
        let mut v = [0usize; 3];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| BenchError::Format {
                line: lineno + 1,
                msg: format!("'{f}' is not a non-negative integer"),
            })?;
        }
        triplets.push((v[0], v[1], v[2]));
    }
    if triplets.is_empty() {
        return Err(BenchError::EmptyInput("triplet input".into()));
    }
    let max = triplets.iter().map(|&(a, b, c)| a.max(b).max(c)).max().unwrap_or(0);
    Ok(TripletDataset::new(triplets, n_obs.unwrap_or(max + 1))?)
}

pub fn read_triplets(path: &Path, n_obs: Option<usize>) -> Result<TripletDataset> {
    let text = fs::read_to_string(path)?;
    parse_triplets(&text, n_obs).map_err(|e| match e {
        BenchError::EmptyInput(_) => BenchError::EmptyInput(path.display().to_string()),
        other => other,
    })
}

pub fn format_triplets(data: &TripletDataset) -> String {
    let mut out = String::with_capacity(data.len() * 8);
    for &(a, b, c) in data.triplets() {
        out.push_str(&format!("{a} {b} {c}\n"));
    }
    out
}

pub fn write_triplets(path: &Path, data: &TripletDataset) -> Result<()> {
    fs::write(path, format_triplets(data))?;
    Ok(())
}

/// Splits sequences into a training prefix and a held-out remainder. Several
/// sequences are split by count; a single sequence is split by position.
pub fn split_sequences(
    seqs: &[SymbolSequence],
    train_fraction: f64,
) -> Result<(Vec<SymbolSequence>, Vec<SymbolSequence>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(BenchError::Config(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    match seqs {
        [] => Err(BenchError::EmptyInput("sequence input".into())),
        [only] => {
            let cut = ((only.len() as f64) * train_fraction).floor() as usize;
            if cut < 3 || only.len() - cut < 2 {
                return Err(BenchError::Config(format!(
                    "sequence of length {} too short to split at {train_fraction}",
                    only.len()
                )));
            }
            let s = only.symbols();
            Ok((vec![SymbolSequence::new(s[..cut].to_vec())], vec![SymbolSequence::new(s[cut..].to_vec())]))
        }
        many => {
            let cut = ((many.len() as f64) * train_fraction).floor() as usize;
            let cut = cut.clamp(1, many.len() - 1);
            Ok((many[..cut].to_vec(), many[cut..].to_vec()))
        }
    }
}
