//! Seeded grid-counting task with a programmatic verifier.
//!
//! A sample is a small grid of symbols (the "image"), a question such as
//! `COUNT B` or `COMPARE A C`, and a canonical answer string. Responses
//! carry their answer between the reserved `ANS_START` / `ANS_END` tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TorError};

/// Longest question any family produces.
pub const MAX_QUESTION_LEN: usize = 3;

/// Cell value for an empty (placeholder) cell.
pub const PAD_CELL: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionFamily {
    Count,
    Compare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct TaskConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub alphabet_size: usize,
    pub question_families: Vec<QuestionFamily>,
    pub max_answer: usize,
}

impl Default for TaskConfig {
    /// The 3x3, four-symbol counting task.
    fn default() -> Self {
        Self {
            grid_height: 3,
            grid_width: 3,
            alphabet_size: 4,
            question_families: vec![QuestionFamily::Count],
            max_answer: 9,
        }
    }
}

impl TaskConfig {
    pub fn cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TorError::Config(m));
        if self.grid_height == 0 || self.grid_width == 0 {
            return bad("task grid dimensions must be positive".into());
        }
        if !(2..=26).contains(&self.alphabet_size) {
            return bad(format!("task.alphabetSize {} outside 2..=26", self.alphabet_size));
        }
        if self.cells() > 64 {
            return bad(format!("task grid has {} cells, at most 64 allowed", self.cells()));
        }
        if self.max_answer < self.cells() {
            return bad(format!(
                "task.maxAnswer {} smaller than the cell count {}",
                self.max_answer,
                self.cells()
            ));
        }
        if self.question_families.is_empty() {
            return bad("task.questionFamilies is empty".into());
        }
        Ok(())
    }

    /// Longest question in tokens.
    pub fn max_question_len(&self) -> usize {
        if self.question_families.contains(&QuestionFamily::Compare) {
            3
        } else {
            2
        }
    }
}

/// Token layout shared by the task, the verifier and the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    alphabet_size: usize,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const EOS: usize = 1;
    pub const ANS_START: usize = 2;
    pub const ANS_END: usize = 3;
    pub const COUNT: usize = 4;
    pub const COMPARE: usize = 5;
    const DIGIT0: usize = 6;
    const SYMBOL0: usize = 16;

    pub fn new(alphabet_size: usize) -> Self {
        Self { alphabet_size }
    }

    pub fn for_task(task: &TaskConfig) -> Self {
        Self::new(task.alphabet_size)
    }

    pub fn size(&self) -> usize {
        Self::SYMBOL0 + self.alphabet_size
    }

    pub fn digit(d: usize) -> usize {
        debug_assert!(d < 10);
        Self::DIGIT0 + d
    }

    /// Token for grid symbol `s` (1-based).
    pub fn symbol(&self, s: u32) -> usize {
        debug_assert!(s >= 1 && s as usize <= self.alphabet_size);
        Self::SYMBOL0 + s as usize - 1
    }

    pub fn as_digit(&self, token: usize) -> Option<usize> {
        (Self::DIGIT0..Self::DIGIT0 + 10).contains(&token).then(|| token - Self::DIGIT0)
    }

    pub fn as_symbol(&self, token: usize) -> Option<u32> {
        (Self::SYMBOL0..self.size()).contains(&token).then(|| (token - Self::SYMBOL0 + 1) as u32)
    }

    /// Human-readable token, used for logs and CSV exports.
    pub fn name(&self, token: usize) -> String {
        match token {
            Self::PAD => "PAD".into(),
            Self::EOS => "EOS".into(),
            Self::ANS_START => "ANS_START".into(),
            Self::ANS_END => "ANS_END".into(),
            Self::COUNT => "COUNT".into(),
            Self::COMPARE => "COMPARE".into(),
            t => {
                if let Some(d) = self.as_digit(t) {
                    d.to_string()
                } else if let Some(s) = self.as_symbol(t) {
                    symbol_name(s)
                } else {
                    format!("<{t}>")
                }
            }
        }
    }

    /// Tokens that spell a canonical answer string, if it is expressible.
    pub fn answer_tokens(&self, answer: &str) -> Option<Vec<usize>> {
        if !answer.is_empty() && answer.bytes().all(|b| b.is_ascii_digit()) {
            return Some(answer.bytes().map(|b| Self::digit((b - b'0') as usize)).collect());
        }
        (1..=self.alphabet_size as u32)
            .find(|&s| symbol_name(s) == answer)
            .map(|s| vec![self.symbol(s)])
    }
}

/// `A`, `B`, ... for symbols 1, 2, ...
pub fn symbol_name(s: u32) -> String {
    debug_assert!((1..=26).contains(&s));
    char::from(b'A' + (s - 1) as u8).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub seed: u64,
    pub grid: Vec<Vec<u32>>,
    pub question: Vec<usize>,
    pub answer: String,
}

impl SyntheticSample {
    /// Row-major cell symbols.
    pub fn cells(&self) -> Vec<u32> {
        self.grid.iter().flatten().copied().collect()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// The all-PAD grid used as the "no image" condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaceholderImage {
    cells: Vec<u32>,
}

impl PlaceholderImage {
    pub fn new(task: &TaskConfig) -> Self {
        Self { cells: vec![PAD_CELL; task.cells()] }
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }
}

fn count_symbol(cells: &[u32], s: u32) -> usize {
    cells.iter().filter(|&&c| c == s).count()
}

/// Applies the task rule to a grid and question.
pub fn solve(vocab: &Vocab, cells: &[u32], question: &[usize]) -> Option<String> {
    match question {
        [Vocab::COUNT, s] => Some(count_symbol(cells, vocab.as_symbol(*s)?).to_string()),
        [Vocab::COMPARE, a, b] => {
            let (a, b) = (vocab.as_symbol(*a)?, vocab.as_symbol(*b)?);
            let (ca, cb) = (count_symbol(cells, a), count_symbol(cells, b));
            let winner = match ca.cmp(&cb) {
                std::cmp::Ordering::Greater => a,
                std::cmp::Ordering::Less => b,
                std::cmp::Ordering::Equal => a.min(b),
            };
            Some(symbol_name(winner))
        }
        _ => None,
    }
}

/// Deterministic sample for `(seed, config)`.
pub fn generate_sample(seed: u64, config: &TaskConfig) -> SyntheticSample {
    let vocab = Vocab::for_task(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.alphabet_size as u32;
    let grid: Vec<Vec<u32>> = (0..config.grid_height)
        .map(|_| (0..config.grid_width).map(|_| rng.random_range(1..=k)).collect())
        .collect();
    let family = config.question_families[rng.random_range(0..config.question_families.len())];
    let question = match family {
        QuestionFamily::Count => vec![Vocab::COUNT, vocab.symbol(rng.random_range(1..=k))],
        QuestionFamily::Compare => {
            let a = rng.random_range(1..=k);
            let mut b = rng.random_range(1..k);
            if b >= a {
                b += 1;
            }
            vec![Vocab::COMPARE, vocab.symbol(a), vocab.symbol(b)]
        }
    };
    let cells: Vec<u32> = grid.iter().flatten().copied().collect();
    let answer = solve(&vocab, &cells, &question).expect("generated question is well-formed");
    SyntheticSample { seed, grid, question, answer }
}

/// `ANS_START <answer> ANS_END EOS`.
pub fn gold_response(vocab: &Vocab, sample: &SyntheticSample) -> Vec<usize> {
    let mut out = vec![Vocab::ANS_START];
    out.extend(vocab.answer_tokens(&sample.answer).expect("answer is expressible"));
    out.push(Vocab::ANS_END);
    out.push(Vocab::EOS);
    out
}

/// Canonical string of an answer span, or `None` when the span is not a
/// number or a single symbol.
fn render_span(vocab: &Vocab, span: &[usize]) -> Option<String> {
    if span.is_empty() {
        return None;
    }
    if let Some(digits) = span.iter().map(|&t| vocab.as_digit(t)).collect::<Option<Vec<_>>>() {
        let trimmed: String = digits.iter().map(|d| char::from(b'0' + *d as u8)).collect();
        let trimmed = trimmed.trim_start_matches('0');
        return Some(if trimmed.is_empty() { "0".into() } else { trimmed.into() });
    }
    match span {
        [t] => vocab.as_symbol(*t).map(symbol_name),
        _ => None,
    }
}

/// Binary reward: 1 iff the response holds exactly one well-formed answer
/// span and its canonical string equals `ground_truth`.
pub fn verify(vocab: &Vocab, response: &[usize], ground_truth: &str) -> u8 {
    let starts: Vec<usize> =
        response.iter().enumerate().filter(|(_, &t)| t == Vocab::ANS_START).map(|(i, _)| i).collect();
    let ends: Vec<usize> =
        response.iter().enumerate().filter(|(_, &t)| t == Vocab::ANS_END).map(|(i, _)| i).collect();
    let ([start], [end]) = (starts.as_slice(), ends.as_slice()) else {
        return 0;
    };
    if end <= start {
        return 0;
    }
    match render_span(vocab, &response[start + 1..*end]) {
        Some(s) if s == ground_truth => 1,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(4)
    }

    #[test]
    fn count_rule_by_construction() {
        let v = vocab();
        // A A / B A
        let cells = [1, 1, 2, 1];
        assert_eq!(solve(&v, &cells, &[Vocab::COUNT, v.symbol(1)]).unwrap(), "3");
        assert_eq!(solve(&v, &cells, &[Vocab::COUNT, v.symbol(4)]).unwrap(), "0");
    }

    #[test]
    fn compare_ties_go_to_smaller_symbol() {
        let v = vocab();
        let cells = [1, 2, 2, 1, 3, 3];
        assert_eq!(solve(&v, &cells, &[Vocab::COMPARE, v.symbol(3), v.symbol(2)]).unwrap(), "B");
        assert_eq!(solve(&v, &cells, &[Vocab::COMPARE, v.symbol(4), v.symbol(1)]).unwrap(), "A");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = TaskConfig { grid_height: 3, grid_width: 3, alphabet_size: 4, ..Default::default() };
        let a = generate_sample(7, &cfg);
        let b = generate_sample(7, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.to_json_line(), b.to_json_line());
        assert_ne!(a, generate_sample(8, &cfg));
    }

    #[test]
    fn verify_examples() {
        let v = vocab();
        let three = vec![Vocab::ANS_START, Vocab::digit(3), Vocab::ANS_END, Vocab::EOS];
        let four = vec![Vocab::ANS_START, Vocab::digit(4), Vocab::ANS_END];
        assert_eq!(verify(&v, &three, "3"), 1);
        assert_eq!(verify(&v, &four, "3"), 0);
        assert_eq!(verify(&v, &[Vocab::digit(3), Vocab::ANS_END], "3"), 0);
        // truncated: no closing marker
        assert_eq!(verify(&v, &[Vocab::ANS_START, Vocab::digit(3)], "3"), 0);
        // two spans
        let twice = [three.clone(), three.clone()].concat();
        assert_eq!(verify(&v, &twice, "3"), 0);
        // leading zeros are canonicalized
        let padded = vec![Vocab::ANS_START, Vocab::digit(0), Vocab::digit(3), Vocab::ANS_END];
        assert_eq!(verify(&v, &padded, "3"), 1);
        // symbol answers
        let sym = vec![Vocab::ANS_START, v.symbol(2), Vocab::ANS_END];
        assert_eq!(verify(&v, &sym, "B"), 1);
        assert_eq!(verify(&v, &[Vocab::ANS_START, Vocab::ANS_END], "0"), 0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TaskConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alphabet_size = 1;
        assert!(cfg.validate().is_err());
        let cfg = TaskConfig { grid_height: 9, grid_width: 8, max_answer: 72, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TaskConfig { max_answer: 8, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn placeholder_has_no_symbols() {
        let p = PlaceholderImage::new(&TaskConfig::default());
        assert_eq!(p.cells().len(), 9);
        assert!(p.cells().iter().all(|&c| c == PAD_CELL));
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = TaskConfig {
            question_families: vec![QuestionFamily::Count, QuestionFamily::Compare],
            ..Default::default()
        };
        let s = generate_sample(11, &cfg);
        let line = s.to_json_line();
        assert!(line.starts_with("{\"seed\":11,\"grid\":[["));
        assert_eq!(SyntheticSample::from_json_line(&line).unwrap(), s);
    }
}
