//! Arithmetic and grammar corpora.
//!
//! Arithmetic instances render as `a OP b =` followed by a sign slot and a
//! fixed number of zero-padded result digits, all of which are masked.
//! Operand magnitudes follow a distribution over powers-of-ten buckets.
//!
//! The linguistic proxy tasks are two toy grammars
//! (`S → NP VP`, `NP → Det Noun`, `VP → Verb NP | Verb`) over disjoint
//! 15-word lexicons. Corpus items pack a few sentences separated by
//! `[SEP]`.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::{self, CLS, EQUALS, FIRST_WORD, MASK, MINUS, PLUS, SEP};
use crate::model::TokenSeq;
use crate::util::rng_for;

/// Corpus words in vocabulary order: grammar A determiners, nouns, verbs,
/// then grammar B determiners, nouns, verbs.
pub const LEXICON: [&str; 30] = [
    "the", "a", "this", //
    "cat", "dog", "bird", "fish", "horse", "mouse", //
    "sees", "likes", "chases", "finds", "hears", "knows", //
    "every", "some", "that", //
    "car", "boat", "train", "plane", "truck", "ship", //
    "moves", "pulls", "carries", "stops", "passes", "follows",
];

const DETS: usize = 3;
const NOUNS: usize = 6;
const VERBS: usize = 6;
const SUBLEXICON: usize = DETS + NOUNS + VERBS;

pub const DEFAULT_EXPONENT_PROBS: [f64; 5] = [0.30, 0.30, 0.20, 0.15, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentDist {
    pub probs: Vec<f64>,
    pub e_max: u32,
}

impl Default for ExponentDist {
    fn default() -> Self {
        ExponentDist {
            probs: DEFAULT_EXPONENT_PROBS.to_vec(),
            e_max: 4,
        }
    }
}

impl ExponentDist {
    /// Buckets `0..probs.len()`, with `e_max = probs.len() - 1`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let e_max = probs.len().saturating_sub(1) as u32;
        let d = ExponentDist { probs, e_max };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() || self.probs.len() > self.e_max as usize + 1 {
            return Err(Error::Config(format!(
                "{} bucket probabilities for e_max {}",
                self.probs.len(),
                self.e_max
            )));
        }
        if self.e_max > 15 {
            return Err(Error::Config(format!("e_max {} too large", self.e_max)));
        }
        if self.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config("bucket probabilities must be nonnegative".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("bucket probabilities sum to {total}")));
        }
        Ok(())
    }

    /// Result digit slots: enough for the sum of two maximal operands.
    pub fn result_width(&self) -> usize {
        self.e_max as usize + 2
    }
}

/// Magnitude bucket of a nonnegative operand.
pub fn exponent_bucket(value: i64) -> u32 {
    let v = value.unsigned_abs();
    if v < 10 {
        0
    } else {
        v.ilog10()
    }
}

pub fn sample_operand(dist: &ExponentDist, rng: &mut impl Rng) -> i64 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut bucket = dist.probs.len() - 1;
    for (e, &p) in dist.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            bucket = e;
            break;
        }
    }
    // guard against rounding leaving mass on a zero-probability tail bucket
    while dist.probs[bucket] == 0.0 && bucket > 0 {
        bucket -= 1;
    }
    if bucket == 0 {
        rng.gen_range(0..10)
    } else {
        let lo = 10i64.pow(bucket as u32);
        rng.gen_range(lo..lo * 10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArithOp {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
}

impl ArithOp {
    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            ArithOp::Add => a + b,
            ArithOp::Sub => a - b,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            ArithOp::Add => '+',
            ArithOp::Sub => '-',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArithInstance {
    pub a: i64,
    pub op: ArithOp,
    pub b: i64,
    pub result: i64,
    pub seq: TokenSeq,
}

impl ArithInstance {
    pub fn surface(&self) -> String {
        format!("{}{}{}=", self.a, self.op.symbol(), self.b)
    }
}

/// Sign token followed by `width` zero-padded digit tokens.
pub fn numeral_tokens(value: i64, width: usize) -> Result<Vec<usize>> {
    let magnitude = value.unsigned_abs();
    let digits = magnitude.to_string();
    if digits.len() > width {
        return Err(Error::Render(format!("{value} does not fit in {width} digits")));
    }
    let mut out = Vec::with_capacity(width + 1);
    out.push(if value < 0 { MINUS } else { PLUS });
    out.extend(std::iter::repeat(vocab::digit_id(0)).take(width - digits.len()));
    out.extend(digits.bytes().map(|c| vocab::digit_id(c - b'0')));
    Ok(out)
}

pub fn render_instance(a: i64, op: ArithOp, b: i64, e_max: u32) -> Result<ArithInstance> {
    let limit = 10i64.pow(e_max + 1);
    if a.abs() >= limit || b.abs() >= limit {
        return Err(Error::Render(format!("operands {a}, {b} exceed 10^{}", e_max + 1)));
    }
    let width = e_max as usize + 2;
    let result = op.apply(a, b);
    let targets = numeral_tokens(result, width)?;

    let mut ids = vocab::tokenize(&format!("{a}{}{b}=", op.symbol()))?;
    debug_assert_eq!(*ids.last().unwrap(), EQUALS);
    let first = ids.len();
    ids.extend(std::iter::repeat(MASK).take(targets.len()));
    let seq = TokenSeq::new(ids, (first..first + targets.len()).collect(), targets)?;
    Ok(ArithInstance { a, op, b, result, seq })
}

pub fn gen_arith_dataset(n: usize, dist: &ExponentDist, seed: u64) -> Result<Vec<ArithInstance>> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be at least 1".into()));
    }
    dist.validate()?;
    let mut rng = rng_for(seed, 0xA417);
    (0..n)
        .map(|_| {
            let a = sample_operand(dist, &mut rng);
            let op = if rng.gen_bool(0.5) { ArithOp::Add } else { ArithOp::Sub };
            let b = sample_operand(dist, &mut rng);
            render_instance(a, op, b, dist.e_max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grammar {
    #[serde(rename = "A")]
    A,
    #[serde(rename = "B")]
    B,
}

impl Grammar {
    pub fn label(self) -> &'static str {
        match self {
            Grammar::A => "grammar_a",
            Grammar::B => "grammar_b",
        }
    }

    /// Short name used in file and column names.
    pub fn name(self) -> &'static str {
        match self {
            Grammar::A => "A",
            Grammar::B => "B",
        }
    }

    fn first_word(self) -> usize {
        FIRST_WORD
            + match self {
                Grammar::A => 0,
                Grammar::B => SUBLEXICON,
            }
    }

    pub fn dets(self) -> std::ops::Range<usize> {
        let s = self.first_word();
        s..s + DETS
    }

    pub fn nouns(self) -> std::ops::Range<usize> {
        let s = self.first_word() + DETS;
        s..s + NOUNS
    }

    pub fn verbs(self) -> std::ops::Range<usize> {
        let s = self.first_word() + DETS + NOUNS;
        s..s + VERBS
    }

    pub fn words(self) -> std::ops::Range<usize> {
        let s = self.first_word();
        s..s + SUBLEXICON
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub grammar: Grammar,
    pub n_sentences: usize,
    pub sentences_per_item: usize,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            grammar: Grammar::A,
            n_sentences: 4000,
            sentences_per_item: 4,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if self.n_sentences == 0 || self.sentences_per_item == 0 {
            return Err(Error::Config("corpus needs at least one sentence per item".into()));
        }
        Ok(())
    }
}

/// One sentence of `grammar` as token ids.
pub fn sample_sentence(grammar: Grammar, rng: &mut impl Rng) -> Vec<usize> {
    let pick = |r: std::ops::Range<usize>, rng: &mut dyn rand::RngCore| rng.gen_range(r);
    let mut out = vec![pick(grammar.dets(), rng), pick(grammar.nouns(), rng), pick(grammar.verbs(), rng)];
    if rng.gen_bool(0.5) {
        out.push(pick(grammar.dets(), rng));
        out.push(pick(grammar.nouns(), rng));
    }
    out
}

/// True when `words` is derivable from the grammar.
pub fn parses(grammar: Grammar, words: &[usize]) -> bool {
    let is = |r: std::ops::Range<usize>, i: usize| r.contains(&words[i]);
    match words.len() {
        3 => is(grammar.dets(), 0) && is(grammar.nouns(), 1) && is(grammar.verbs(), 2),
        5 => {
            is(grammar.dets(), 0)
                && is(grammar.nouns(), 1)
                && is(grammar.verbs(), 2)
                && is(grammar.dets(), 3)
                && is(grammar.nouns(), 4)
        }
        _ => false,
    }
}

/// Split an unmasked corpus item (`[CLS] s1 [SEP] s2 ...`) into sentences.
pub fn sentences(ids: &[usize]) -> Vec<&[usize]> {
    ids[1..].split(|&t| t == SEP).collect()
}

pub fn gen_text_corpus(spec: &CorpusSpec) -> Result<Vec<TokenSeq>> {
    spec.validate()?;
    let mut rng: ChaCha8Rng = rng_for(spec.seed, 0x7E47 + spec.grammar as u64);
    let n_items = spec.n_sentences.div_ceil(spec.sentences_per_item);
    let mut remaining = spec.n_sentences;
    // running fractional mask budget keeps the corpus-wide rate exact
    let mut budget = 0.0f64;
    let mut emitted = 0usize;
    let mut corpus = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let count = remaining.min(spec.sentences_per_item);
        remaining -= count;
        let mut ids = vec![CLS];
        for s in 0..count {
            if s > 0 {
                ids.push(SEP);
            }
            ids.extend(sample_sentence(spec.grammar, &mut rng));
        }
        let word_positions: Vec<usize> = (1..ids.len()).filter(|&p| ids[p] != SEP).collect();
        budget += spec.mask_rate * word_positions.len() as f64;
        let k = (budget.round() as i64 - emitted as i64).clamp(1, word_positions.len() as i64) as usize;
        emitted += k;

        let mut chosen: Vec<usize> = sample_indices(&mut rng, word_positions.len(), k)
            .into_iter()
            .map(|i| word_positions[i])
            .collect();
        chosen.sort_unstable();
        let targets = chosen.iter().map(|&p| ids[p]).collect();
        for &p in &chosen {
            ids[p] = MASK;
        }
        corpus.push(TokenSeq::new(ids, chosen, targets)?);
    }
    Ok(corpus)
}

/// Original (unmasked) token ids of a corpus item.
pub fn unmask(seq: &TokenSeq) -> Vec<usize> {
    let mut ids = seq.ids.clone();
    for (&p, &t) in seq.mask_positions.iter().zip(&seq.target_ids) {
        ids[p] = t;
    }
    ids
}

#[derive(Debug, Serialize, Deserialize)]
struct ArithRecord {
    a: i64,
    op: ArithOp,
    b: i64,
    result: i64,
    ids: Vec<usize>,
    mask_positions: Vec<usize>,
    targets: Vec<usize>,
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_arith_jsonl(path: &Path, data: &[ArithInstance]) -> Result<()> {
    write_lines(
        path,
        data.iter().map(|x| ArithRecord {
            a: x.a,
            op: x.op,
            b: x.b,
            result: x.result,
            ids: x.seq.ids.clone(),
            mask_positions: x.seq.mask_positions.clone(),
            targets: x.seq.target_ids.clone(),
        }),
    )
}

pub fn read_arith_jsonl(path: &Path) -> Result<Vec<ArithInstance>> {
    read_lines::<ArithRecord>(path)?
        .into_iter()
        .map(|r| {
            if r.op.apply(r.a, r.b) != r.result {
                return Err(Error::Format(format!("{} {:?} {} != {}", r.a, r.op, r.b, r.result)));
            }
            Ok(ArithInstance {
                a: r.a,
                op: r.op,
                b: r.b,
                result: r.result,
                seq: TokenSeq::new(r.ids, r.mask_positions, r.targets)?,
            })
        })
        .collect()
}

pub fn write_corpus_jsonl(path: &Path, corpus: &[TokenSeq]) -> Result<()> {
    write_lines(path, corpus.iter())
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<TokenSeq>> {
    let seqs: Vec<TokenSeq> = read_lines(path)?;
    for s in &seqs {
        s.validate()?;
    }
    Ok(seqs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalanalysis::decode_numeral;
    use crate::model::vocab::digit_id;

    #[test]
    fn single_bucket_distributions() {
        let mut rng = rng_for(3, 0);
        let d0 = ExponentDist::new(vec![1.0]).unwrap();
        let d2 = ExponentDist::new(vec![0.0, 0.0, 1.0]).unwrap();
        for _ in 0..2000 {
            assert!((0..10).contains(&sample_operand(&d0, &mut rng)));
            assert!((100..1000).contains(&sample_operand(&d2, &mut rng)));
        }
    }

    #[test]
    fn invalid_distributions() {
        assert!(ExponentDist::new(vec![0.5, 0.4]).is_err());
        assert!(ExponentDist::new(vec![1.2, -0.2]).is_err());
        assert!(ExponentDist::new(vec![]).is_err());
    }

    #[test]
    fn render_twelve_plus_seven() {
        let x = render_instance(12, ArithOp::Add, 7, 4).unwrap();
        assert_eq!(x.surface(), "12+7=");
        assert_eq!(&x.seq.ids[..6], &[2, 9, 10, 4, 15, 6]);
        let expected: Vec<usize> = vec![PLUS, digit_id(0), digit_id(0), digit_id(0), digit_id(0), digit_id(1), digit_id(9)];
        assert_eq!(x.seq.target_ids, expected);
        assert_eq!(x.seq.mask_positions, (6..13).collect::<Vec<_>>());
        assert!(x.seq.ids[6..].iter().all(|&t| t == MASK));
    }

    #[test]
    fn render_negative_result() {
        let x = render_instance(5, ArithOp::Sub, 9, 4).unwrap();
        assert_eq!(x.seq.target_ids[0], MINUS);
        assert_eq!(decode_numeral(&x.seq.target_ids).unwrap(), -4);
    }

    #[test]
    fn render_width_limits() {
        let x = render_instance(99999, ArithOp::Add, 99999, 4).unwrap();
        assert_eq!(decode_numeral(&x.seq.target_ids).unwrap(), 199_998);
        assert!(matches!(render_instance(100_000, ArithOp::Add, 1, 4), Err(Error::Render(_))));
        assert!(numeral_tokens(999_999, 6).is_ok());
        assert!(matches!(numeral_tokens(1_000_000, 6), Err(Error::Render(_))));
    }

    #[test]
    fn dataset_deterministic_and_consistent() {
        let d = ExponentDist::default();
        let a = gen_arith_dataset(10, &d, 42).unwrap();
        assert_eq!(a, gen_arith_dataset(10, &d, 42).unwrap());
        assert_ne!(a, gen_arith_dataset(10, &d, 43).unwrap());
        for x in &a {
            assert_eq!(x.op.apply(x.a, x.b), x.result);
            assert_eq!(decode_numeral(&x.seq.target_ids).unwrap(), x.result);
        }
        assert!(gen_arith_dataset(0, &d, 1).is_err());
    }

    #[test]
    fn full_size_dataset() {
        let data = gen_arith_dataset(21_838, &ExponentDist::default(), 0).unwrap();
        assert_eq!(data.len(), 21_838);
        let longest = data.iter().map(|x| x.seq.len()).max().unwrap();
        assert!(longest <= crate::model::ModelConfig::default().max_seq);
    }

    #[test]
    fn corpus_sentences_parse() {
        for grammar in [Grammar::A, Grammar::B] {
            let spec = CorpusSpec {
                grammar,
                n_sentences: 401,
                ..Default::default()
            };
            let corpus = gen_text_corpus(&spec).unwrap();
            assert_eq!(corpus.len(), 101);
            let mut total = 0;
            for item in &corpus {
                assert!(!item.mask_positions.is_empty());
                for s in sentences(&unmask(item)) {
                    assert!(parses(grammar, s), "{}", vocab::detokenize(s));
                    total += 1;
                }
            }
            assert_eq!(total, 401);
        }
    }

    #[test]
    fn grammars_share_no_words() {
        let tokens = |g| {
            let spec = CorpusSpec {
                grammar: g,
                n_sentences: 2000,
                ..Default::default()
            };
            gen_text_corpus(&spec)
                .unwrap()
                .iter()
                .flat_map(unmask)
                .filter(|&t| t >= FIRST_WORD)
                .collect::<std::collections::HashSet<_>>()
        };
        let a = tokens(Grammar::A);
        let b = tokens(Grammar::B);
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 30);
    }

    #[test]
    fn corpus_rejects_bad_rate() {
        let spec = CorpusSpec {
            mask_rate: 1.0,
            ..Default::default()
        };
        assert!(gen_text_corpus(&spec).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_arith_dataset(25, &ExponentDist::default(), 9).unwrap();
        let path = dir.path().join("arith.jsonl");
        write_arith_jsonl(&path, &data).unwrap();
        assert_eq!(read_arith_jsonl(&path).unwrap(), data);
        let first = std::fs::read_to_string(&path).unwrap();
        let first = first.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        for key in ["a", "op", "b", "result", "ids", "mask_positions", "targets"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }

        let corpus = gen_text_corpus(&CorpusSpec::default()).unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus_jsonl(&path, &corpus).unwrap();
        assert_eq!(read_corpus_jsonl(&path).unwrap(), corpus);
    }
}
