//! Synthetic multiple-choice instances with planted evidence.
//!
//! Token-overlap stands in for relevance. Every option carries its own
//! signal tokens plus a few tokens shared by all four options. Evidence
//! sentences contain signal tokens of the correct option only; distractor
//! sentences either contain the shared tokens (equally relevant to every
//! option) or nothing but neutral filler.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence_filter::Permutation;
use crate::NUM_OPTIONS;

pub type Token = u32;
pub type Sentence = Vec<Token>;

/// Sequence start marker.
pub const BOS: Token = 0;
/// Segment separator.
pub const SEP: Token = 1;
/// Number of reserved special ids at the bottom of the vocabulary.
pub const NUM_SPECIAL: Token = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaInstance {
    pub context: Vec<Sentence>,
    pub question: Sentence,
    pub options: Vec<Sentence>,
    pub label: usize,
    /// Which context sentences were planted as evidence. Never shown to the model.
    pub evidence_mask: Vec<bool>,
}

impl McqaInstance {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() != NUM_OPTIONS {
            return Err(Error::contract(format!(
                "expected {NUM_OPTIONS} options, got {}",
                self.options.len()
            )));
        }
        if self.label >= NUM_OPTIONS {
            return Err(Error::Index {
                what: "label",
                index: self.label,
                limit: NUM_OPTIONS,
            });
        }
        if self.context.is_empty() {
            return Err(Error::contract("context needs at least one sentence"));
        }
        if self.evidence_mask.len() != self.context.len() {
            return Err(Error::contract(format!(
                "evidence_mask has {} entries for {} sentences",
                self.evidence_mask.len(),
                self.context.len()
            )));
        }
        Ok(())
    }

    pub fn max_token(&self) -> Token {
        self.context
            .iter()
            .chain(std::iter::once(&self.question))
            .chain(&self.options)
            .flat_map(|s| s.iter().copied())
            .max()
            .unwrap_or(0)
    }
}

/// Reorders options so that new option `i` is old option `perm[i]`; the
/// label follows the gold option's content.
pub fn permute_options(instance: &McqaInstance, perm: &Permutation) -> McqaInstance {
    let map = perm.as_slice();
    let options = map.iter().map(|&src| instance.options[src].clone()).collect();
    let label = perm.inverse().as_slice()[instance.label];
    McqaInstance {
        context: instance.context.clone(),
        question: instance.question.clone(),
        options,
        label,
        evidence_mask: instance.evidence_mask.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorRelevance {
    /// Distractors contain the tokens every option shares.
    UniformRelevant,
    /// Distractors contain neutral filler only.
    Irrelevant,
}

/// Disjoint token ranges: `[neutral_start, neutral_start + neutral_count)`
/// for filler and shared tokens, then one block of `signal_per_option`
/// ids per option starting at `signal_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabPartition {
    pub neutral_start: Token,
    pub neutral_count: Token,
    pub signal_start: Token,
    pub signal_per_option: Token,
}

impl Default for VocabPartition {
    fn default() -> Self {
        // 64 ids: 2 specials, 30 neutral, 4 × 8 signal.
        VocabPartition {
            neutral_start: NUM_SPECIAL,
            neutral_count: 30,
            signal_start: 32,
            signal_per_option: 8,
        }
    }
}

impl VocabPartition {
    pub fn vocab_end(&self) -> Token {
        (self.neutral_start + self.neutral_count)
            .max(self.signal_start + self.signal_per_option * NUM_OPTIONS as Token)
    }

    pub fn signal_group(&self, group: usize) -> std::ops::Range<Token> {
        let start = self.signal_start + self.signal_per_option * group as Token;
        start..start + self.signal_per_option
    }

    /// Index of the signal group containing `token`, if any.
    pub fn group_of(&self, token: Token) -> Option<usize> {
        (0..NUM_OPTIONS).find(|&g| self.signal_group(g).contains(&token))
    }

    fn validate(&self) -> Result<()> {
        let neutral_end = self.neutral_start + self.neutral_count;
        let signal_end = self.signal_start + self.signal_per_option * NUM_OPTIONS as Token;
        if self.neutral_start < NUM_SPECIAL || self.signal_start < NUM_SPECIAL {
            return Err(Error::Generation("partitions overlap the special ids".into()));
        }
        let disjoint = neutral_end <= self.signal_start || signal_end <= self.neutral_start;
        if !disjoint {
            return Err(Error::Generation("neutral and signal partitions overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub n_sentences: usize,
    pub n_evidence: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub question_len: usize,
    /// Distinct signal tokens per option.
    pub option_signal_len: usize,
    /// Tokens appended to every option (identical across the four).
    pub shared_option_tokens: usize,
    pub vocab: VocabPartition,
    pub distractor_relevance: DistractorRelevance,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_sentences: 8,
            n_evidence: 2,
            min_sentence_len: 4,
            max_sentence_len: 8,
            question_len: 3,
            option_signal_len: 2,
            shared_option_tokens: 1,
            vocab: VocabPartition::default(),
            distractor_relevance: DistractorRelevance::UniformRelevant,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let fail = |m: &str| Err(Error::Generation(m.to_string()));
        if self.n_sentences == 0 {
            return fail("need at least one context sentence");
        }
        if self.n_evidence > self.n_sentences {
            return fail("n_evidence exceeds n_sentences");
        }
        if self.min_sentence_len == 0 || self.min_sentence_len > self.max_sentence_len {
            return fail("invalid sentence length range");
        }
        if self.option_signal_len == 0 {
            return fail("options need at least one signal token");
        }
        if self.option_signal_len > self.vocab.signal_per_option as usize {
            return fail("signal partition smaller than option_signal_len");
        }
        // Filler needs at least one neutral id besides the shared ones.
        if self.shared_option_tokens + 1 > self.vocab.neutral_count as usize {
            return fail("neutral partition too small for shared tokens plus filler");
        }
        if self.distractor_relevance == DistractorRelevance::UniformRelevant
            && self.shared_option_tokens > self.min_sentence_len
        {
            return fail("sentences too short to hold the shared tokens");
        }
        Ok(())
    }

    /// Longest possible `[BOS] C [SEP] Q O [SEP]` sequence.
    pub fn max_packed_len(&self) -> usize {
        3 + self.n_sentences * self.max_sentence_len
            + self.question_len
            + self.option_signal_len
            + self.shared_option_tokens
    }
}

/// Draws one instance. Uses only `rng`, so equal streams give equal instances.
pub fn generate_instance<R: Rng + ?Sized>(spec: &GenSpec, rng: &mut R) -> Result<McqaInstance> {
    spec.validate()?;
    let v = &spec.vocab;
    let neutral: Vec<Token> = (v.neutral_start..v.neutral_start + v.neutral_count).collect();
    let picked = index::sample(rng, neutral.len(), spec.shared_option_tokens);
    let shared: Vec<Token> = picked.iter().map(|i| neutral[i]).collect();
    let filler: Vec<Token> = neutral.iter().copied().filter(|t| !shared.contains(t)).collect();

    let label = rng.gen_range(0..NUM_OPTIONS);
    let mut groups: Vec<usize> = (0..NUM_OPTIONS).collect();
    groups.shuffle(rng);

    let options: Vec<Sentence> = groups
        .iter()
        .map(|&g| {
            let range = v.signal_group(g);
            let ids = index::sample(rng, range.len(), spec.option_signal_len);
            let mut opt: Sentence = ids.iter().map(|i| range.start + i as Token).collect();
            opt.extend_from_slice(&shared);
            opt
        })
        .collect();
    let gold_signal = &options[label][..spec.option_signal_len];

    let evidence = index::sample(rng, spec.n_sentences, spec.n_evidence).into_vec();
    let mut evidence_mask = vec![false; spec.n_sentences];
    for &e in &evidence {
        evidence_mask[e] = true;
    }

    let mut context = Vec::with_capacity(spec.n_sentences);
    for &is_evidence in &evidence_mask {
        let len = rng.gen_range(spec.min_sentence_len..=spec.max_sentence_len);
        let mut sentence: Sentence = (0..len).map(|_| *filler.choose(rng).expect("filler")).collect();
        let planted: Vec<Token> = if is_evidence {
            let hits = rng.gen_range(1..=spec.option_signal_len.min(len));
            gold_signal.choose_multiple(rng, hits).copied().collect()
        } else {
            match spec.distractor_relevance {
                DistractorRelevance::UniformRelevant => shared.clone(),
                DistractorRelevance::Irrelevant => Vec::new(),
            }
        };
        let slots = index::sample(rng, len, planted.len());
        for (slot, tok) in slots.iter().zip(planted) {
            sentence[slot] = tok;
        }
        context.push(sentence);
    }

    let question = (0..spec.question_len)
        .map(|_| *filler.choose(rng).expect("filler"))
        .collect();

    Ok(McqaInstance {
        context,
        question,
        options,
        label,
        evidence_mask,
    })
}

/// Instance `i` is drawn from its own ChaCha stream `i` under `spec.seed`,
/// so any prefix or slice of a dataset can be regenerated independently.
pub fn generate_dataset(spec: &GenSpec, count: usize) -> Result<Vec<McqaInstance>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            generate_instance(spec, &mut rng)
        })
        .collect()
}

const DATASET_FORMAT: &str = "evfilter-mcqa";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    count: usize,
}

/// Writes a header line followed by one JSON record per instance.
pub fn write_dataset<W: Write>(instances: &[McqaInstance], mut out: W) -> std::io::Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        count: instances.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for inst in instances {
        writeln!(out, "{}", serde_json::to_string(inst)?)?;
    }
    out.flush()
}

pub fn read_dataset<R: BufRead>(mut input: R) -> Result<Vec<McqaInstance>> {
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let mut buf = Vec::new();
    let mut line = 0usize;
    let mut header: Option<DatasetHeader> = None;
    let mut records = Vec::new();
    loop {
        buf.clear();
        let n = input
            .read_until(b'\n', &mut buf)
            .map_err(|e| parse_err(line + 1, e.to_string()))?;
        if n == 0 {
            break;
        }
        line += 1;
        if buf.pop() != Some(b'\n') {
            return Err(parse_err(
                line,
                "record is not newline-terminated (truncated file?)".into(),
            ));
        }
        let text = std::str::from_utf8(&buf).map_err(|e| parse_err(line, e.to_string()))?;
        if header.is_none() {
            let h: DatasetHeader =
                serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))?;
            if h.format != DATASET_FORMAT || h.version != DATASET_VERSION {
                return Err(parse_err(
                    line,
                    format!("unsupported dataset format {} v{}", h.format, h.version),
                ));
            }
            header = Some(h);
            continue;
        }
        let inst: McqaInstance =
            serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))?;
        inst.validate().map_err(|e| parse_err(line, e.to_string()))?;
        records.push(inst);
    }
    let header = header.ok_or_else(|| parse_err(1, "missing header record".into()))?;
    if records.len() != header.count {
        return Err(parse_err(
            line + 1,
            format!("header announces {} records, found {}", header.count, records.len()),
        ));
    }
    Ok(records)
}

pub fn save_dataset(instances: &[McqaInstance], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(instances, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<McqaInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}
