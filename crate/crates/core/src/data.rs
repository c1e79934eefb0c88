//! Synthetic text + image-grid samples with planted entity-object triples.
//!
//! Text: filler tokens with one or more entity words (1-3 token patterns).
//! Image: a `G x G x c` grid where each triple paints an axis-aligned rectangle
//! whose channel signature is the one-hot relation followed by the binary code
//! of the entity word. Randomness comes from [`SplitMix64`] substreams keyed by
//! the dataset seed and the sample id.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWh;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::triple::Triple;

pub const PAD: usize = 0;
const MAX_WORD_LEN: usize = 3;
const MAX_RECT_SIDE: usize = 2;
const PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub seq_len: usize,
    pub grid: usize,
    pub img_channels: usize,
    pub relations: usize,
    pub max_triples: usize,
    /// Number of distinct entity words.
    pub entity_words: usize,
    pub filler_words: usize,
    pub noise: f64,
    /// All triples of a sample share one head entity.
    pub shared_entity: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 2000,
            n_test: 200,
            seq_len: 16,
            grid: 4,
            img_channels: 12,
            relations: 8,
            max_triples: 3,
            entity_words: 12,
            filler_words: 20,
            noise: 0.05,
            shared_entity: true,
        }
    }
}

/// Bits needed to write codes `1..=n`.
fn code_bits(n: usize) -> usize {
    (usize::BITS - n.leading_zeros()) as usize
}

impl DatasetSpec {
    pub fn signature_channels(&self) -> usize {
        self.relations + code_bits(self.entity_words)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("grid", self.grid),
            ("relations", self.relations),
            ("max_triples", self.max_triples),
            ("entity_words", self.entity_words),
            ("filler_words", self.filler_words),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        if self.img_channels < self.signature_channels() {
            return Err(Error::Capacity(format!(
                "img_channels {} < {} needed for {} relations and {} entity words",
                self.img_channels,
                self.signature_channels(),
                self.relations,
                self.entity_words
            )));
        }
        if self.max_triples > self.grid * self.grid {
            return Err(Error::Capacity(format!(
                "max_triples {} exceeds the {} cells of a {}x{} grid",
                self.max_triples,
                self.grid * self.grid,
                self.grid,
                self.grid
            )));
        }
        let words_in_text = if self.shared_entity { 1 } else { self.max_triples };
        if words_in_text * MAX_WORD_LEN > self.seq_len {
            return Err(Error::Capacity(format!(
                "max_triples {} entity words of up to {MAX_WORD_LEN} tokens do not fit seq_len {}",
                words_in_text, self.seq_len
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().size()
    }

    /// Largest vocabulary any data seed can produce; models sized with it
    /// accept data generated under every seed.
    pub fn vocab_bound(&self) -> usize {
        1 + self.filler_words + self.entity_words * MAX_WORD_LEN
    }
}

/// Token layout: pad, fillers, then each entity word's tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub fillers: std::ops::Range<usize>,
    pub words: Vec<Vec<usize>>,
}

impl Vocab {
    fn new(spec: &DatasetSpec) -> Self {
        let mut rng = SplitMix64::substream(spec.seed, "vocab");
        let fillers = 1..1 + spec.filler_words;
        let mut next = fillers.end;
        let words = (0..spec.entity_words)
            .map(|_| {
                let len = 1 + rng.index(MAX_WORD_LEN);
                let w: Vec<usize> = (next..next + len).collect();
                next += len;
                w
            })
            .collect();
        Self { fillers, words }
    }

    pub fn size(&self) -> usize {
        self.words.last().map_or(self.fillers.end, |w| w[w.len() - 1] + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<usize>,
    /// `(G, G, c)` values in `[0, 1]`.
    pub grid: Tensor,
    pub gold: Vec<Triple>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    tokens: Vec<usize>,
    grid: Vec<Vec<Vec<f64>>>,
    gold: Vec<Triple>,
}

impl Sample {
    pub fn validate(&self, seq_len: usize, relations: usize, max_triples: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Data(format!("sample {}: {msg}", self.id)));
        if self.tokens.len() != seq_len {
            return fail(format!("{} tokens, expected {seq_len}", self.tokens.len()));
        }
        if self.gold.is_empty() || self.gold.len() > max_triples {
            return fail(format!("{} gold triples, expected 1..={max_triples}", self.gold.len()));
        }
        if self.grid.rank() != 3 || self.grid.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("grid must be GxGxc with values in [0,1]".into());
        }
        for t in &self.gold {
            if let Err(e) = t.validate(seq_len, relations) {
                return fail(e.to_string());
            }
        }
        Ok(())
    }

    fn to_record(&self) -> Record {
        let s = self.grid.shape();
        let (g, c) = (s[0], s[2]);
        let grid = (0..g)
            .map(|y| (0..s[1]).map(|x| (0..c).map(|k| self.grid.get(&[y, x, k])).collect()).collect())
            .collect();
        Record {
            id: self.id.clone(),
            tokens: self.tokens.clone(),
            grid,
            gold: self.gold.clone(),
        }
    }

    fn from_record(r: Record) -> Result<Self> {
        let rows = r.grid.len();
        let cols = r.grid.first().map_or(0, Vec::len);
        let chans = r.grid.first().and_then(|row| row.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows * cols * chans);
        for row in &r.grid {
            if row.len() != cols {
                return Err(Error::Data(format!("sample {}: ragged grid", r.id)));
            }
            for cell in row {
                if cell.len() != chans {
                    return Err(Error::Data(format!("sample {}: ragged grid", r.id)));
                }
                data.extend_from_slice(cell);
            }
        }
        Ok(Self {
            id: r.id,
            tokens: r.tokens,
            grid: Tensor::new(vec![rows, cols, chans], data)?,
            gold: r.gold,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let vocab = spec.vocab();
    let train = (0..spec.n_train)
        .map(|i| generate_sample(spec, &vocab, &format!("train-{i:05}")))
        .collect::<Result<_>>()?;
    let test = (0..spec.n_test)
        .map(|i| generate_sample(spec, &vocab, &format!("test-{i:05}")))
        .collect::<Result<_>>()?;
    Ok(Dataset { train, test })
}

/// Half-open cell rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (y, x)))
    }

    fn to_box(self, g: usize) -> BoxCxCyWh {
        let g = g as f64;
        let (w, h) = ((self.x1 - self.x0) as f64, (self.y1 - self.y0) as f64);
        BoxCxCyWh::from_slice(&[
            (self.x0 as f64 + w / 2.0) / g,
            (self.y0 as f64 + h / 2.0) / g,
            w / g,
            h / g,
        ])
    }
}

fn place_rect(rng: &mut SplitMix64, g: usize, used: &mut [bool]) -> Option<Rect> {
    let max_side = MAX_RECT_SIDE.min(g);
    let free = |r: &Rect, used: &[bool]| r.cells().all(|(y, x)| !used[y * g + x]);
    for _ in 0..PLACEMENT_TRIES {
        let w = 1 + rng.index(max_side);
        let h = 1 + rng.index(max_side);
        let x0 = rng.index(g - w + 1);
        let y0 = rng.index(g - h + 1);
        let r = Rect { x0, y0, x1: x0 + w, y1: y0 + h };
        if free(&r, used) {
            r.cells().for_each(|(y, x)| used[y * g + x] = true);
            return Some(r);
        }
    }
    let open: Vec<usize> = (0..g * g).filter(|&i| !used[i]).collect();
    if open.is_empty() {
        return None;
    }
    let i = open[rng.index(open.len())];
    used[i] = true;
    Some(Rect { x0: i % g, y0: i / g, x1: i % g + 1, y1: i / g + 1 })
}

fn generate_sample(spec: &DatasetSpec, vocab: &Vocab, id: &str) -> Result<Sample> {
    let mut rng = SplitMix64::substream(spec.seed, id);
    let (l, g, c) = (spec.seq_len, spec.grid, spec.img_channels);
    let k = 1 + rng.index(spec.max_triples);

    let n_words = if spec.shared_entity { 1 } else { k };
    let word_ids: Vec<usize> = (0..n_words).map(|_| rng.index(vocab.words.len())).collect();

    // text: fillers, then entity words dropped into disjoint free spans
    let mut tokens: Vec<usize> = (0..l).map(|_| vocab.fillers.start + rng.index(vocab.fillers.len())).collect();
    let mut taken = vec![false; l];
    let mut spans = Vec::with_capacity(n_words);
    for &w in &word_ids {
        let pattern = &vocab.words[w];
        let starts: Vec<usize> = (0..=l - pattern.len())
            .filter(|&s| taken[s..s + pattern.len()].iter().all(|t| !t))
            .collect();
        if starts.is_empty() {
            return Err(Error::Capacity(format!("sample {id}: no free span for an entity word in seq_len {l}")));
        }
        let s = starts[rng.index(starts.len())];
        for (j, &tok) in pattern.iter().enumerate() {
            tokens[s + j] = tok;
            taken[s + j] = true;
        }
        spans.push((s, s + pattern.len() - 1));
    }

    let mut grid = Tensor::zeros(&[g, g, c]);
    let mut used = vec![false; g * g];
    let bits = code_bits(spec.entity_words);
    let mut gold = Vec::with_capacity(k);
    for t in 0..k {
        let slot = if spec.shared_entity { 0 } else { t };
        let word = word_ids[slot];
        let rel = rng.index(spec.relations);
        let rect = place_rect(&mut rng, g, &mut used)
            .ok_or_else(|| Error::Capacity(format!("sample {id}: grid {g}x{g} is full")))?;
        let code = word + 1;
        for (y, x) in rect.cells() {
            let cell = &mut grid.data_mut()[(y * g + x) * c..(y * g + x + 1) * c];
            cell[rel] = 1.0;
            for b in 0..bits {
                if code >> b & 1 == 1 {
                    cell[spec.relations + b] = 1.0;
                }
            }
        }
        let (start, end) = spans[slot];
        gold.push(Triple::new(start, end, rel, rect.to_box(g)));
    }
    if spec.noise > 0.0 {
        for v in grid.data_mut() {
            *v = (*v + spec.noise * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        id: id.to_string(),
        tokens,
        grid,
        gold,
    })
}

pub fn to_jsonl(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let line = serde_json::to_string(&s.to_record()).map_err(|e| Error::Data(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn save(samples: &[Sample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(samples)?.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses JSONL; line numbers in errors are 1-based. Blank lines are skipped.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let sample = Sample::from_record(rec)?;
        if !ids.insert(sample.id.clone()) {
            return Err(Error::Data(format!("duplicate sample id {}", sample.id)));
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

/// Loads and checks every sample against the expected dimensions.
pub fn load_checked(path: &Path, seq_len: usize, grid: usize, channels: usize, relations: usize, max_gold: usize) -> Result<Vec<Sample>> {
    let samples = load(path)?;
    for s in &samples {
        s.validate(seq_len, relations, max_gold)?;
        if s.grid.shape() != [grid, grid, channels] {
            return Err(Error::Data(format!(
                "sample {}: grid shape {:?}, expected [{grid}, {grid}, {channels}]",
                s.id,
                s.grid.shape()
            )));
        }
    }
    Ok(samples)
}
