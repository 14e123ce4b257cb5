//! Request traces: the line-delimited file format, synthetic generation,
//! and rate rescaling.
//!
//! A trace file holds one JSON object per line:
//!
//! ```text
//! {"id":1,"arrival_s":0.0,"blocks":[17],"in":16,"out":4}
//! {"id":2,"arrival_s":0.25,"blocks":[17,99],"in":20,"out":8,"class":3}
//! ```
//!
//! `blocks` are the hashes of the prompt's fixed-size token blocks, so
//! `blocks.len() == ceil(in / block_size)`. Output lengths are replayed
//! verbatim.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::combine;

pub const DEFAULT_BLOCK_SIZE: u32 = 16;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot access trace file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed trace record on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("arrival time decreases on line {line}")]
    NonMonotoneArrival { line: usize },
    #[error("trace needs at least two records to infer a rate")]
    EmptyTrace,
    #[error("target rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("all arrivals share one timestamp; observed rate is undefined")]
    ZeroSpan,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("request {id} has {actual} blocks but {expected} are needed for its input length")]
    BlockMismatch { id: u64, expected: usize, actual: usize },
}

/// One replayed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(rename = "id")]
    pub request_id: u64,
    pub arrival_s: f64,
    #[serde(rename = "blocks")]
    pub prefix_blocks: Vec<u64>,
    #[serde(rename = "in")]
    pub input_tokens: u32,
    #[serde(rename = "out")]
    pub output_tokens: u32,
    /// Optional class label carried through from the producer. Routing and
    /// detection derive their own keys from the blocks.
    #[serde(rename = "class", default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<u64>,
}

impl TraceRecord {
    fn check(&self) -> Result<(), String> {
        if !self.arrival_s.is_finite() || self.arrival_s < 0.0 {
            return Err(format!("arrival_s must be non-negative, got {}", self.arrival_s));
        }
        if self.input_tokens == 0 {
            return Err("in must be at least 1".into());
        }
        if self.output_tokens == 0 {
            return Err("out must be at least 1".into());
        }
        if self.prefix_blocks.is_empty() {
            return Err("blocks must not be empty".into());
        }
        Ok(())
    }
}

/// Number of blocks a prompt of `input_tokens` occupies.
pub fn blocks_for(input_tokens: u32, block_size: u32) -> usize {
    input_tokens.div_ceil(block_size) as usize
}

/// Checks `ceil(in / block_size) == blocks.len()` for every record.
pub fn validate_blocks(records: &[TraceRecord], block_size: u32) -> Result<(), TraceError> {
    for r in records {
        let expected = blocks_for(r.input_tokens, block_size);
        if expected != r.prefix_blocks.len() {
            return Err(TraceError::BlockMismatch {
                id: r.request_id,
                expected,
                actual: r.prefix_blocks.len(),
            });
        }
    }
    Ok(())
}

/// Parses a trace from any buffered reader. Blank lines are skipped.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        rec.check().map_err(|message| TraceError::Parse {
            line: line_no,
            message,
        })?;
        if let Some(prev) = out.last() {
            if rec.arrival_s < prev.arrival_s {
                return Err(TraceError::NonMonotoneArrival { line: line_no });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace(BufReader::new(file))
}

pub fn write_trace_to<W: Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<(), TraceError> {
    let path = path.as_ref();
    let io_err = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_trace_to(BufWriter::new(file), records).map_err(io_err)
}

/// Mean arrival rate of a trace: `(n - 1) / (last - first)`.
pub fn observed_rate(records: &[TraceRecord]) -> Result<f64, TraceError> {
    if records.len() < 2 {
        return Err(TraceError::EmptyTrace);
    }
    let span = records[records.len() - 1].arrival_s - records[0].arrival_s;
    if span <= 0.0 {
        return Err(TraceError::ZeroSpan);
    }
    Ok((records.len() - 1) as f64 / span)
}

/// Stretches or compresses inter-arrival gaps so the mean rate becomes
/// `target_rate_rps`. The first arrival moves to zero.
pub fn scale_trace(
    records: &[TraceRecord],
    target_rate_rps: f64,
) -> Result<Vec<TraceRecord>, TraceError> {
    if !(target_rate_rps.is_finite() && target_rate_rps > 0.0) {
        return Err(TraceError::InvalidRate(target_rate_rps));
    }
    let factor = observed_rate(records)? / target_rate_rps;
    let t0 = records[0].arrival_s;
    Ok(records
        .iter()
        .map(|r| TraceRecord {
            arrival_s: (r.arrival_s - t0) * factor,
            ..r.clone()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed { value: u32 },
    /// Inclusive on both ends.
    Uniform { min: u32, max: u32 },
}

impl LengthDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match *self {
            LengthDist::Fixed { value } => value,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    fn min(&self) -> u32 {
        match *self {
            LengthDist::Fixed { value } => value,
            LengthDist::Uniform { min, .. } => min,
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            LengthDist::Fixed { .. } => true,
            LengthDist::Uniform { min, max } => min <= max,
        }
    }
}

/// A group of requests sharing a prompt head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    /// Fraction of all arrivals.
    pub weight: f64,
    pub shared_prefix_blocks: u32,
    /// Per-request blocks after the shared head; fresh hashes every time.
    pub suffix_blocks: LengthDist,
    pub output_tokens: LengthDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub duration_s: f64,
    pub mean_rate_rps: f64,
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
}

fn default_block_size() -> u32 {
    DEFAULT_BLOCK_SIZE
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::InvalidSpec(m.to_string()));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if !(self.mean_rate_rps.is_finite() && self.mean_rate_rps > 0.0) {
            return bad("mean_rate_rps must be positive");
        }
        if self.block_size == 0 {
            return bad("block_size must be positive");
        }
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        let total: f64 = self.classes.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("class weights must sum to 1");
        }
        for c in &self.classes {
            if c.weight.is_nan() || c.weight <= 0.0 {
                return bad("class weights must be positive");
            }
            if !c.suffix_blocks.is_valid() || !c.output_tokens.is_valid() {
                return bad("length distribution has min > max");
            }
            if c.shared_prefix_blocks == 0 && c.suffix_blocks.min() == 0 {
                return bad("a class must produce at least one block per request");
            }
            if c.output_tokens.min() == 0 {
                return bad("output lengths must be positive");
            }
        }
        Ok(())
    }
}

/// Hash of block `pos` of class `class`'s shared head.
pub fn shared_block_hash(seed: u64, class: usize, pos: u32) -> u64 {
    combine(combine(seed, class as u64 + 1), pos as u64)
}

/// Poisson arrivals at the aggregate rate, each labelled with a class drawn
/// by weight; equivalent to merging independent per-class Poisson streams.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<TraceRecord>, TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaps = Exp::new(spec.mean_rate_rps).map_err(|e| TraceError::InvalidSpec(e.to_string()))?;
    let picker = WeightedIndex::new(spec.classes.iter().map(|c| c.weight))
        .map_err(|e| TraceError::InvalidSpec(e.to_string()))?;
    let bs = spec.block_size;

    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut rng);
        if t >= spec.duration_s {
            break;
        }
        let class_idx = picker.sample(&mut rng);
        let class = &spec.classes[class_idx];
        let suffix = class.suffix_blocks.sample(&mut rng);
        let mut blocks: Vec<u64> = (0..class.shared_prefix_blocks)
            .map(|p| shared_block_hash(spec.seed, class_idx, p))
            .collect();
        blocks.extend((0..suffix).map(|_| rng.random::<u64>()));
        let n = blocks.len() as u32;
        let input_tokens = if suffix > 0 {
            (n - 1) * bs + rng.random_range(1..=bs)
        } else {
            n * bs
        };
        let output_tokens = class.output_tokens.sample(&mut rng);
        out.push(TraceRecord {
            request_id: out.len() as u64,
            arrival_s: t,
            prefix_blocks: blocks,
            input_tokens,
            output_tokens,
            class_label: Some(class_idx as u64),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, t: f64) -> TraceRecord {
        TraceRecord {
            request_id: id,
            arrival_s: t,
            prefix_blocks: vec![id],
            input_tokens: 16,
            output_tokens: 4,
            class_label: None,
        }
    }

    #[test]
    fn empty_file_is_empty_trace() {
        assert!(read_trace("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn single_record_line() {
        let line = r#"{"id":1,"arrival_s":0.0,"blocks":[17],"in":16,"out":4}"#;
        let recs = read_trace(line.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].prefix_blocks, vec![17]);
        assert_eq!(recs[0].input_tokens, 16);
        assert_eq!(recs[0].class_label, None);
    }

    #[test]
    fn non_monotone_arrival_reports_line() {
        let text = "{\"id\":1,\"arrival_s\":5.0,\"blocks\":[1],\"in\":1,\"out\":1}\n\
                    {\"id\":2,\"arrival_s\":3.0,\"blocks\":[1],\"in\":1,\"out\":1}\n";
        match read_trace(text.as_bytes()) {
            Err(TraceError::NonMonotoneArrival { line }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_rejects_file() {
        let text = "{\"id\":1,\"arrival_s\":0.0,\"blocks\":[1],\"in\":1,\"out\":1}\nnot json\n";
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(TraceError::Parse { line: 2, .. })
        ));
        let zero_out = r#"{"id":1,"arrival_s":0.0,"blocks":[1],"in":1,"out":0}"#;
        assert!(matches!(
            read_trace(zero_out.as_bytes()),
            Err(TraceError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn writer_key_order() {
        let mut r = rec(1, 0.5);
        r.class_label = Some(3);
        let mut buf = Vec::new();
        write_trace_to(&mut buf, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"id\":1,\"arrival_s\":0.5,\"blocks\":[1],\"in\":16,\"out\":4,\"class\":3}\n"
        );
    }

    #[test]
    fn uniform_rescale() {
        let recs: Vec<_> = (0..11).map(|i| rec(i, i as f64)).collect();
        let scaled = scale_trace(&recs, 2.0).unwrap();
        for (i, r) in scaled.iter().enumerate() {
            assert!((r.arrival_s - 0.5 * i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_rescale_shifts_to_zero() {
        let recs: Vec<_> = (0..5).map(|i| rec(i, 10.0 + i as f64)).collect();
        let scaled = scale_trace(&recs, 1.0).unwrap();
        for (i, r) in scaled.iter().enumerate() {
            assert!((r.arrival_s - i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn bursty_rescale_doubles_gaps() {
        // 11 arrivals over 1 s: mean rate 10 rps.
        let times = [0.0, 0.01, 0.02, 0.03, 0.4, 0.41, 0.42, 0.8, 0.9, 0.95, 1.0];
        let recs: Vec<_> = times.iter().enumerate().map(|(i, &t)| rec(i as u64, t)).collect();
        let scaled = scale_trace(&recs, 5.0).unwrap();
        for w in 0..times.len() - 1 {
            let before = times[w + 1] - times[w];
            let after = scaled[w + 1].arrival_s - scaled[w].arrival_s;
            assert!((after - 2.0 * before).abs() < 1e-12);
        }
        let rate = observed_rate(&scaled).unwrap();
        assert!((rate - 5.0).abs() / 5.0 < 0.01);
    }

    #[test]
    fn rescale_errors() {
        assert!(matches!(scale_trace(&[rec(0, 0.0)], 1.0), Err(TraceError::EmptyTrace)));
        assert!(matches!(
            scale_trace(&[rec(0, 1.0), rec(1, 1.0)], 1.0),
            Err(TraceError::ZeroSpan)
        ));
        assert!(matches!(
            scale_trace(&[rec(0, 0.0), rec(1, 1.0)], 0.0),
            Err(TraceError::InvalidRate(_))
        ));
    }

    fn two_class_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            duration_s: 1000.0,
            mean_rate_rps: 10.0,
            classes: vec![
                ClassSpec {
                    weight: 0.2,
                    shared_prefix_blocks: 2,
                    suffix_blocks: LengthDist::Uniform { min: 1, max: 3 },
                    output_tokens: LengthDist::Fixed { value: 8 },
                },
                ClassSpec {
                    weight: 0.8,
                    shared_prefix_blocks: 4,
                    suffix_blocks: LengthDist::Fixed { value: 0 },
                    output_tokens: LengthDist::Uniform { min: 1, max: 32 },
                },
            ],
            seed,
            block_size: 16,
        }
    }

    #[test]
    fn class_fraction_tracks_weights() {
        let recs = generate_synthetic(&two_class_spec(7)).unwrap();
        assert!(recs.len() >= 9_500, "got {}", recs.len());
        let first = recs.iter().filter(|r| r.class_label == Some(0)).count();
        let frac = first as f64 / recs.len() as f64;
        assert!((0.18..=0.22).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn single_class_shares_head() {
        let spec = SyntheticSpec {
            duration_s: 20.0,
            mean_rate_rps: 5.0,
            classes: vec![ClassSpec {
                weight: 1.0,
                shared_prefix_blocks: 2,
                suffix_blocks: LengthDist::Uniform { min: 0, max: 4 },
                output_tokens: LengthDist::Fixed { value: 2 },
            }],
            seed: 1,
            block_size: 16,
        };
        let recs = generate_synthetic(&spec).unwrap();
        assert!(recs.len() > 10);
        for r in &recs {
            assert_eq!(r.prefix_blocks[..2], recs[0].prefix_blocks[..2]);
        }
        validate_blocks(&recs, 16).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = two_class_spec(42);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_trace_to(&mut a, &generate_synthetic(&spec).unwrap()).unwrap();
        write_trace_to(&mut b, &generate_synthetic(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = two_class_spec(1);
        spec.classes[0].weight = 0.5;
        assert!(matches!(generate_synthetic(&spec), Err(TraceError::InvalidSpec(_))));
    }
}
