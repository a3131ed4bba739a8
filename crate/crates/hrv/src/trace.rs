//! Attention-capture trace files (`ATRACE/1`).
//!
//! A trace freezes everything an HRV build consumes from one generation:
//! the captured query matrices, the key bank (with its vocabulary), and
//! the seeds. Rebuilding from traces therefore reproduces an online build
//! bit for bit without touching the engine again.
//!
//! The format is line-oriented text. A fixed header carries scalars and
//! structure, a `KEYS` section carries every (head, concept, word) key
//! matrix, a `QUERIES` section carries every (timestep, head) query
//! matrix, and a trailing `CHECKSUM=` line carries an FNV-1a-64 digest of
//! all numeric row lines. Values are hexadecimal floating point, so
//! round-trips are lossless.

use ndarray::Array2;

use crate::adapter::{CaptureSet, GenerationRun};
use crate::error::{HrvError, Result};
use crate::hexfloat;
use crate::keys::KeyBank;
use crate::rng::Fnv1a;
use crate::vocab::ConceptVocabulary;

/// A fully parsed trace: enough to replay one generation's contribution
/// to an HRV build.
#[derive(Debug, Clone)]
pub struct TraceFile {
    pub engine: String,
    /// Generation seed the run used.
    pub seed: u64,
    /// Seed for the candidate-word sampler during the build pass.
    pub sampler_seed: u64,
    pub timesteps: usize,
    pub prompt: Vec<String>,
    pub bank: KeyBank,
    pub captures: CaptureSet,
}

impl TraceFile {
    pub fn vocab(&self) -> &ConceptVocabulary {
        self.bank.vocab()
    }
}

fn format_row(row: ndarray::ArrayView1<'_, f64>) -> String {
    let mut s = String::new();
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&hexfloat::format_f64(*v));
    }
    s
}

/// Serialize one generation into trace text.
///
/// The run must have been generated with capture enabled, and its capture
/// grid must match the bank's head count. Prompt words may not contain
/// control characters (the prompt is stored tab-separated on one line).
pub fn write_trace(run: &GenerationRun, bank: &KeyBank, sampler_seed: u64) -> Result<String> {
    let captures = run.captures.as_ref().ok_or_else(|| {
        HrvError::Precondition("trace writing needs a run with captured queries".into())
    })?;
    if captures.head_count() != bank.head_count() {
        return Err(HrvError::Shape(format!(
            "captures cover {} heads, bank holds {}",
            captures.head_count(),
            bank.head_count()
        )));
    }
    if captures.timesteps() != run.timesteps {
        return Err(HrvError::Shape(format!(
            "captures cover {} timesteps, run declares {}",
            captures.timesteps(),
            run.timesteps
        )));
    }
    for word in &run.prompt {
        if word.chars().any(|c| c == '\t' || c == '\n' || c == '\r') {
            return Err(HrvError::Precondition(format!(
                "prompt word {word:?} contains control characters"
            )));
        }
    }

    let vocab = bank.vocab();
    let mut out = String::new();
    let mut checksum = Fnv1a::new();
    // Every value row contributes its exact line bytes (newline included).
    let push_row = |out: &mut String, checksum: &mut Fnv1a, row: String| {
        checksum.update(row.as_bytes());
        checksum.update(b"\n");
        out.push_str(&row);
        out.push('\n');
    };

    out.push_str("ATRACE/1\n");
    out.push_str(&format!("engine={}\n", run.engine));
    out.push_str(&format!("seed={}\n", run.seed));
    out.push_str(&format!("sampler-seed={sampler_seed}\n"));
    out.push_str(&format!("timesteps={}\n", run.timesteps));
    out.push_str(&format!("prompt={}\n", run.prompt.join("\t")));
    out.push_str(&format!("vocab-fingerprint={:016x}\n", vocab.fingerprint()));
    out.push_str(&format!("heads={}\n", bank.head_count()));
    for desc in bank.heads() {
        out.push_str(&format!(
            "head {} F={} d={} side={}\n",
            desc.id, desc.feature_dim, desc.proj_dim, desc.spatial_side
        ));
    }
    out.push_str(&format!("vocab={}\n", vocab.len()));
    for entry in vocab.entries() {
        let words: Vec<String> = entry
            .words
            .iter()
            .map(|w| {
                if w.sub_tokens == 1 {
                    w.text.clone()
                } else {
                    format!("{}#{}", w.text, w.sub_tokens)
                }
            })
            .collect();
        out.push_str(&format!("{}\t{}\n", entry.name, words.join(",")));
    }

    out.push_str("KEYS\n");
    for flat in 0..bank.head_count() {
        for (c, entry) in vocab.entries().iter().enumerate() {
            for (w, word) in entry.words.iter().enumerate() {
                let keys = bank.word_keys(flat, c, w);
                out.push_str(&format!(
                    "key {flat}/{c}/{w} rows={} cols={}\n",
                    keys.nrows(),
                    keys.ncols()
                ));
                debug_assert_eq!(keys.nrows(), word.sub_tokens);
                for row in keys.rows() {
                    push_row(&mut out, &mut checksum, format_row(row));
                }
            }
        }
    }

    out.push_str("QUERIES\n");
    for t in 0..run.timesteps {
        for flat in 0..bank.head_count() {
            let q = captures.query(t, flat);
            out.push_str(&format!(
                "query t={t} head={flat} rows={} cols={}\n",
                q.nrows(),
                q.ncols()
            ));
            for row in q.rows() {
                push_row(&mut out, &mut checksum, format_row(row));
            }
        }
    }

    out.push_str(&format!("CHECKSUM={:016x}\n", checksum.finish()));
    Ok(out)
}

/// Line cursor that reports truncation (ran out of lines) distinctly from
/// malformed content, and tracks 1-based line numbers for error messages.
struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    lineno: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        LineReader {
            lines: text.lines(),
            lineno: 0,
        }
    }

    fn next_line(&mut self, expecting: &str) -> Result<&'a str> {
        match self.lines.next() {
            Some(line) => {
                self.lineno += 1;
                Ok(line)
            }
            None => Err(HrvError::TraceTruncated(format!(
                "input ended while expecting {expecting}"
            ))),
        }
    }

    fn malformed(&self, detail: impl Into<String>) -> HrvError {
        HrvError::TraceMalformed {
            line: self.lineno,
            detail: detail.into(),
        }
    }
}

/// Split `key=value`, insisting on a specific key.
fn scalar<'a>(reader: &LineReader<'_>, line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| reader.malformed(format!("expected {key}=..., got {line:?}")))
}

fn parse_u64(reader: &LineReader<'_>, text: &str, what: &str) -> Result<u64> {
    text.parse::<u64>()
        .map_err(|_| reader.malformed(format!("bad {what} {text:?}")))
}

fn parse_usize(reader: &LineReader<'_>, text: &str, what: &str) -> Result<usize> {
    text.parse::<usize>()
        .map_err(|_| reader.malformed(format!("bad {what} {text:?}")))
}

fn parse_hex64(reader: &LineReader<'_>, text: &str, what: &str) -> Result<u64> {
    u64::from_str_radix(text, 16).map_err(|_| reader.malformed(format!("bad {what} {text:?}")))
}

/// Read one value-row line: feed its bytes to the checksum, then parse
/// exactly `cols` hex floats.
fn read_value_row(
    reader: &mut LineReader<'_>,
    checksum: &mut Fnv1a,
    cols: usize,
    expecting: &str,
) -> Result<Vec<f64>> {
    let line = reader.next_line(expecting)?;
    checksum.update(line.as_bytes());
    checksum.update(b"\n");
    let mut values = Vec::with_capacity(cols);
    for token in line.split(' ') {
        let v = hexfloat::parse_f64(token)
            .ok_or_else(|| reader.malformed(format!("bad value {token:?} in {expecting}")))?;
        values.push(v);
    }
    if values.len() != cols {
        return Err(reader.malformed(format!(
            "{expecting}: {} values per row, expected {cols}",
            values.len()
        )));
    }
    Ok(values)
}

/// Parse trace text back into a [`TraceFile`], verifying structure,
/// vocabulary fingerprint, and the value checksum.
pub fn read_trace(text: &str) -> Result<TraceFile> {
    let mut reader = LineReader::new(text);

    let tag = reader.next_line("format tag")?;
    if tag != "ATRACE/1" {
        return Err(HrvError::TraceVersion(format!(
            "expected ATRACE/1, got {tag:?}"
        )));
    }

    let line = reader.next_line("engine=")?;
    let engine = scalar(&reader, line, "engine")?.to_string();
    let line = reader.next_line("seed=")?;
    let seed = parse_u64(&reader, scalar(&reader, line, "seed")?, "seed")?;
    let line = reader.next_line("sampler-seed=")?;
    let sampler_seed = parse_u64(
        &reader,
        scalar(&reader, line, "sampler-seed")?,
        "sampler seed",
    )?;
    let line = reader.next_line("timesteps=")?;
    let timesteps = parse_usize(&reader, scalar(&reader, line, "timesteps")?, "timesteps")?;
    let line = reader.next_line("prompt=")?;
    let prompt_text = scalar(&reader, line, "prompt")?;
    let prompt: Vec<String> = if prompt_text.is_empty() {
        Vec::new()
    } else {
        prompt_text.split('\t').map(str::to_string).collect()
    };
    let line = reader.next_line("vocab-fingerprint=")?;
    let fingerprint = parse_hex64(
        &reader,
        scalar(&reader, line, "vocab-fingerprint")?,
        "vocabulary fingerprint",
    )?;

    let line = reader.next_line("heads=")?;
    let head_count = parse_usize(&reader, scalar(&reader, line, "heads")?, "head count")?;
    let mut heads = Vec::with_capacity(head_count);
    for _ in 0..head_count {
        let line = reader.next_line("a head description")?;
        let rest = line
            .strip_prefix("head ")
            .ok_or_else(|| reader.malformed(format!("expected head line, got {line:?}")))?;
        let mut parts = rest.split(' ');
        let id_text = parts
            .next()
            .ok_or_else(|| reader.malformed("head line missing id"))?;
        let id = id_text
            .parse::<crate::heads::HeadId>()
            .map_err(|e| reader.malformed(format!("bad head id: {e}")))?;
        let mut feature_dim = None;
        let mut proj_dim = None;
        let mut side = None;
        for part in parts {
            if let Some(v) = part.strip_prefix("F=") {
                feature_dim = Some(parse_usize(&reader, v, "feature dim")?);
            } else if let Some(v) = part.strip_prefix("d=") {
                proj_dim = Some(parse_usize(&reader, v, "projection dim")?);
            } else if let Some(v) = part.strip_prefix("side=") {
                side = Some(parse_usize(&reader, v, "spatial side")?);
            } else {
                return Err(reader.malformed(format!("unknown head attribute {part:?}")));
            }
        }
        match (feature_dim, proj_dim, side) {
            (Some(feature_dim), Some(proj_dim), Some(spatial_side)) => {
                heads.push(crate::heads::HeadDesc {
                    id,
                    feature_dim,
                    proj_dim,
                    spatial_side,
                });
            }
            _ => return Err(reader.malformed("head line missing F=, d=, or side=")),
        }
    }

    let line = reader.next_line("vocab=")?;
    let vocab_count = parse_usize(&reader, scalar(&reader, line, "vocab")?, "vocabulary size")?;
    let mut tsv = String::new();
    for _ in 0..vocab_count {
        let line = reader.next_line("a vocabulary entry")?;
        tsv.push_str(line);
        tsv.push('\n');
    }
    let vocab = ConceptVocabulary::from_tsv_str(&tsv).map_err(|e| match e {
        HrvError::Vocab(detail) => reader.malformed(format!("embedded vocabulary: {detail}")),
        other => other,
    })?;
    if vocab.fingerprint() != fingerprint {
        return Err(reader.malformed(format!(
            "vocabulary fingerprint mismatch: header says {:016x}, entries hash to {:016x}",
            fingerprint,
            vocab.fingerprint()
        )));
    }

    let mut checksum = Fnv1a::new();

    let line = reader.next_line("KEYS section")?;
    if line != "KEYS" {
        return Err(reader.malformed(format!("expected KEYS, got {line:?}")));
    }
    let mut rows: Vec<Vec<Vec<Array2<f64>>>> = Vec::with_capacity(head_count);
    for flat in 0..head_count {
        let mut per_concept = Vec::with_capacity(vocab.len());
        for (c, entry) in vocab.entries().iter().enumerate() {
            let mut word_rows = Vec::with_capacity(entry.words.len());
            for w in 0..entry.words.len() {
                let line = reader.next_line("a key block")?;
                let rest = line
                    .strip_prefix("key ")
                    .ok_or_else(|| reader.malformed(format!("expected key line, got {line:?}")))?;
                let expected_tag = format!("{flat}/{c}/{w}");
                let mut parts = rest.split(' ');
                let tag = parts.next().unwrap_or("");
                if tag != expected_tag {
                    return Err(reader.malformed(format!(
                        "key block out of order: expected {expected_tag}, got {tag}"
                    )));
                }
                let mut nrows = None;
                let mut ncols = None;
                for part in parts {
                    if let Some(v) = part.strip_prefix("rows=") {
                        nrows = Some(parse_usize(&reader, v, "key row count")?);
                    } else if let Some(v) = part.strip_prefix("cols=") {
                        ncols = Some(parse_usize(&reader, v, "key column count")?);
                    }
                }
                let (nrows, ncols) = match (nrows, ncols) {
                    (Some(r), Some(c)) => (r, c),
                    _ => return Err(reader.malformed("key line missing rows= or cols=")),
                };
                let mut matrix = Array2::zeros((nrows, ncols));
                for r in 0..nrows {
                    let values = read_value_row(
                        &mut reader,
                        &mut checksum,
                        ncols,
                        &format!("key {expected_tag} row {r}"),
                    )?;
                    for (j, v) in values.into_iter().enumerate() {
                        matrix[[r, j]] = v;
                    }
                }
                word_rows.push(matrix);
            }
            per_concept.push(word_rows);
        }
        rows.push(per_concept);
    }
    // from_parts revalidates every stored shape against the vocabulary's
    // declarations and the head geometry.
    let bank = KeyBank::from_parts(heads, vocab, rows)?;

    let line = reader.next_line("QUERIES section")?;
    if line != "QUERIES" {
        return Err(reader.malformed(format!("expected QUERIES, got {line:?}")));
    }
    let mut queries: Vec<Vec<Array2<f64>>> = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let mut per_head = Vec::with_capacity(head_count);
        for flat in 0..head_count {
            let line = reader.next_line("a query block")?;
            let rest = line
                .strip_prefix("query ")
                .ok_or_else(|| reader.malformed(format!("expected query line, got {line:?}")))?;
            let mut t_field = None;
            let mut head_field = None;
            let mut nrows = None;
            let mut ncols = None;
            for part in rest.split(' ') {
                if let Some(v) = part.strip_prefix("t=") {
                    t_field = Some(parse_usize(&reader, v, "query timestep")?);
                } else if let Some(v) = part.strip_prefix("head=") {
                    head_field = Some(parse_usize(&reader, v, "query head")?);
                } else if let Some(v) = part.strip_prefix("rows=") {
                    nrows = Some(parse_usize(&reader, v, "query row count")?);
                } else if let Some(v) = part.strip_prefix("cols=") {
                    ncols = Some(parse_usize(&reader, v, "query column count")?);
                }
            }
            if t_field != Some(t) || head_field != Some(flat) {
                return Err(reader.malformed(format!(
                    "query block out of order: expected t={t} head={flat}, got {rest:?}"
                )));
            }
            let (nrows, ncols) = match (nrows, ncols) {
                (Some(r), Some(c)) => (r, c),
                _ => return Err(reader.malformed("query line missing rows= or cols=")),
            };
            let desc = &bank.heads()[flat];
            if nrows != desc.spatial_len() || ncols != desc.feature_dim {
                return Err(reader.malformed(format!(
                    "query t={t} head={flat} is {nrows}×{ncols}, head geometry wants {}×{}",
                    desc.spatial_len(),
                    desc.feature_dim
                )));
            }
            let mut matrix = Array2::zeros((nrows, ncols));
            for r in 0..nrows {
                let values = read_value_row(
                    &mut reader,
                    &mut checksum,
                    ncols,
                    &format!("query t={t} head={flat} row {r}"),
                )?;
                for (j, v) in values.into_iter().enumerate() {
                    matrix[[r, j]] = v;
                }
            }
            per_head.push(matrix);
        }
        queries.push(per_head);
    }
    let captures = CaptureSet::new(queries)?;

    let line = reader.next_line("CHECKSUM=")?;
    let stored = parse_hex64(&reader, scalar(&reader, line, "CHECKSUM")?, "checksum")?;
    let computed = checksum.finish();
    if stored != computed {
        return Err(HrvError::TraceChecksum { stored, computed });
    }
    if let Some(extra) = reader.lines.next() {
        if !extra.is_empty() {
            reader.lineno += 1;
            return Err(reader.malformed(format!("trailing content {extra:?}")));
        }
    }

    Ok(TraceFile {
        engine,
        seed,
        sampler_seed,
        timesteps,
        prompt,
        bank,
        captures,
    })
}
