//! Text checkpoints for parameter sets and the replay buffer.
//!
//! Layout, one record per line:
//!
//! ```text
//! DDNCKPT 1
//! set <name> <num_segments> <total_len>
//! seg <name> <ndims> <dim>...          (num_segments lines)
//! <value>                              (total_len lines)
//! buffer <capacity> <num_classes> <seen> <num_items>
//! rng <insert|sample> <seed hex> <stream> <word_pos>
//! item <stream_index> <task_id> <label> <x_len> <has_logits>
//! x <value>...
//! logits <value>...                    (only when has_logits = 1)
//! end
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a dump reloads to
//! bit-identical values. The buffer block is optional.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::buffer::{BufferItem, MemoryBuffer, Reservoir};
use crate::error::{Error, Result};
use crate::tensor_core::{ParameterSet, Segment};

pub const MAGIC: &str = "DDNCKPT";
pub const VERSION: u32 = 1;

/// Contents of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub sets: Vec<(String, ParameterSet)>,
    pub buffer: Option<MemoryBuffer>,
}

impl Checkpoint {
    pub fn set(&self, name: &str) -> Option<&ParameterSet> {
        self.sets.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::config("checkpoint", format!("invalid name {name:?}")));
    }
    Ok(())
}

fn write_rng(out: &mut String, tag: &str, rng: &ChaCha8Rng) {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    let _ = writeln!(out, "rng {tag} {seed} {} {}", rng.get_stream(), rng.get_word_pos());
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub fn to_string(sets: &[(&str, &ParameterSet)], buffer: Option<&MemoryBuffer>) -> Result<String> {
    let mut out = format!("{MAGIC} {VERSION}\n");
    for (name, set) in sets {
        check_name(name)?;
        let _ = writeln!(out, "set {name} {} {}", set.segments().len(), set.total_len());
        for seg in set.segments() {
            check_name(&seg.name)?;
            let dims: Vec<String> = seg.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "seg {} {} {}", seg.name, seg.shape.len(), dims.join(" "));
        }
        for v in set.values() {
            let _ = writeln!(out, "{v:?}");
        }
    }
    if let Some(b) = buffer {
        let _ = writeln!(out, "buffer {} {} {} {}", b.capacity(), b.num_classes(), b.seen(), b.len());
        write_rng(&mut out, "insert", &b.insert_rng);
        write_rng(&mut out, "sample", &b.sample_rng);
        for it in b.items() {
            let _ = writeln!(
                out,
                "item {} {} {} {} {}",
                it.stream_index,
                it.task_id,
                it.label,
                it.x.len(),
                u8::from(it.stored_logits.is_some())
            );
            let _ = writeln!(out, "x {}", join(&it.x));
            if let Some(l) = &it.stored_logits {
                let _ = writeln!(out, "logits {}", join(l));
            }
        }
    }
    out.push_str("end\n");
    Ok(out)
}

pub fn save(path: &Path, sets: &[(&str, &ParameterSet)], buffer: Option<&MemoryBuffer>) -> Result<()> {
    std::fs::write(path, to_string(sets, buffer)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    parse(&std::fs::read_to_string(path)?)
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next line and the byte offset it starts at.
    fn next(&mut self) -> Result<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return Err(Error::Parse {
                offset: self.pos,
                message: "unexpected end of file".into(),
            });
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let (line, used) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.pos += used;
        Ok((start, line))
    }
}

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(offset: usize, tok: Option<&str>, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| err(offset, format!("expected {what}")))
}

fn floats(offset: usize, tokens: std::str::SplitWhitespace<'_>, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = tokens
        .map(|t| t.parse().map_err(|_| err(offset, format!("bad number {t:?}"))))
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(err(offset, format!("expected {n} values, found {}", v.len())));
    }
    Ok(v)
}

fn parse_rng(offset: usize, line: &str, tag: &str) -> Result<ChaCha8Rng> {
    let mut t = line.split_whitespace();
    if t.next() != Some("rng") || t.next() != Some(tag) {
        return Err(err(offset, format!("expected `rng {tag}`")));
    }
    let hex = t.next().unwrap_or("");
    if hex.len() != 64 {
        return Err(err(offset, "rng seed must be 64 hex digits"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| err(offset, "bad rng seed"))?;
    }
    let stream: u64 = num(offset, t.next(), "rng stream")?;
    let word_pos: u128 = num(offset, t.next(), "rng word position")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

pub fn parse(text: &str) -> Result<Checkpoint> {
    let mut lines = Lines { text, pos: 0 };
    let (off, header) = lines.next()?;
    if header != format!("{MAGIC} {VERSION}") {
        return Err(err(off, format!("bad header {header:?}")));
    }
    let mut sets = Vec::new();
    let mut buffer = None;
    loop {
        let (off, line) = lines.next()?;
        let mut t = line.split_whitespace();
        match t.next() {
            Some("end") => break,
            Some("set") => {
                let name = t.next().ok_or_else(|| err(off, "missing set name"))?.to_string();
                let nseg: usize = num(off, t.next(), "segment count")?;
                let total: usize = num(off, t.next(), "value count")?;
                let mut segments = Vec::with_capacity(nseg);
                let mut offset = 0;
                for _ in 0..nseg {
                    let (soff, sline) = lines.next()?;
                    let mut s = sline.split_whitespace();
                    if s.next() != Some("seg") {
                        return Err(err(soff, "expected `seg`"));
                    }
                    let sname = s.next().ok_or_else(|| err(soff, "missing segment name"))?.to_string();
                    let ndims: usize = num(soff, s.next(), "dimension count")?;
                    let shape: Vec<usize> = (0..ndims)
                        .map(|_| num(soff, s.next(), "dimension"))
                        .collect::<Result<_>>()?;
                    let seg = Segment {
                        name: sname,
                        offset,
                        shape,
                    };
                    offset += seg.len();
                    segments.push(seg);
                }
                let mut values = Vec::with_capacity(total);
                for _ in 0..total {
                    let (voff, v) = lines.next()?;
                    values.push(num(voff, Some(v.trim()), "parameter value")?);
                }
                let set = ParameterSet::from_parts(segments, values).map_err(|e| err(off, e.to_string()))?;
                sets.push((name, set));
            }
            Some("buffer") => {
                let capacity: usize = num(off, t.next(), "capacity")?;
                let num_classes: usize = num(off, t.next(), "class count")?;
                let seen: u64 = num(off, t.next(), "seen count")?;
                let n: usize = num(off, t.next(), "item count")?;
                let (ro, rl) = lines.next()?;
                let insert_rng = parse_rng(ro, rl, "insert")?;
                let (ro, rl) = lines.next()?;
                let sample_rng = parse_rng(ro, rl, "sample")?;
                let mut items = Vec::with_capacity(n);
                for _ in 0..n {
                    let (io, il) = lines.next()?;
                    let mut s = il.split_whitespace();
                    if s.next() != Some("item") {
                        return Err(err(io, "expected `item`"));
                    }
                    let stream_index: u64 = num(io, s.next(), "stream index")?;
                    let task_id: usize = num(io, s.next(), "task id")?;
                    let label: usize = num(io, s.next(), "label")?;
                    let xlen: usize = num(io, s.next(), "feature count")?;
                    let has_logits: u8 = num(io, s.next(), "logit flag")?;
                    if label >= num_classes {
                        return Err(err(io, "label out of range"));
                    }
                    let (xo, xl) = lines.next()?;
                    let mut xs = xl.split_whitespace();
                    if xs.next() != Some("x") {
                        return Err(err(xo, "expected `x`"));
                    }
                    let mut item = BufferItem::new(floats(xo, xs, xlen)?, label, num_classes, stream_index, task_id);
                    if has_logits == 1 {
                        let (lo, ll) = lines.next()?;
                        let mut ls = ll.split_whitespace();
                        if ls.next() != Some("logits") {
                            return Err(err(lo, "expected `logits`"));
                        }
                        item.stored_logits = Some(floats(lo, ls, num_classes)?);
                    }
                    items.push(item);
                }
                let reservoir = Reservoir::restore(capacity, items, seen).map_err(|e| err(off, e.to_string()))?;
                buffer = Some(MemoryBuffer {
                    reservoir,
                    num_classes,
                    insert_rng,
                    sample_rng,
                });
            }
            _ => return Err(err(off, format!("unexpected record {line:?}"))),
        }
    }
    Ok(Checkpoint { sets, buffer })
}
