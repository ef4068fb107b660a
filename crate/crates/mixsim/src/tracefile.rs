//! The v1 trace file format: line-oriented, diffable, language-neutral.
//!
//! ```text
//! #moe-trace v1 layers=<L> experts=<N> k=<k> gates=renorm
//! <token> <prefill|decode> <layer> e1:g1 e2:g2 ... ek:gk
//! ...
//! #end
//! ```
//!
//! Gate probabilities are renormalized top-k masses printed to 9 significant
//! digits; generated traces round gates to the same precision, so a
//! write/read round trip is field-exact. The `#end` trailer makes silent
//! truncation detectable.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use mixsim_core::workload::{Phase, Trace, TraceEvent};

pub const HEADER_MAGIC: &str = "#moe-trace";
pub const TRAILER: &str = "#end";

pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> Result<()> {
    writeln!(
        out,
        "{HEADER_MAGIC} v1 layers={} experts={} k={} gates=renorm",
        trace.num_layers, trace.experts_per_layer, trace.k
    )?;
    let mut line = String::new();
    for ev in &trace.events {
        line.clear();
        let phase = match ev.phase {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        };
        write!(line, "{} {} {}", ev.token, phase, ev.layer).unwrap();
        for &(e, g) in &ev.activations {
            write!(line, " {e}:{g:.8e}").unwrap();
        }
        writeln!(out, "{line}")?;
    }
    writeln!(out, "{TRAILER}")?;
    Ok(())
}

pub fn write_trace_file(trace: &Trace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating trace file {}", path.display()))?;
    write_trace(trace, std::io::BufWriter::new(file))
}

fn parse_header(line: &str) -> Result<(u32, u32, u32)> {
    let mut parts = line.split_ascii_whitespace();
    if parts.next() != Some(HEADER_MAGIC) || parts.next() != Some("v1") {
        bail!("line 1: not a `{HEADER_MAGIC} v1` header");
    }
    let mut layers = None;
    let mut experts = None;
    let mut k = None;
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("line 1: malformed header field `{part}`"))?;
        match key {
            "layers" => layers = Some(value.parse().context("line 1: layers")?),
            "experts" => experts = Some(value.parse().context("line 1: experts")?),
            "k" => k = Some(value.parse().context("line 1: k")?),
            "gates" => {
                if value != "renorm" {
                    bail!("line 1: unsupported gate convention `{value}`");
                }
            }
            other => bail!("line 1: unknown header field `{other}`"),
        }
    }
    match (layers, experts, k) {
        (Some(l), Some(n), Some(k)) => Ok((l, n, k)),
        _ => bail!("line 1: header missing layers/experts/k"),
    }
}

fn parse_row(line: &str, lineno: usize, num_layers: u32, experts: u32, k: u32) -> Result<TraceEvent> {
    let err = |msg: &str| anyhow!("line {lineno}: {msg}");
    let mut parts = line.split_ascii_whitespace();
    let token = parts
        .next()
        .ok_or_else(|| err("empty row"))?
        .parse()
        .map_err(|_| err("bad token index"))?;
    let phase = match parts.next().ok_or_else(|| err("missing phase"))? {
        "prefill" => Phase::Prefill,
        "decode" => Phase::Decode,
        other => bail!("line {lineno}: unknown phase `{other}`"),
    };
    let layer: u32 = parts
        .next()
        .ok_or_else(|| err("missing layer"))?
        .parse()
        .map_err(|_| err("bad layer index"))?;
    if layer >= num_layers {
        bail!("line {lineno}: layer {layer} out of range (layers={num_layers})");
    }
    let mut activations = Vec::with_capacity(k as usize);
    for part in parts {
        let (e, g) = part
            .split_once(':')
            .ok_or_else(|| err("malformed activation (want expert:gate)"))?;
        let e: u32 = e.parse().map_err(|_| err("bad expert index"))?;
        let g: f64 = g.parse().map_err(|_| err("bad gate probability"))?;
        if e >= experts {
            bail!("line {lineno}: expert {e} out of range (experts={experts})");
        }
        if activations.iter().any(|&(p, _)| p == e) {
            bail!("line {lineno}: duplicate expert index {e}");
        }
        if !(0.0..=1.0).contains(&g) {
            bail!("line {lineno}: gate {g} outside [0, 1]");
        }
        activations.push((e, g));
    }
    if activations.len() != k as usize {
        bail!(
            "line {lineno}: {} activations, header declares k={k}",
            activations.len()
        );
    }
    Ok(TraceEvent {
        token,
        phase,
        layer,
        activations,
    })
}

pub fn read_trace<R: Read>(input: R) -> Result<Trace> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| anyhow!("empty trace file"))?;
    let (num_layers, experts_per_layer, k) = parse_header(&header?)?;
    let mut events = Vec::new();
    let mut terminated = false;
    let mut last_row = 0usize;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line == TRAILER {
            terminated = true;
            break;
        }
        if line.is_empty() {
            continue;
        }
        events.push(parse_row(&line, lineno, num_layers, experts_per_layer, k)?);
        last_row = lineno;
    }
    if !terminated {
        bail!("truncated trace: no `{TRAILER}` trailer; last valid row at line {last_row}");
    }
    Ok(Trace {
        num_layers,
        experts_per_layer,
        k,
        events,
    })
}

pub fn read_trace_file(path: &Path) -> Result<Trace> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening trace file {}", path.display()))?;
    read_trace(file).with_context(|| format!("parsing trace file {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixsim_core::model::ModelConfig;
    use mixsim_core::workload::{generate_trace, WorkloadSpec};

    fn sample_trace() -> Trace {
        let model = ModelConfig {
            num_layers: 3,
            experts_per_layer: 16,
            experts_active_per_token: 4,
            expert_bytes_high: 4096,
            expert_bytes_low: 1024,
        };
        let spec = WorkloadSpec {
            prefill_tokens: 4,
            decode_tokens: 32,
            seed: 42,
            ..WorkloadSpec::default()
        };
        generate_trace(&model, &spec).unwrap()
    }

    #[test]
    fn round_trip_is_field_exact() {
        let trace = sample_trace();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#moe-trace v1 layers=3 experts=16 k=4 gates=renorm\n"));
        let back = read_trace(&buf[..]).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn writes_are_deterministic() {
        let trace = sample_trace();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_trace(&trace, &mut a).unwrap();
        write_trace(&trace, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_expert_rejected_with_line_number() {
        let text = "#moe-trace v1 layers=1 experts=8 k=2 gates=renorm\n0 decode 0 3:5.00000000e-1 3:5.00000000e-1\n#end\n";
        let err = read_trace(text.as_bytes()).unwrap_err();
        assert!(format!("{err}").contains("line 2"), "{err}");
        assert!(format!("{err}").contains("duplicate"), "{err}");
    }

    #[test]
    fn k_mismatch_rejected() {
        let text = "#moe-trace v1 layers=1 experts=8 k=3 gates=renorm\n0 decode 0 3:5.00000000e-1 4:5.00000000e-1\n#end\n";
        let err = read_trace(text.as_bytes()).unwrap_err();
        assert!(format!("{err}").contains("k=3"), "{err}");
    }

    #[test]
    fn truncated_file_names_last_valid_row() {
        let trace = sample_trace();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        // chop the trailer and the last row
        let text = String::from_utf8(buf).unwrap();
        let cut: Vec<&str> = text.lines().collect();
        let truncated = cut[..cut.len() - 2].join("\n");
        let err = read_trace(truncated.as_bytes()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains(&format!("line {}", cut.len() - 2)), "{msg}");
    }

    #[test]
    fn bad_header_rejected() {
        assert!(read_trace(&b"#moe-trace v2 layers=1 experts=8 k=2\n#end\n"[..]).is_err());
        assert!(read_trace(&b"hello\n#end\n"[..]).is_err());
    }
}
