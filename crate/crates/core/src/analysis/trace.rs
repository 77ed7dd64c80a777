use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::{Real, Tape};

pub const TRACE_FORMAT: &str = "moe-lab-trace";
pub const TRACE_VERSION: u32 = 1;

/// One token occurrence and its routing at every layer. `topk` and `gates`
/// are flattened layer-major, `k` entries per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub doc: usize,
    pub pos: usize,
    pub token: usize,
    pub topk: Vec<usize>,
    pub gates: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub records: Vec<TraceRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config_hash: String,
    layers: usize,
    experts: usize,
    top_k: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    topk: Vec<usize>,
    gates: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    doc: usize,
    pos: usize,
    token: usize,
    layers: Vec<LayerJson>,
}

impl RoutingTrace {
    pub fn new(n_layers: usize, n_experts: usize, top_k: usize) -> Self {
        Self { n_layers, n_experts, top_k, records: Vec::new() }
    }

    /// Builds a trace from bare top-k choices (`choices[t][l]`), with unit
    /// gates and one document.
    pub fn from_choices(n_experts: usize, choices: &[Vec<Vec<usize>>]) -> Result<Self> {
        let first = choices.first().ok_or_else(|| Error::invalid("trace needs at least one token"))?;
        let n_layers = first.len();
        let k = first.first().map_or(0, Vec::len);
        let mut t = Self::new(n_layers, n_experts, k);
        for (i, c) in choices.iter().enumerate() {
            let topk: Vec<usize> = c.iter().flatten().copied().collect();
            let gates = vec![1.0; topk.len()];
            t.push(TraceRecord { doc: 0, pos: i, token: 0, topk, gates })?;
        }
        Ok(t)
    }

    pub fn push(&mut self, r: TraceRecord) -> Result<()> {
        let want = self.n_layers * self.top_k;
        if r.topk.len() != want || r.gates.len() != want {
            return Err(Error::Data(format!("trace record with {} choices, expected {want}", r.topk.len())));
        }
        if let Some(&bad) = r.topk.iter().find(|&&e| e >= self.n_experts) {
            return Err(Error::Data(format!("expert {bad} out of range for {} experts", self.n_experts)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Top-k set of record `t` at zero-based layer `l`.
    pub fn topk(&self, t: usize, l: usize) -> &[usize] {
        &self.records[t].topk[l * self.top_k..(l + 1) * self.top_k]
    }

    pub fn top1(&self, t: usize, l: usize) -> usize {
        self.records[t].topk[l * self.top_k]
    }

    /// Top-1 expert path of record `t`.
    pub fn path(&self, t: usize) -> Vec<usize> {
        (0..self.n_layers).map(|l| self.top1(t, l)).collect()
    }

    pub fn write_jsonl(&self, out: &mut impl Write, config_hash: &str) -> Result<()> {
        let header = Header {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            config_hash: config_hash.into(),
            layers: self.n_layers,
            experts: self.n_experts,
            top_k: self.top_k,
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        let k = self.top_k;
        for r in &self.records {
            let layers = (0..self.n_layers)
                .map(|l| LayerJson { topk: r.topk[l * k..(l + 1) * k].to_vec(), gates: r.gates[l * k..(l + 1) * k].to_vec() })
                .collect();
            serde_json::to_writer(&mut *out, &RecordJson { doc: r.doc, pos: r.pos, token: r.token, layers })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Parses a trace file; returns the trace and the header's config hash.
    pub fn read_jsonl(input: impl BufRead) -> Result<(Self, String)> {
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::Data("empty trace file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Data(format!("bad trace header: {e}")))?;
        if header.format != TRACE_FORMAT {
            return Err(Error::Data(format!("not a trace file (format `{}`)", header.format)));
        }
        if header.version != TRACE_VERSION {
            return Err(Error::Data(format!("trace version {}, expected {TRACE_VERSION}", header.version)));
        }
        let mut t = Self::new(header.layers, header.experts, header.top_k);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: RecordJson = serde_json::from_str(&line).map_err(|e| Error::Data(format!("trace line {}: {e}", i + 2)))?;
            if r.layers.len() != t.n_layers {
                return Err(Error::Data(format!("trace line {}: {} layers, expected {}", i + 2, r.layers.len(), t.n_layers)));
            }
            let mut topk = Vec::with_capacity(t.n_layers * t.top_k);
            let mut gates = Vec::with_capacity(t.n_layers * t.top_k);
            for l in r.layers {
                topk.extend(l.topk);
                gates.extend(l.gates);
            }
            t.push(TraceRecord { doc: r.doc, pos: r.pos, token: r.token, topk, gates })
                .map_err(|e| Error::Data(format!("trace line {}: {e}", i + 2)))?;
        }
        Ok((t, header.config_hash))
    }
}

/// Routes `data` through `model` in inference mode, in consecutive windows
/// of `seq_len` tokens (the last window may be shorter). Window `i` becomes
/// document `i`.
pub fn record_trace<T: Real>(model: &Model<T>, data: &[usize], rows: usize, opts: ForwardOptions<'_>) -> Result<RoutingTrace> {
    let c = model.config();
    if data.is_empty() {
        return Err(Error::Data("no tokens to trace".into()));
    }
    let seq = c.seq_len;
    let mut trace = RoutingTrace::new(c.n_layers, c.n_experts, c.top_k);
    let windows: Vec<&[usize]> = data.chunks(seq).collect();
    let mut doc = 0;
    // full windows batch together; a short tail runs on its own
    let (full, tail): (Vec<&[usize]>, Vec<&[usize]>) = windows.into_iter().partition(|w| w.len() == seq);
    let groups = full.chunks(rows.max(1)).map(<[&[usize]]>::to_vec).chain(tail.into_iter().map(|w| vec![w]));
    for group in groups {
        let len = group[0].len();
        let tokens: Vec<usize> = group.iter().flat_map(|w| w.iter().copied()).collect();
        let mut tape = Tape::inference();
        let bound = model.bind(&mut tape)?;
        let fwd = model.forward(&mut tape, &bound, &tokens, group.len(), len, opts)?;
        let gates: Vec<Vec<T>> = (0..c.n_layers).map(|l| fwd.gates(&tape, l, c.renormalize_gates)).collect();
        let k = c.top_k;
        for (t, &token) in tokens.iter().enumerate() {
            let mut topk = Vec::with_capacity(c.n_layers * k);
            let mut g = Vec::with_capacity(c.n_layers * k);
            for l in 0..c.n_layers {
                topk.extend_from_slice(fwd.layers[l].sel.row(t));
                g.extend(gates[l][t * k..(t + 1) * k].iter().map(|v| v.as_f64() as f32));
            }
            trace.push(TraceRecord { doc: doc + t / len, pos: t % len, token, topk, gates: g })?;
        }
        doc += group.len();
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn jsonl_round_trip() {
        let t = RoutingTrace::from_choices(4, &[vec![vec![0, 1], vec![2, 3]], vec![vec![3, 0], vec![1, 2]]]).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf, "abc").unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        let (back, hash) = RoutingTrace::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(hash, "abc");
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(RoutingTrace::read_jsonl(&b""[..]).is_err());
        assert!(RoutingTrace::read_jsonl(&b"{\"format\":\"x\",\"version\":1,\"config_hash\":\"\",\"layers\":1,\"experts\":1,\"top_k\":1}\n"[..]).is_err());
    }

    #[test]
    fn records_one_entry_per_token() {
        let cfg = ModelConfig { n_layers: 2, n_experts: 4, d_model: 8, n_heads: 2, d_ffn: 8, vocab_size: 16, seq_len: 4, ..ModelConfig::default() };
        let m = Model::<f32>::init(cfg, 1).unwrap();
        let data: Vec<usize> = (0..11).map(|i| i % 16).collect();
        let t = record_trace(&m, &data, 2, ForwardOptions::default()).unwrap();
        assert_eq!(t.len(), 11);
        assert_eq!(t.records[10].doc, 2);
        assert_eq!(t.records[10].pos, 2);
        assert_eq!(t.records.iter().map(|r| r.token).collect::<Vec<_>>(), data);
        assert!(record_trace(&m, &[], 2, ForwardOptions::default()).is_err());
    }

    #[test]
    fn collapsed_router_gives_one_path() {
        let cfg = ModelConfig { n_layers: 3, n_experts: 4, top_k: 1, d_model: 8, n_heads: 2, d_ffn: 8, vocab_size: 16, seq_len: 4, ..ModelConfig::default() };
        let mut m = Model::<f64>::init(cfg, 1).unwrap();
        for e in m.router_mut().params_mut().entries_mut() {
            e.tensor = crate::tensor::Tensor::zeros(e.tensor.shape().to_vec());
        }
        let data: Vec<usize> = (0..12).collect();
        let t = record_trace(&m, &data, 3, ForwardOptions::default()).unwrap();
        assert!((0..t.len()).all(|i| t.path(i) == vec![0, 0, 0]));
    }
}
