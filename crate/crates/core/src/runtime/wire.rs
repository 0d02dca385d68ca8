//! Round messages exchanged between workers and the coordinator.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic "QIFM" | version u16 | round u8 | kind u8 | payload length u64 | payload | SHA-256 of everything before it
//! ```
//!
//! `docs/wire-format.md` lists the payload layouts. The JSON mode carries the
//! same fields plus the SHA-256 of the binary payload, so a JSON message can
//! be verified and converted back without loss.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::combine::{CohortSummary, Partition, SourceId, SourceSummary, SUMMARY_FORMAT_VERSION};
use crate::error::{QifError, Result};
use crate::inference::{CohortScores, SourceScore};
use crate::model::{BasisFamily, BasisSet, LinkFunction};

pub const MAGIC: [u8; 4] = *b"QIFM";
pub const WIRE_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

/// θ̂ sent back to workers for the second round.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaRequest {
    pub partition: Partition,
    /// θ̂_g stacked over groups.
    pub theta: DVector<f64>,
}

impl ThetaRequest {
    pub fn p(&self) -> usize {
        self.theta.len() / self.partition.group_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Round 1, worker → coordinator.
    Summary(CohortSummary),
    /// Round 2, coordinator → worker.
    Request(ThetaRequest),
    /// Round 2, worker → coordinator.
    Scores(CohortScores),
}

impl Payload {
    fn kind(&self) -> u8 {
        match self {
            Payload::Summary(_) => 1,
            Payload::Request(_) => 2,
            Payload::Scores(_) => 3,
        }
    }

    pub fn round(&self) -> u8 {
        match self {
            Payload::Summary(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Binary,
    Json,
}

pub fn encode(payload: &Payload) -> Vec<u8> {
    let body = encode_payload(payload);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + DIGEST_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.push(payload.round());
    out.push(payload.kind());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Payload> {
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(QifError::Format("message shorter than its header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(QifError::Format("bad magic; not a round message".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WIRE_VERSION {
        return Err(QifError::Format(format!("unsupported wire version {version}; this build reads {WIRE_VERSION}")));
    }
    let (round, kind) = (bytes[6], bytes[7]);
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != HEADER_LEN + len + DIGEST_LEN {
        return Err(QifError::Format(format!("payload length {len} disagrees with message size {}", bytes.len())));
    }
    let (signed, digest) = bytes.split_at(HEADER_LEN + len);
    if Sha256::digest(signed).as_slice() != digest {
        return Err(QifError::Format("checksum mismatch; message is corrupted".into()));
    }
    let payload = decode_payload(kind, &signed[HEADER_LEN..])?;
    if payload.round() != round {
        return Err(QifError::Format(format!("kind {kind} cannot travel in round {round}")));
    }
    Ok(payload)
}

pub fn write_message(path: impl AsRef<Path>, payload: &Payload, encoding: Encoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = match encoding {
        Encoding::Binary => encode(payload),
        Encoding::Json => {
            let mut s = to_json(payload);
            s.push('\n');
            s.into_bytes()
        }
    };
    std::fs::write(path, bytes).map_err(|e| QifError::io(path, e))
}

/// Reads either encoding; JSON is recognised by its leading brace.
pub fn read_message(path: impl AsRef<Path>) -> Result<Payload> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| QifError::io(path, e))?;
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    let res = if first == Some(&b'{') {
        std::str::from_utf8(&bytes).map_err(|e| QifError::Format(e.to_string())).and_then(from_json)
    } else {
        decode(&bytes)
    };
    res.map_err(|e| match e {
        QifError::Format(m) => QifError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| QifError::Format("payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        // bound the allocation by what is actually left
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(QifError::Format("payload truncated".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| QifError::Format("label is not UTF-8".into()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(QifError::Format(format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn encode_payload(payload: &Payload) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match payload {
        Payload::Summary(s) => {
            w.u16(s.format_version);
            w.u32(s.cohort_id);
            w.u64(s.n);
            w.u32(s.sources.len() as u32);
            for src in &s.sources {
                w.u32(src.block);
                w.u8(src.link.code());
                w.u8(src.basis.code());
                w.u8(src.s() as u8);
                w.u8(u8::from(src.converged));
                w.u32(src.p() as u32);
                w.u32(src.iterations);
                w.f64(src.q_value);
                w.f64(src.dispersion);
                w.f64s(src.theta_hat.iter());
                for r in 0..src.s_hat.nrows() {
                    w.f64s(src.s_hat.row(r).iter());
                }
            }
            let dim = s.v.nrows();
            w.u32(dim as u32);
            for r in 0..dim {
                for c in 0..=r {
                    w.f64(s.v[(r, c)]);
                }
            }
        }
        Payload::Request(req) => {
            let part = &req.partition;
            w.u32(part.blocks());
            w.u32(part.cohorts());
            w.u32(part.group_count() as u32);
            for g in part.groups() {
                w.u32(g.len() as u32);
                for src in g {
                    w.u32(src.block);
                    w.u32(src.cohort);
                }
            }
            w.u32(part.labels().len() as u32);
            for l in part.labels() {
                w.str(l);
            }
            w.u32(req.p() as u32);
            w.f64s(req.theta.iter());
        }
        Payload::Scores(sc) => {
            w.u32(sc.cohort_id);
            w.u64(sc.n);
            w.u32(sc.sources.len() as u32);
            for src in &sc.sources {
                w.u32(src.block);
                w.u32(src.theta.len() as u32);
                w.u32(src.psi.len() as u32);
                w.f64s(src.theta.iter());
                w.f64s(src.psi.iter());
            }
        }
    }
    w.0
}

fn decode_payload(kind: u8, body: &[u8]) -> Result<Payload> {
    let mut r = Reader { buf: body, pos: 0 };
    let payload = match kind {
        1 => {
            let format_version = r.u16()?;
            if format_version != SUMMARY_FORMAT_VERSION {
                return Err(QifError::Format(format!("unsupported summary format_version {format_version}")));
            }
            let cohort_id = r.u32()?;
            let n = r.u64()?;
            let count = r.u32()? as usize;
            let mut sources = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                let block = r.u32()?;
                let link =
                    LinkFunction::from_code(r.u8()?).ok_or_else(|| QifError::Format("unknown link code".into()))?;
                let basis =
                    BasisFamily::from_code(r.u8()?).ok_or_else(|| QifError::Format("unknown basis code".into()))?;
                let s = r.u8()? as usize;
                if s != BasisSet::new(basis).size() {
                    return Err(QifError::Format(format!("block {block}: basis size {s} does not match its family")));
                }
                let converged = match r.u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(QifError::Format(format!("bad convergence flag {b}"))),
                };
                let p = r.u32()? as usize;
                let iterations = r.u32()?;
                let q_value = r.f64()?;
                let dispersion = r.f64()?;
                let theta_hat = DVector::from_vec(r.f64s(p)?);
                let s_hat = DMatrix::from_row_slice(p * s, p, &r.f64s(p * s * p)?);
                sources.push(SourceSummary {
                    block,
                    link,
                    basis,
                    theta_hat,
                    s_hat,
                    q_value,
                    converged,
                    iterations,
                    dispersion,
                });
            }
            let dim = r.u32()? as usize;
            let lower = r.f64s(dim * (dim + 1) / 2)?;
            let v = lower_to_full(dim, &lower);
            let summary = CohortSummary { format_version, cohort_id, n, sources, v };
            summary.validate()?;
            Payload::Summary(summary)
        }
        2 => {
            let blocks = r.u32()?;
            let cohorts = r.u32()?;
            let g = r.u32()? as usize;
            let mut groups = Vec::with_capacity(g.min(1 << 16));
            for _ in 0..g {
                let len = r.u32()? as usize;
                let mut grp = Vec::with_capacity(len.min(1 << 16));
                for _ in 0..len {
                    grp.push(SourceId::new(r.u32()?, r.u32()?));
                }
                groups.push(grp);
            }
            let nl = r.u32()? as usize;
            let labels = (0..nl).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
            let mut partition = Partition::new(groups, blocks, cohorts)?;
            if !labels.is_empty() {
                partition = partition.with_labels(labels)?;
            }
            let p = r.u32()? as usize;
            let theta = DVector::from_vec(r.f64s(p * partition.group_count())?);
            Payload::Request(ThetaRequest { partition, theta })
        }
        3 => {
            let cohort_id = r.u32()?;
            let n = r.u64()?;
            let count = r.u32()? as usize;
            let mut sources = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                let block = r.u32()?;
                let p = r.u32()? as usize;
                let dim = r.u32()? as usize;
                let theta = DVector::from_vec(r.f64s(p)?);
                let psi = DVector::from_vec(r.f64s(dim)?);
                sources.push(SourceScore { block, theta, psi });
            }
            Payload::Scores(CohortScores { cohort_id, n, sources })
        }
        k => return Err(QifError::Format(format!("unknown message kind {k}"))),
    };
    r.finish()?;
    Ok(payload)
}

fn lower_to_full(dim: usize, lower: &[f64]) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(dim, dim);
    let mut i = 0;
    for r in 0..dim {
        for c in 0..=r {
            v[(r, c)] = lower[i];
            v[(c, r)] = lower[i];
            i += 1;
        }
    }
    v
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonMessage {
    magic: String,
    version: u16,
    round: u8,
    kind: String,
    payload: serde_json::Value,
    /// SHA-256 of the binary payload encoding, hex.
    payload_sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSource {
    block: u32,
    link: LinkFunction,
    basis: BasisFamily,
    s: usize,
    theta_hat: Vec<f64>,
    /// Row-major.
    s_hat: Vec<f64>,
    q_value: f64,
    converged: bool,
    iterations: u32,
    dispersion: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSummary {
    format_version: u16,
    cohort_id: u32,
    n: u64,
    sources: Vec<JsonSource>,
    /// Lower triangle of V_k, row-major.
    v_lower: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRequest {
    blocks: u32,
    cohorts: u32,
    groups: Vec<Vec<SourceId>>,
    labels: Vec<String>,
    theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonScore {
    block: u32,
    theta: Vec<f64>,
    psi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonScores {
    cohort_id: u32,
    n: u64,
    sources: Vec<JsonScore>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const KINDS: [&str; 3] = ["summary", "request", "scores"];

pub fn to_json(payload: &Payload) -> String {
    let value = match payload {
        Payload::Summary(s) => serde_json::to_value(JsonSummary {
            format_version: s.format_version,
            cohort_id: s.cohort_id,
            n: s.n,
            sources: s
                .sources
                .iter()
                .map(|src| JsonSource {
                    block: src.block,
                    link: src.link,
                    basis: src.basis,
                    s: src.s(),
                    theta_hat: src.theta_hat.iter().copied().collect(),
                    s_hat: src.s_hat.transpose().iter().copied().collect(),
                    q_value: src.q_value,
                    converged: src.converged,
                    iterations: src.iterations,
                    dispersion: src.dispersion,
                })
                .collect(),
            v_lower: (0..s.v.nrows()).flat_map(|r| (0..=r).map(move |c| (r, c))).map(|rc| s.v[rc]).collect(),
        }),
        Payload::Request(req) => serde_json::to_value(JsonRequest {
            blocks: req.partition.blocks(),
            cohorts: req.partition.cohorts(),
            groups: req.partition.groups().to_vec(),
            labels: req.partition.labels().to_vec(),
            theta: req.theta.iter().copied().collect(),
        }),
        Payload::Scores(sc) => serde_json::to_value(JsonScores {
            cohort_id: sc.cohort_id,
            n: sc.n,
            sources: sc
                .sources
                .iter()
                .map(|s| JsonScore {
                    block: s.block,
                    theta: s.theta.iter().copied().collect(),
                    psi: s.psi.iter().copied().collect(),
                })
                .collect(),
        }),
    }
    .expect("payload serializes");
    let msg = JsonMessage {
        magic: String::from_utf8(MAGIC.to_vec()).expect("ascii"),
        version: WIRE_VERSION,
        round: payload.round(),
        kind: KINDS[payload.kind() as usize - 1].to_string(),
        payload: value,
        payload_sha256: hex(&Sha256::digest(encode_payload(payload))),
    };
    serde_json::to_string_pretty(&msg).expect("message serializes")
}

pub fn from_json(text: &str) -> Result<Payload> {
    let bad = |e: serde_json::Error| QifError::Format(e.to_string());
    let msg: JsonMessage = serde_json::from_str(text).map_err(bad)?;
    if msg.magic.as_bytes() != MAGIC {
        return Err(QifError::Format("bad magic; not a round message".into()));
    }
    if msg.version != WIRE_VERSION {
        return Err(QifError::Format(format!("unsupported wire version {}", msg.version)));
    }
    let kind = KINDS
        .iter()
        .position(|k| *k == msg.kind)
        .ok_or_else(|| QifError::Format(format!("unknown message kind {}", msg.kind)))? as u8
        + 1;
    // rebuild through the binary decoder so both modes share validation
    let mut w = Writer(Vec::new());
    match kind {
        1 => {
            let s: JsonSummary = serde_json::from_value(msg.payload).map_err(bad)?;
            w.u16(s.format_version);
            w.u32(s.cohort_id);
            w.u64(s.n);
            w.u32(s.sources.len() as u32);
            for src in &s.sources {
                let p = src.theta_hat.len();
                if src.s_hat.len() != p * src.s * p {
                    return Err(QifError::Format(format!("block {}: s_hat has the wrong length", src.block)));
                }
                w.u32(src.block);
                w.u8(src.link.code());
                w.u8(src.basis.code());
                w.u8(src.s as u8);
                w.u8(u8::from(src.converged));
                w.u32(p as u32);
                w.u32(src.iterations);
                w.f64(src.q_value);
                w.f64(src.dispersion);
                w.f64s(&src.theta_hat);
                w.f64s(&src.s_hat);
            }
            let dim = ((((8 * s.v_lower.len() + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
            if dim * (dim + 1) / 2 != s.v_lower.len() {
                return Err(QifError::Format("v_lower is not a triangular array".into()));
            }
            w.u32(dim as u32);
            w.f64s(&s.v_lower);
        }
        2 => {
            let req: JsonRequest = serde_json::from_value(msg.payload).map_err(bad)?;
            let g = req.groups.len().max(1);
            w.u32(req.blocks);
            w.u32(req.cohorts);
            w.u32(req.groups.len() as u32);
            for grp in &req.groups {
                w.u32(grp.len() as u32);
                for s in grp {
                    w.u32(s.block);
                    w.u32(s.cohort);
                }
            }
            w.u32(req.labels.len() as u32);
            for l in &req.labels {
                w.str(l);
            }
            w.u32((req.theta.len() / g) as u32);
            w.f64s(&req.theta);
        }
        _ => {
            let sc: JsonScores = serde_json::from_value(msg.payload).map_err(bad)?;
            w.u32(sc.cohort_id);
            w.u64(sc.n);
            w.u32(sc.sources.len() as u32);
            for s in &sc.sources {
                w.u32(s.block);
                w.u32(s.theta.len() as u32);
                w.u32(s.psi.len() as u32);
                w.f64s(&s.theta);
                w.f64s(&s.psi);
            }
        }
    }
    if hex(&Sha256::digest(&w.0)) != msg.payload_sha256 {
        return Err(QifError::Format("checksum mismatch; message is corrupted".into()));
    }
    let payload = decode_payload(kind, &w.0)?;
    if payload.round() != msg.round {
        return Err(QifError::Format(format!("kind {} cannot travel in round {}", msg.kind, msg.round)));
    }
    Ok(payload)
}
