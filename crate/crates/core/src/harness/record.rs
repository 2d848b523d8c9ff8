use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hittability check on branches of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HSummary {
    pub branches: usize,
    pub probes: usize,
    pub trials: u64,
    /// Largest `p̂` over all probes.
    pub worst_p: f64,
    /// `M^{-ξ}`.
    pub threshold: f64,
    /// `worst_p ≤ threshold`.
    pub all_h: bool,
}

/// One line of a sweep's JSONL output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub config_digest: String,
    pub seed: u64,
    pub stream_id: u64,
    pub dim: usize,
    pub n: u32,
    pub m: Option<u32>,
    pub bc: String,
    pub n_delta: Option<usize>,
    pub sites: Option<usize>,
    /// Staged runs: every stage-1 branch had fewer than `M` crossings.
    pub all_i: Option<bool>,
    /// Staged runs: final `n_i`.
    pub n_stage1: Option<usize>,
    pub increment_violations: Option<usize>,
    pub nested: Option<bool>,
    /// W-event counts per stage (stage 1 has none and reports 0).
    pub w_counts: Vec<usize>,
    pub h: Option<HSummary>,
    pub error: Option<String>,
    pub generator: String,
    pub wall_ms: u64,
}

impl SampleRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    /// Cell and stream, the resume key.
    pub fn key(&self) -> (u32, Option<u32>, u64) {
        (self.n, self.m, self.stream_id)
    }

    /// JSON line with the timing field zeroed, for comparisons.
    pub fn canonical_line(&self) -> String {
        let mut r = self.clone();
        r.wall_ms = 0;
        serde_json::to_string(&r).expect("record serializes")
    }

    pub fn write_line<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, self)?;
        writeln!(w).map_err(|e| Error::io("<records>", e))
    }
}

/// Parse JSONL records, skipping blank lines.
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<records>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn load_records(path: &std::path::Path) -> Result<Vec<SampleRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(f))
}

/// CSV export of the main scalar fields.
pub fn write_csv<W: Write>(mut w: W, records: &[SampleRecord]) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    writeln!(
        w,
        "seed,stream_id,dim,n,m,n_delta,all_i,w_total,all_h,error"
    )
    .map_err(io)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.stream_id,
            r.dim,
            r.n,
            opt(r.m.map(|m| m.to_string())),
            opt(r.n_delta.map(|v| v.to_string())),
            opt(r.all_i.map(|v| v.to_string())),
            r.w_counts.iter().sum::<usize>(),
            opt(r.h.as_ref().map(|h| h.all_h.to_string())),
            r.error.is_some(),
        )
        .map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dummy(stream: u64, n_delta: usize) -> SampleRecord {
        SampleRecord {
            config_digest: "abc".into(),
            seed: 7,
            stream_id: stream,
            dim: 3,
            n: 8,
            m: None,
            bc: "free-with-wired-halo".into(),
            n_delta: Some(n_delta),
            sites: Some(10),
            all_i: None,
            n_stage1: None,
            increment_violations: None,
            nested: None,
            w_counts: vec![],
            h: None,
            error: None,
            generator: "g".into(),
            wall_ms: 12,
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let recs = vec![dummy(0, 1), dummy(1, 3)];
        let mut buf = Vec::new();
        for r in &recs {
            r.write_line(&mut buf).unwrap();
        }
        let back = read_records(&buf[..]).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn canonical_line_drops_timing() {
        let a = dummy(0, 1);
        let mut b = a.clone();
        b.wall_ms = 999;
        assert_eq!(a.canonical_line(), b.canonical_line());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[dummy(0, 2)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("7,0,3,8,,2,"));
    }
}
