//! Line-delimited execution traces.
//!
//! Every record carries the logical time, a sequence number (the
//! deterministic tie-break), the acting party and a payload digest.
//! Identical (scenario, seed) pairs must produce byte-identical trace
//! files; everything here is derived from deterministically ordered data.

use mcsync_core::hash::{hash_tagged, Digest, RECORD_TAG};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: u64,
    pub seq: u64,
    pub actor: String,
    pub kind: String,
    pub detail: String,
}

impl TraceEvent {
    pub fn line(&self) -> String {
        format!(
            "t={:08} s={:06} actor={} kind={} {}",
            self.time, self.seq, self.actor, self.kind, self.detail
        )
    }
}

/// Append-only trace with a running digest.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, time: u64, seq: u64, actor: String, kind: &str, detail: String) {
        self.events.push(TraceEvent {
            time,
            seq,
            actor,
            kind: kind.to_string(),
            detail,
        });
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            let _ = writeln!(out, "{}", ev.line());
        }
        out
    }

    /// Digest of the rendered trace (used by determinism checks).
    pub fn digest(&self) -> Digest {
        hash_tagged(RECORD_TAG, self.render().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_are_stable() {
        let mut t = Trace::default();
        t.push(3, 1, "node/0".into(), "phase", "round 0 voting".into());
        assert_eq!(t.render(), "t=00000003 s=000001 actor=node/0 kind=phase round 0 voting\n");
        let d1 = t.digest();
        let mut t2 = Trace::default();
        t2.push(3, 1, "node/0".into(), "phase", "round 0 voting".into());
        assert_eq!(d1, t2.digest());
    }
}
