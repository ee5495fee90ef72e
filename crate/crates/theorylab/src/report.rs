use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Outcome of one check, with the numbers behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub check: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Report {
    pub fn new(check: impl Into<String>) -> Self {
        Self {
            check: check.into(),
            passed: true,
            metrics: BTreeMap::new(),
            detail: String::new(),
        }
    }

    pub fn metric(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    pub fn set(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    /// Records a failed condition; the first failure's message is kept.
    pub fn require(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            if self.passed {
                self.detail = msg();
            }
            self.passed = false;
        }
    }

    /// One JSON object, no trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_line(line: &str) -> serde_json::Result<Self> {
        serde_json::from_str(line)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", if self.passed { "PASS" } else { "FAIL" }, self.check)?;
        for (k, v) in &self.metrics {
            write!(f, " {k}={v:.6e}")?;
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let mut r = Report::new("x").metric("a", 1.5).metric("b", -2.0);
        r.require(false, || "too small".into());
        r.require(false, || "ignored".into());
        let back = Report::from_line(&r.to_line()).unwrap();
        assert_eq!(back, r);
        assert!(!back.passed);
        assert_eq!(back.detail, "too small");
        assert!(!r.to_line().contains('\n'));
    }
}
