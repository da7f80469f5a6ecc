use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// `start:stop:count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, stop, count] = parts.as_slice() else {
            return Err(format!("expected start:stop:count, got {s:?}"));
        };
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
        let spec = GridSpec {
            start: num(start)?,
            stop: num(stop)?,
            count: count.trim().parse().map_err(|e| format!("{count:?}: {e}"))?,
        };
        if !(spec.start.is_finite() && spec.stop.is_finite()) || spec.count == 0 {
            return Err(format!("grid {s:?} needs finite bounds and a positive count"));
        }
        Ok(spec)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.stop, self.count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        assert_eq!(
            "0.05:0.5:10".parse::<GridSpec>().unwrap(),
            GridSpec { start: 0.05, stop: 0.5, count: 10 }
        );
        assert_eq!("1e-6:1e-1:25".parse::<GridSpec>().unwrap().count, 25);
        for bad in ["1:2", "a:1:2", "0:1:0", "0:1:2:3", "0:inf:3"] {
            assert!(bad.parse::<GridSpec>().is_err(), "{bad}");
        }
    }
}
