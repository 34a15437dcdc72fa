//! Training and evaluation metrics, emitted as JSON lines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipelines::eval::EvalMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: f64,
    pub l_self: f64,
    pub l_cross: f64,
    pub diversity: f64,
    /// Fraction of terms whose positive outscored every negative.
    pub accuracy: f64,
    /// Mean entropy (nats) of hard code usage per codebook in the batch.
    pub code_entropy: f64,
    /// Share of the batch drawn from the target corpus.
    pub target_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub ctc_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepMetrics),
    Finetune(FinetuneMetrics),
    Eval(EvalMetrics),
    Consistency { value: f64, pairs: usize },
}

/// Collects records and optionally streams them to a writer.
#[derive(Default)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for MetricsLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricsLog").field("records", &self.records.len()).finish()
    }
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn streaming(sink: Box<dyn Write + Send>) -> Self {
        Self {
            records: Vec::new(),
            sink: Some(sink),
        }
    }

    pub fn push(&mut self, rec: MetricRecord) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("<metrics>", e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepMetrics> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn finetune_steps(&self) -> impl Iterator<Item = &FinetuneMetrics> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Finetune(s) => Some(s),
            _ => None,
        })
    }

    /// All records as JSON lines.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Entropy of hard code usage, averaged over codebooks.
pub fn code_usage_entropy(codes: &[Vec<usize>], entries: usize) -> f64 {
    let Some(groups) = codes.first().map(Vec::len) else {
        return 0.0;
    };
    let mut total = 0.0;
    for g in 0..groups {
        let mut counts = vec![0usize; entries];
        for c in codes {
            counts[c[g]] += 1;
        }
        let n = codes.len() as f64;
        total -= counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>();
    }
    total / groups as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_usage() {
        assert_eq!(code_usage_entropy(&[vec![1, 1], vec![1, 1]], 4), 0.0);
        let uniform: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        assert!((code_usage_entropy(&uniform, 4) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn records_serialize_as_tagged_lines() {
        let mut log = MetricsLog::new();
        log.push(MetricRecord::Consistency { value: 0.5, pairs: 3 }).unwrap();
        let text = log.to_jsonl().unwrap();
        assert_eq!(text, "{\"type\":\"consistency\",\"value\":0.5,\"pairs\":3}\n");
    }
}
