use std::fmt::Write as _;
use std::time::Instant;

use crate::detector::{detect_timed, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Order statistics over per-run milliseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        if ms.is_empty() {
            return None;
        }
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        Some(LatencyStats {
            min: s[0],
            median,
            mean: s.iter().sum::<f64>() / n as f64,
            max: s[n - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    /// End-to-end milliseconds of each timed run.
    pub samples_ms: Vec<f64>,
    pub stats: LatencyStats,
    /// Mean milliseconds per stage: backbone, RPN with proposal generation,
    /// RoI pooling with the head.
    pub backbone_ms: f64,
    pub proposals_ms: f64,
    pub head_ms: f64,
}

impl LatencyReport {
    pub fn stage_sum_ms(&self) -> f64 {
        self.backbone_ms + self.proposals_ms + self.head_ms
    }
}

pub fn benchmark_latency(
    model: &Model,
    image: &Tensor,
    warmup: usize,
    runs: usize,
) -> Result<LatencyReport> {
    if runs < 3 {
        return Err(Error::Config(format!(
            "benchmark needs at least 3 runs, got {runs}"
        )));
    }
    for _ in 0..warmup {
        detect_timed(image, model)?;
    }
    let mut samples_ms = Vec::with_capacity(runs);
    let mut stages = [0.0f64; 3];
    for _ in 0..runs {
        let t0 = Instant::now();
        let (_, t) = detect_timed(image, model)?;
        samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        stages[0] += t.backbone.as_secs_f64() * 1e3;
        stages[1] += t.proposals.as_secs_f64() * 1e3;
        stages[2] += t.head.as_secs_f64() * 1e3;
    }
    let n = runs as f64;
    Ok(LatencyReport {
        stats: LatencyStats::from_samples(&samples_ms).expect("runs >= 3"),
        samples_ms,
        backbone_ms: stages[0] / n,
        proposals_ms: stages[1] / n,
        head_ms: stages[2] / n,
    })
}

/// `stage<TAB>ms` rows, followed by the end-to-end order statistics.
pub fn format_latency_tsv(r: &LatencyReport) -> String {
    let mut s = String::from("stage\tms\n");
    let rows = [
        ("backbone", r.backbone_ms),
        ("rpn_proposals", r.proposals_ms),
        ("roi_head", r.head_ms),
        ("stage_sum", r.stage_sum_ms()),
        ("end_to_end_mean", r.stats.mean),
        ("end_to_end_min", r.stats.min),
        ("end_to_end_median", r.stats.median),
        ("end_to_end_max", r.stats.max),
    ];
    for (name, v) in rows {
        let _ = writeln!(s, "{name}\t{v:.4}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::tensor::Fill;

    #[test]
    fn order_statistics() {
        let s = LatencyStats::from_samples(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!((s.min, s.median, s.mean, s.max), (1.0, 2.5, 4.0, 10.0));
        assert_eq!(
            LatencyStats::from_samples(&[5.0, 1.0, 2.0]).unwrap().median,
            2.0
        );
        assert!(LatencyStats::from_samples(&[]).is_none());
    }

    #[test]
    fn run_count_is_exact() {
        let cfg = DetectorConfig {
            input_w: 32,
            input_h: 32,
            ..DetectorConfig::default()
        };
        let model = Model::new(cfg, vec!["a".into()], 2).unwrap();
        let image = Tensor::create(
            &[3, 32, 32],
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 1,
            },
        )
        .unwrap();
        let r = benchmark_latency(&model, &image, 1, 5).unwrap();
        assert_eq!(r.samples_ms.len(), 5);
        assert!(r.stats.min <= r.stats.median && r.stats.median <= r.stats.max);
        assert!(benchmark_latency(&model, &image, 0, 2).is_err());
        assert!(format_latency_tsv(&r).lines().count() == 9);
    }
}
