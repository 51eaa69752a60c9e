//! Built-in checks: gradients of the full model against finite
//! differences, and the fast components against their naive oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bfs::{background_ranges, sample_with_ranges, BackgroundRanges};
use crate::config::{EncoderType, ModelConfig};
use crate::error::Result;
use crate::evaluation::{average_precision, default_coverage_buckets, default_length_buckets, fn_profile, tiou};
use crate::heads::Annotation;
use crate::inference::{soft_nms, Detection};
use crate::model::Htnet;
use crate::numerics::{Tape, Tensor};
use crate::oracle;
use crate::segment::Segment;
use crate::transformer::inverse_transform_sample;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Model configuration used by the gradient check: 2 levels, 8 channels,
/// 1 attention head.
pub fn gradient_check_config(encoder: EncoderType) -> ModelConfig {
    ModelConfig {
        levels: 2,
        channels: 8,
        heads: 1,
        ffn_mult: 1,
        encoder_type: encoder,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Max relative error of the analytic loss gradient over every parameter
/// on a 32-snippet clip with 3 classes.
pub fn gradient_error(encoder: EncoderType, seed: u64) -> Result<f64> {
    let model = Htnet::new(&gradient_check_config(encoder), 8, 3, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = uniform(&mut rng, 32, 8);
    let anns = [
        Annotation {
            segment: Segment::new(3.0, 9.0),
            class_id: 0,
        },
        Annotation {
            segment: Segment::new(14.0, 27.0),
            class_id: 2,
        },
    ];
    Ok(model.gradient_check(&features, &anns, 1e-5)?.max_relative_error)
}

pub fn random_ranges(rng: &mut ChaCha8Rng, len: usize) -> Result<BackgroundRanges> {
    let a = rng.random_range(0.0..=len as f64);
    let b = rng.random_range(0.0..=len as f64);
    let delta = rng.random_range(0.05..=1.0);
    background_ranges(a.min(b), a.max(b), len, delta)
}

/// Number of random instances on which background sampling differs from
/// the double-loop oracle.
pub fn bfs_mismatches(instances: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let t = rng.random_range(1..40);
        let c = rng.random_range(1..9);
        let features = uniform(&mut rng, t, c);
        let ranges = (0..t).map(|_| random_ranges(&mut rng, t)).collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let x = tape.leaf(&features);
        let y = sample_with_ranges(&mut tape, x, &ranges)?;
        if tape.value(y) != oracle::sample_background_naive(&features, &ranges).data() {
            bad += 1;
        }
    }
    Ok(bad)
}

pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, classes: usize, span: f64) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let s = rng.random_range(0.0..span);
            let len = rng.random_range(0.1..span / 4.0);
            Detection {
                segment: Segment::new(s, s + len),
                class_id: rng.random_range(0..classes),
                score: rng.random_range(0.0..1.0),
            }
        })
        .collect()
}

pub fn soft_nms_mismatches(instances: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.random_range(0..=200);
        let dets = random_detections(&mut rng, n, 3, 50.0);
        let sigma = rng.random_range(0.1..1.0);
        let thr = rng.random_range(0.0..1e-2);
        if soft_nms(&dets, sigma, thr)? != oracle::soft_nms_reference(&dets, sigma, thr) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Compares AP with the enumeration oracle on small random instances
/// (at most 6 detections and 4 ground-truth segments); returns the number
/// of instances checked and the largest difference.
pub fn ap_oracle_gap(instances: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let videos = rng.random_range(1..=2);
        let mut dets = vec![Vec::new(); videos];
        let mut gts = vec![Vec::new(); videos];
        for _ in 0..rng.random_range(0..=6) {
            let v = rng.random_range(0..videos);
            dets[v].extend(random_detections(&mut rng, 1, 2, 10.0));
        }
        for _ in 0..rng.random_range(1..=4) {
            let v = rng.random_range(0..videos);
            let d = random_detections(&mut rng, 1, 2, 10.0)[0];
            gts[v].push(Annotation {
                segment: d.segment,
                class_id: d.class_id,
            });
        }
        for class in 0..2 {
            for thr in [0.1, 0.3, 0.5, 0.7] {
                let a = average_precision(&dets, &gts, class, thr);
                let b = oracle::average_precision_exhaustive(&dets, &gts, class, thr);
                let gap = match (a, b) {
                    (Some(a), Some(b)) => (a - b).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                };
                worst = worst.max(gap);
            }
        }
    }
    (instances, worst)
}

/// Draws `draws` uniform points through inverse-transform sampling and
/// returns the largest deviation from the pdf in units of the binomial
/// standard deviation.
pub fn sampling_deviation(pdf: &[f64], draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..draws).map(|_| rng.random_range(0.0..1.0)).collect();
    let idx = inverse_transform_sample(pdf, &u)?;
    let freq = oracle::frequencies(&idx, pdf.len());
    let n = draws as f64;
    Ok(pdf
        .iter()
        .zip(&freq)
        .map(|(p, f)| {
            let sd = (p * (1.0 - p) / n).sqrt();
            if sd == 0.0 {
                if (f - p).abs() == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (f - p).abs() / sd
            }
        })
        .fold(0.0, f64::max))
}

fn det(s: f64, e: f64, score: f64) -> Detection {
    Detection {
        segment: Segment::new(s, e),
        class_id: 0,
        score,
    }
}

fn ann(s: f64, e: f64) -> Annotation {
    Annotation {
        segment: Segment::new(s, e),
        class_id: 0,
    }
}

/// tIoU of (0,10)/(5,15), AP of the rank-inverted pair and the XL false
/// negative rate of one missed 20 s instance.
pub fn evaluator_fixtures() -> Result<(f64, f64, f64)> {
    let t = tiou(&Segment::new(0.0, 10.0), &Segment::new(5.0, 15.0));
    let dets = vec![vec![det(20.0, 30.0, 0.9), det(0.0, 10.0, 0.8)]];
    let gts = vec![vec![ann(0.0, 10.0)]];
    let ap = average_precision(&dets, &gts, 0, 0.5).unwrap_or(f64::NAN);
    let profile = fn_profile(
        &[vec![]],
        &[vec![ann(10.0, 30.0)]],
        &[60.0],
        &default_length_buckets(),
        &default_coverage_buckets(),
        0.5,
    )?;
    let xl = profile.length.iter().find(|b| b.name == "XL").map_or(f64::NAN, |b| b.rate);
    Ok((t, ap, xl))
}

/// Runs every check.
pub fn run_all() -> Vec<Check> {
    let mut checks = Vec::new();
    for enc in [EncoderType::Hierarchical, EncoderType::Cnn] {
        let name = match enc {
            EncoderType::Hierarchical => "gradient (hierarchical)",
            EncoderType::Vanilla => "gradient (vanilla)",
            EncoderType::Cnn => "gradient (cnn)",
        };
        checks.push(Check::from_result(
            name,
            gradient_error(enc, 11).map(|e| (e <= 1e-4, format!("max relative error {e:.3e}"))),
        ));
    }
    checks.push(Check::from_result(
        "background sampling oracle",
        bfs_mismatches(100, 1).map(|b| (b == 0, format!("{b}/100 mismatches"))),
    ));
    checks.push(Check::from_result(
        "soft-nms oracle",
        soft_nms_mismatches(100, 2).map(|b| (b == 0, format!("{b}/100 mismatches"))),
    ));
    let (n, gap) = ap_oracle_gap(500, 3);
    checks.push(Check::new(
        "average precision oracle",
        gap <= 1e-12,
        format!("{n} instances, max gap {gap:.1e}"),
    ));
    let pdf = [0.05, 0.3, 0.0, 0.15, 0.4, 0.1];
    checks.push(Check::from_result(
        "inverse transform sampling",
        sampling_deviation(&pdf, 100_000, 4).map(|z| (z <= 3.0, format!("max deviation {z:.2} sd"))),
    ));
    checks.push(Check::from_result(
        "evaluator fixtures",
        evaluator_fixtures().map(|(t, ap, xl)| {
            (
                (t - 5.0 / 15.0).abs() < 1e-12 && ap == 0.5 && xl == 1.0,
                format!("tIoU {t:.4}, AP {ap}, XL FN rate {xl}"),
            )
        }),
    ));
    checks
}
