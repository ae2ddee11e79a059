//! `bench` subcommand: machine-local kernel timings.
//!
//! Times the packed AND+popcount dot against a per-element baseline, and the
//! bit-kernel convolution against the dense reference on quantized inputs.
//! Timings are medians of repeated runs; absolute numbers are only meaningful
//! on the machine that produced them.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use pa_core::activations::{
    decompose_activation_bases, init_activation_state_auto, quantize_activations_forward,
};
use pa_core::bitops::{binary_conv2d, dot_and_popcount, merge_coefficients, pack};
use pa_core::tensor::conv2d_reference;
use pa_core::weights::{
    decompose_weight_bases, quantize_weights_forward, WeightPiecewise, WeightQuantizerConfig,
};
use pa_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CSV_HEADER: &str = "name,size,baseline_ns,fast_ns,speedup,note";

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub name: &'static str,
    pub size: usize,
    pub baseline_ns: Option<f64>,
    pub fast_ns: Option<f64>,
    pub note: String,
}

impl BenchRow {
    pub fn speedup(&self) -> Option<f64> {
        match (self.baseline_ns, self.fast_ns) {
            (Some(b), Some(f)) if f > 0.0 => Some(b / f),
            _ => None,
        }
    }

    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}\n",
            self.name,
            self.size,
            opt(self.baseline_ns),
            opt(self.fast_ns),
            self.speedup().map(|s| format!("{s:.2}")).unwrap_or_default(),
            self.note
        )
    }
}

/// Median of `iters` timings; each timing averages over enough repeats to
/// stay clear of clock granularity.
fn time_ns(iters: usize, mut f: impl FnMut()) -> f64 {
    // Calibrate the repeat count towards ~1 ms per measurement.
    let start = Instant::now();
    f();
    let once = start.elapsed().as_nanos().max(1) as f64;
    let reps = ((1e6 / once) as usize).clamp(1, 1 << 20);
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        for _ in 0..reps {
            f();
        }
        samples.push(start.elapsed().as_nanos() as f64 / reps as f64);
    }
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

fn naive_dot(a: &[bool], b: &[bool]) -> u64 {
    a.iter().zip(b).filter(|&(&x, &y)| x && y).count() as u64
}

fn dot_rows(iters: usize, rng: &mut ChaCha8Rng, rows: &mut Vec<BenchRow>) {
    for size in [0usize, 1 << 10, 1 << 12, 1 << 16, 1 << 18] {
        if size == 0 {
            rows.push(BenchRow {
                name: "dot",
                size,
                baseline_ns: None,
                fast_ns: None,
                note: "skipped: empty input".into(),
            });
            continue;
        }
        let a: Vec<bool> = (0..size).map(|_| rng.gen_bool(0.5)).collect();
        let b: Vec<bool> = (0..size).map(|_| rng.gen_bool(0.5)).collect();
        let pa = pack(&a);
        let pb = pack(&b);
        let baseline = time_ns(iters, || {
            black_box(naive_dot(black_box(&a), black_box(&b)));
        });
        let fast = time_ns(iters, || {
            black_box(dot_and_popcount(black_box(&pa), black_box(&pb)).unwrap());
        });
        rows.push(BenchRow {
            name: "dot",
            size,
            baseline_ns: Some(baseline),
            fast_ns: Some(fast),
            note: String::new(),
        });
    }
}

fn conv_rows(iters: usize, rng: &mut ChaCha8Rng, rows: &mut Vec<BenchRow>) -> Result<()> {
    for (cin, cout, hw) in [(4usize, 4usize, 12usize), (8, 8, 16)] {
        let (m, n) = (4, 3);
        let wlen = cout * cin * 9;
        let w = Tensor::new(
            [cout, cin, 3, 3],
            (0..wlen).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let alen = cin * hw * hw;
        let a = Tensor::new(
            [1, cin, hw, hw],
            (0..alen).map(|_| rng.gen_range(-0.5..1.5)).collect(),
        )?;
        let (wp, _) = WeightPiecewise::fit(&WeightQuantizerConfig::new(m, 1.0)?, &w)?;
        let state = init_activation_state_auto(&a, n, 1.0)?;
        let wbar = quantize_weights_forward(&w, &wp);
        let abar = quantize_activations_forward(&a, &state);
        let wplanes = decompose_weight_bases(&w, wp.endpoints());
        let aplanes = decompose_activation_bases(&a, &state);
        let phi = merge_coefficients(wp.alpha(), state.beta());
        let macs = cout * cin * 9 * hw * hw;

        let baseline = time_ns(iters, || {
            black_box(conv2d_reference(black_box(&abar), black_box(&wbar), 1, 1).unwrap());
        });
        let fast = time_ns(iters, || {
            black_box(
                binary_conv2d(
                    black_box(&wplanes),
                    w.shape(),
                    black_box(&aplanes),
                    a.shape(),
                    &phi,
                    1,
                    1,
                )
                .unwrap(),
            );
        });
        rows.push(BenchRow {
            name: "conv",
            size: macs,
            baseline_ns: Some(baseline),
            fast_ns: Some(fast),
            note: format!("{cin}x{hw}x{hw} -> {cout}, 3x3, M={m} N={n}"),
        });
    }
    Ok(())
}

pub fn run(iters: usize, mut out: impl Write) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut rows = Vec::new();
    dot_rows(iters, &mut rng, &mut rows);
    conv_rows(iters, &mut rng, &mut rows)?;

    writeln!(out, "{CSV_HEADER}")?;
    for row in &rows {
        out.write_all(row.csv().as_bytes())?;
    }
    Ok(rows)
}

pub fn cmd_bench(iters: usize, out: Option<&std::path::Path>) -> Result<()> {
    let rows = match out {
        Some(path) => {
            let file = std::fs::File::create(path)?;
            let rows = run(iters, std::io::BufWriter::new(file))?;
            println!("wrote {}", path.display());
            rows
        }
        None => run(iters, std::io::stdout().lock())?,
    };
    for row in &rows {
        if row.name == "dot" && row.size >= 1 << 16 {
            match row.speedup() {
                Some(s) if s >= 4.0 => {
                    println!("packed dot at {} bits: {s:.1}x over per-element baseline", row.size);
                }
                Some(s) => {
                    println!(
                        "warning: packed dot at {} bits only {s:.1}x over baseline (expected >= 4x)",
                        row.size
                    );
                }
                None => {}
            }
        }
    }
    Ok(())
}
