//! `analyze` subcommand: memory/compute reports and latency estimates.

use std::path::Path;

use pa_core::complexity::{
    analyze, arch_by_name, emit_report, latency_estimate, pa_speedup_ratio, ComplexityReport,
    GateTimings, ReportFormat, Scheme, SchemeSpec,
};
use pa_core::Result;

fn fmt_ratio(r: Option<f64>) -> String {
    match r {
        Some(v) => format!("{v:.2}x"),
        None => "-".into(),
    }
}

fn summary_row(report: &ComplexityReport) -> String {
    format!(
        "  {:<22} {:>10.1} {:>8} {:>12.3e} {:>8}",
        report.scheme,
        report.total_memory_mbit,
        fmt_ratio(report.memory_saving),
        report.total_flops,
        fmt_ratio(report.speedup),
    )
}

/// Side-by-side totals for every scheme on one architecture.
pub fn compare_table(arch_name: &str, m: usize, n: usize) -> Result<(String, Vec<ComplexityReport>)> {
    let arch = arch_by_name(arch_name)?;
    let specs = vec![
        SchemeSpec::full(),
        SchemeSpec::single_binary(),
        SchemeSpec::pa(m, n)?,
    ];
    let reports: Vec<ComplexityReport> = specs.iter().map(|s| analyze(&arch, s)).collect();
    let mut table = format!(
        "{arch_name}\n  {:<22} {:>10} {:>8} {:>12} {:>8}\n",
        "scheme", "Mbit", "saving", "Flops", "speedup"
    );
    for report in &reports {
        table.push_str(&summary_row(report));
        table.push('\n');
    }
    Ok((table, reports))
}

/// Latency closed forms at one accumulation length, for each scheme.
pub fn latency_table(arch_name: &str, m: usize, n: usize, dot_length: u64) -> Result<String> {
    arch_by_name(arch_name)?;
    let gates = GateTimings::default();
    let mut out = format!(
        "latency at accumulation length {dot_length} (ps)\n  {:<22} {:>12} {:>12}\n",
        "scheme", "typical", "worst-case"
    );
    for spec in [
        SchemeSpec::full(),
        SchemeSpec::single_binary(),
        SchemeSpec::pa(m, n)?,
    ] {
        let est = latency_estimate(dot_length, &spec, &gates)?;
        out.push_str(&format!(
            "  {:<22} {:>12.1} {:>12.1}\n",
            spec.label(),
            est.as_printed_ps,
            est.worst_case_ps
        ));
        if matches!(spec.scheme, Scheme::MultiBinary { .. }) {
            out.push_str(&format!(
                "  per-term multiply-accumulate speedup: {:.1}x\n",
                pa_speedup_ratio(dot_length, &gates)
            ));
        }
    }
    Ok(out)
}

pub struct AnalyzeRequest<'a> {
    pub arch: String,
    pub spec: SchemeSpec,
    pub m: usize,
    pub n: usize,
    pub format: ReportFormat,
    pub out: Option<&'a Path>,
    pub compare: bool,
    pub latency: Option<u64>,
}

pub fn cmd_analyze(req: &AnalyzeRequest) -> Result<()> {
    if req.compare {
        let (table, reports) = compare_table(&req.arch, req.m, req.n)?;
        print!("{table}");
        if let Some(path) = req.out {
            let body = serde_json::to_string_pretty(&reports)?;
            std::fs::write(path, body)?;
            println!("wrote {}", path.display());
        }
    } else {
        let arch = arch_by_name(&req.arch)?;
        let report = analyze(&arch, &req.spec);
        let body = emit_report(&report, req.format)?;
        match req.out {
            Some(path) => {
                std::fs::write(path, body)?;
                println!("wrote {}", path.display());
            }
            None => print!("{body}"),
        }
    }
    if let Some(len) = req.latency {
        print!("{}", latency_table(&req.arch, req.m, req.n, len)?);
    }
    Ok(())
}
