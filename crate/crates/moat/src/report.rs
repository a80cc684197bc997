//! Human-readable tables and CSV for cost reports and ablation tables.

use std::fmt::Write as _;

use moat_core::analysis::{AblationTable, CostReport};

/// Prints a count with thousands separators.
pub fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn cost_table(r: &CostReport) -> String {
    let width = r.rows.iter().map(|row| row.path.len()).max().unwrap_or(4).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "model {} at {}x{}", r.model, r.input_size, r.input_size);
    let _ = writeln!(out, "{:<width$}  {:<12}  {:>14}  {:>18}", "path", "kind", "params", "flops");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:<12}  {:>14}  {:>18}",
            row.path,
            row.kind,
            grouped(row.params),
            grouped(row.flops)
        );
    }
    let _ = writeln!(out, "\nper stage:");
    for (stage, p, f) in r.stage_totals() {
        let _ = writeln!(out, "  {stage:<8} {:>14}  {:>18}", grouped(p), grouped(f));
    }
    let _ = writeln!(
        out,
        "\ntotal params {} ({:.2}M)  flops {} ({:.2}B)",
        grouped(r.total_params),
        r.params_m(),
        grouped(r.total_flops),
        r.flops_b()
    );
    out
}

pub fn cost_csv(r: &CostReport) -> String {
    let mut out = String::from("path,kind,params,flops\n");
    for row in &r.rows {
        let _ = writeln!(out, "{},{},{},{}", row.path, row.kind, row.params, row.flops);
    }
    let _ = writeln!(out, "total,total,{},{}", r.total_params, r.total_flops);
    out
}

fn reference_cols(reference: Option<(f64, f64)>) -> (String, String) {
    match reference {
        Some((p, f)) => (format!("{p:.1}"), format!("{f:.1}")),
        None => ("-".into(), "-".into()),
    }
}

pub fn ablation_table(t: &AblationTable) -> String {
    let width = t.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
    let mut out = String::new();
    let _ = writeln!(out, "ablation {} on {}", t.suite.name(), t.layout);
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
        "variant", "params_M", "flops_B", "ref_M", "ref_B"
    );
    for r in &t.rows {
        let (rp, rf) = reference_cols(r.reference);
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.2}  {:>9.2}  {:>9}  {:>9}",
            r.variant,
            r.params_m(),
            r.flops_b(),
            rp,
            rf
        );
    }
    let v = t.ranking_violations();
    if v.is_empty() {
        let _ = writeln!(out, "params ranking: matches reference");
    } else {
        for (a, b) in v {
            let _ = writeln!(out, "params ranking: `{a}` and `{b}` are out of reference order");
        }
    }
    out
}

pub fn ablation_csv(t: &AblationTable) -> String {
    let mut out = String::from("variant,params,flops,ref_params_m,ref_flops_b\n");
    for r in &t.rows {
        let (rp, rf) = match r.reference {
            Some((p, f)) => (format!("{p:.1}"), format!("{f:.1}")),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{},{},{},{rp},{rf}", r.variant, r.params, r.flops);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping() {
        assert_eq!(grouped(0), "0");
        assert_eq!(grouped(999), "999");
        assert_eq!(grouped(1000), "1,000");
        assert_eq!(grouped(27_828_000), "27,828,000");
    }
}
