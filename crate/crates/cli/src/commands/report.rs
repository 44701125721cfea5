use std::fmt::Write as _;
use std::fs;

use segkit::metrics::MetricRow;

use crate::cli::ReportArgs;
use crate::commands::evaluate::{fmt_opt, MetricsSummary, METRICS_JSON};
use crate::config::RunConfig;
use crate::error::{Classify, CliResult};

pub const REPORT_FILE: &str = "report.md";

fn table(out: &mut String, title: &str, rows: &[MetricRow]) {
    let _ = writeln!(out, "### {title}\n");
    let _ = writeln!(
        out,
        "| region | dice | sensitivity | specificity | accuracy | iou |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.region,
            fmt_opt(r.dice),
            fmt_opt(r.sensitivity),
            fmt_opt(r.specificity),
            fmt_opt(r.accuracy),
            fmt_opt(r.iou)
        );
    }
    out.push('\n');
}

/// Markdown summary with both averaging conventions. The `MEAN` row in each
/// table averages the three regions.
pub fn render(s: &MetricsSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "## Segmentation metrics ({} split, {} cases)\n",
        s.split,
        s.cases.len()
    );
    let _ = writeln!(out, "Mean foreground soft dice: {:.4}\n", s.mean_soft_dice);
    table(&mut out, "Mean over cases", &s.macro_rows);
    table(&mut out, "Pooled voxel counts", &s.pooled_rows);
    if !s.undefined.is_empty() {
        let _ = writeln!(
            out,
            "Undefined metrics (zero denominator) were left out of the means:\n"
        );
        for u in &s.undefined {
            let _ = writeln!(out, "- {} {}: {}", u.case, u.region, u.metrics.join(", "));
        }
    }
    out
}

pub fn run_report(cfg: &RunConfig, args: &ReportArgs) -> CliResult<()> {
    let path = args
        .metrics
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(METRICS_JSON));
    let text = fs::read_to_string(&path).or_usage(format!(
        "reading {}; run `segkit evaluate` first",
        path.display()
    ))?;
    let summary: MetricsSummary =
        serde_json::from_str(&text).or_data(format!("parsing {}", path.display()))?;
    let report = render(&summary);
    fs::create_dir_all(&cfg.output_dir).or_data("creating output directory")?;
    let out = cfg.output_dir.join(REPORT_FILE);
    fs::write(&out, &report).or_data(format!("writing {}", out.display()))?;
    print!("{report}");
    Ok(())
}
