use std::fmt::Write;

use super::metrics::{EvalReport, GroupStat};
use super::runner::SweepRow;
use super::{Dimension, Split};

/// Default LoRA scales for the zero-shot sweep, largest first.
pub const SWEEP_SCALES: [f64; 5] = [1.0, 0.75, 0.5, 0.25, 0.0];

fn cell(stat: Option<&GroupStat>) -> (String, String) {
    match stat {
        Some(s) => (format!("{:.2}", s.mean), s.count.to_string()),
        None => ("-".into(), "0".into()),
    }
}

/// Seen and unseen blocks of per-dimension averages with their split
/// averages, then the overall average, plus a row of instance counts.
pub fn format_instance_table(report: &EvalReport) -> String {
    let mut header = vec![String::new()];
    let mut counts = vec!["# Instances".to_string()];
    let mut values = vec!["Accuracy".to_string()];
    for split in Split::ALL {
        let dims = report.per_dimension.get(&split);
        for dim in Dimension::ALL {
            header.push(format!("{}:{}", split.as_str(), dim.as_str()));
            let (v, c) = cell(dims.and_then(|d| d.get(&dim)));
            values.push(v);
            counts.push(c);
        }
        header.push(format!("{}:Avg", split.as_str()));
        let (v, c) = cell(report.split_average.get(&split));
        values.push(v);
        counts.push(c);
    }
    header.push("All:Avg".into());
    let (v, c) = cell(report.overall.as_ref());
    values.push(v);
    counts.push(c);

    let widths: Vec<usize> = (0..header.len())
        .map(|i| header[i].len().max(counts[i].len()).max(values[i].len()))
        .collect();
    let mut out = String::new();
    for row in [&header, &counts, &values] {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    for n in &report.notices {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

/// One row per LoRA scale; rows where nothing followed print N/A.
pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6}  {:>12}  {:>8}  {:>14}", "alpha", "Success Rate", "Accuracy", "Following Rate");
    for r in rows {
        let rep = &r.report;
        if rep.is_na() {
            let _ = writeln!(out, "{:>6.2}  {:>12}  {:>8}  {:>14}", r.scale, "N/A", "N/A", "N/A");
        } else {
            let _ = writeln!(
                out,
                "{:>6.2}  {:>12.2}  {:>8.2}  {:>14.2}",
                r.scale,
                rep.success_rate,
                rep.accuracy.unwrap_or_default(),
                rep.following_rate
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{aggregate, InstanceResult, ZeroShotReport};

    #[test]
    fn instance_table_has_counts_and_dashes() {
        let r = aggregate(&[InstanceResult::from_counts("a", Dimension::Spk, Split::Seen, 1, 2).unwrap()]).unwrap();
        let t = format_instance_table(&r);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("seen:SPK") && lines[0].contains("All:Avg"));
        assert!(lines[1].starts_with("# Instances"));
        assert!(lines[2].contains("50.00") && lines[2].contains('-'));
        assert!(t.contains("note: no instances for seen/CON"));
    }

    #[test]
    fn sweep_table_na_row() {
        let na = ZeroShotReport {
            n: 2,
            followed: 0,
            correct_and_followed: 0,
            following_rate: 0.0,
            accuracy: None,
            success_rate: 0.0,
            per_question: vec![],
        };
        let ok = ZeroShotReport {
            n: 2,
            followed: 2,
            correct_and_followed: 1,
            following_rate: 100.0,
            accuracy: Some(50.0),
            success_rate: 50.0,
            per_question: vec![],
        };
        let t = format_sweep_table(&[SweepRow { scale: 1.0, report: na }, SweepRow { scale: 0.0, report: ok }]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("N/A"));
        assert!(lines[2].contains("50.00") && lines[2].contains("100.00"));
    }
}
