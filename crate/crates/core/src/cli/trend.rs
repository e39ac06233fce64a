//! Emotion share over time in equal-population bins.

use chrono::NaiveDate;

/// One output row of the trend report.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendBin {
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Number of rows in the bin.
    pub count: usize,
    /// Share of those rows carrying the target emotion.
    pub fraction: f64,
}

/// Bin sizes for `n` rows in `k` bins; the first `n % k` bins take one
/// extra row.
pub fn bin_sizes(n: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1, "at least one bin");
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// Reads `date<TAB>labels[<TAB>...]` lines. Rows whose first field is not an
/// ISO date are skipped. Labels are comma-separated, `-` meaning none.
pub fn parse_rows(text: &str, emotion: &str) -> Vec<(NaiveDate, bool)> {
    let target = emotion.trim();
    text.lines()
        .filter_map(|line| {
            let mut fields = line.split('\t');
            let date = NaiveDate::parse_from_str(fields.next()?.trim(), "%Y-%m-%d").ok()?;
            let labels = fields.next().unwrap_or("");
            let hit = labels
                .split(',')
                .any(|l| l.trim().eq_ignore_ascii_case(target));
            Some((date, hit))
        })
        .collect()
}

/// Sorts rows by date (stable) and splits them into `bins` runs.
pub fn trend(rows: &[(NaiveDate, bool)], bins: usize) -> Result<Vec<TrendBin>, String> {
    if bins == 0 {
        return Err("bins must be at least 1".into());
    }
    if rows.is_empty() {
        return Err("no timestamped rows".into());
    }
    if rows.len() < bins {
        return Err(format!("{} timestamped rows cannot fill {bins} bins", rows.len()));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.0);
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for size in bin_sizes(sorted.len(), bins) {
        let chunk = &sorted[start..start + size];
        let hits = chunk.iter().filter(|r| r.1).count();
        out.push(TrendBin {
            start: chunk[0].0,
            end: chunk[size - 1].0,
            count: size,
            fraction: hits as f64 / size as f64,
        });
        start += size;
    }
    Ok(out)
}

pub fn to_csv(bins: &[TrendBin]) -> String {
    let mut out = String::from("bin_start,bin_end,count,fraction\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{}\n",
            b.start.format("%Y-%m-%d"),
            b.end.format("%Y-%m-%d"),
            b.count,
            b.fraction
        ));
    }
    out
}
