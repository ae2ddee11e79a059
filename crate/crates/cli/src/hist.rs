//! Value histograms for weight/activation summaries.
//!
//! Quantized tensors concentrate on a handful of exact levels, so they get an
//! exact-value histogram; real-valued tensors get uniform bins.

/// Exact-value histogram: distinct values in ascending order with counts.
/// `-0.0` and `0.0` collapse into one bucket.
pub fn level_histogram(data: &[f32]) -> Vec<(f32, usize)> {
    let mut sorted: Vec<f32> = data.to_vec();
    sorted.sort_by(f32::total_cmp);
    let mut out: Vec<(f32, usize)> = Vec::new();
    for v in sorted {
        match out.last_mut() {
            Some((level, count)) if *level == v => *count += 1,
            _ => out.push((v, 1)),
        }
    }
    out
}

/// Uniform-bin histogram over `[min, max]`; the top edge is inclusive.
/// Returns `bins + 1` edges and `bins` counts.
pub fn binned_histogram(data: &[f32], bins: usize) -> (Vec<f32>, Vec<usize>) {
    assert!(bins >= 1, "need at least one bin");
    if data.is_empty() {
        return (vec![0.0; bins + 1], vec![0; bins]);
    }
    let min = data.iter().copied().fold(f32::INFINITY, f32::min);
    let max = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let width = ((max - min) / bins as f32).max(f32::MIN_POSITIVE);
    let edges: Vec<f32> = (0..=bins).map(|i| min + width * i as f32).collect();
    let mut counts = vec![0usize; bins];
    for &v in data {
        let k = (((v - min) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    (edges, counts)
}

fn bar(count: usize, max_count: usize, width: usize) -> String {
    if max_count == 0 {
        return String::new();
    }
    let n = (count * width + max_count - 1) / max_count;
    "#".repeat(n)
}

/// Text rendering of an exact-level histogram.
pub fn render_levels(title: &str, levels: &[(f32, usize)]) -> String {
    let total: usize = levels.iter().map(|&(_, c)| c).sum();
    let peak = levels.iter().map(|&(_, c)| c).max().unwrap_or(0);
    let mut s = format!("{title} ({total} values, {} levels)\n", levels.len());
    for &(v, c) in levels {
        s.push_str(&format!("  {v:>10.5}  {c:>8}  {}\n", bar(c, peak, 40)));
    }
    s
}

/// Text rendering of a binned histogram.
pub fn render_bins(title: &str, edges: &[f32], counts: &[usize]) -> String {
    let total: usize = counts.iter().sum();
    let peak = counts.iter().copied().max().unwrap_or(0);
    let mut s = format!("{title} ({total} values, {} bins)\n", counts.len());
    for (i, &c) in counts.iter().enumerate() {
        let line = format!("  [{:>9.4}, {:>9.4})  {c:>8}  {}\n", edges[i], edges[i + 1], bar(c, peak, 40));
        s.push_str(&line);
    }
    s
}

/// CSV header shared by all histogram rows.
pub const CSV_HEADER: &str = "layer,kind,lo,hi,count";

/// Appends exact-level rows (`lo == hi == level`).
pub fn csv_levels(out: &mut String, layer: &str, kind: &str, levels: &[(f32, usize)]) {
    for &(v, c) in levels {
        out.push_str(&format!("{layer},{kind},{v},{v},{c}\n"));
    }
}

/// Appends binned rows.
pub fn csv_bins(out: &mut String, layer: &str, kind: &str, edges: &[f32], counts: &[usize]) {
    for (i, &c) in counts.iter().enumerate() {
        out.push_str(&format!("{layer},{kind},{},{},{c}\n", edges[i], edges[i + 1]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_group_exact_values() {
        let data = [0.5, -0.25, 0.5, 0.0, -0.25, 0.5];
        let h = level_histogram(&data);
        assert_eq!(h, vec![(-0.25, 2), (0.0, 1), (0.5, 3)]);
    }

    #[test]
    fn levels_merge_signed_zero() {
        let h = level_histogram(&[-0.0, 0.0, 0.0]);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].1, 3);
    }

    #[test]
    fn level_counts_sum_to_element_count() {
        let data: Vec<f32> = (0..257).map(|i| ((i * 7) % 13) as f32).collect();
        let h = level_histogram(&data);
        let total: usize = h.iter().map(|&(_, c)| c).sum();
        assert_eq!(total, data.len());
    }

    #[test]
    fn bin_counts_sum_to_element_count() {
        let data: Vec<f32> = (0..500).map(|i| (i as f32).sin()).collect();
        let (edges, counts) = binned_histogram(&data, 17);
        assert_eq!(edges.len(), 18);
        assert_eq!(counts.iter().sum::<usize>(), data.len());
    }

    #[test]
    fn max_lands_in_last_bin() {
        let (_, counts) = binned_histogram(&[0.0, 1.0, 2.0], 2);
        assert_eq!(counts, vec![1, 2]);
    }

    #[test]
    fn constant_data_is_one_full_bin() {
        let (_, counts) = binned_histogram(&[3.5; 9], 4);
        assert_eq!(counts.iter().sum::<usize>(), 9);
    }

    #[test]
    fn csv_rows_match_histogram() {
        let mut s = String::new();
        csv_levels(&mut s, "conv2", "quantized", &[(0.5, 3), (0.0, 1)]);
        assert_eq!(s, "conv2,quantized,0.5,0.5,3\nconv2,quantized,0,0,1\n");
    }
}
