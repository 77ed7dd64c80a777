use std::collections::HashMap;

use serde::Serialize;

use super::category::{token_units, Categories};
use super::hist::PathHistogram;
use super::trace::RoutingTrace;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathReport {
    pub rank: usize,
    pub path: Vec<usize>,
    pub count: usize,
    pub freq: f64,
    /// Most frequent text units routed along the path.
    pub top_tokens: Vec<(String, usize)>,
    /// Category counts, largest first.
    pub categories: Vec<(String, usize)>,
    pub modal_category: String,
    /// Share of the path's tokens in its modal category.
    pub concentration: f64,
}

/// Largest counts first, ties by key.
fn ranked(map: HashMap<String, usize>) -> Vec<(String, usize)> {
    let mut v: Vec<_> = map.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Token and category make-up of the `top_paths` most frequent paths.
pub fn path_token_report(trace: &RoutingTrace, hist: &PathHistogram, cats: &Categories, top_paths: usize, top_tokens: usize) -> Vec<PathReport> {
    let units = token_units(trace);
    let wanted: HashMap<Vec<usize>, usize> = hist.top(top_paths).into_iter().enumerate().map(|(i, p)| (p, i)).collect();
    let mut tokens: Vec<HashMap<String, usize>> = vec![HashMap::new(); wanted.len()];
    let mut categories: Vec<HashMap<String, usize>> = vec![HashMap::new(); wanted.len()];
    for (t, unit) in units.iter().enumerate() {
        if let Some(&i) = wanted.get(&trace.path(t)) {
            *tokens[i].entry(unit.clone()).or_default() += 1;
            *categories[i].entry(cats.categorize(unit).to_string()).or_default() += 1;
        }
    }
    hist.entries()
        .iter()
        .take(top_paths)
        .zip(tokens.into_iter().zip(categories))
        .enumerate()
        .map(|(rank, ((path, count), (tok, cat)))| {
            let mut top = ranked(tok);
            top.truncate(top_tokens);
            let cat = ranked(cat);
            let (modal, modal_count) = cat.first().cloned().unwrap_or_default();
            PathReport {
                rank: rank + 1,
                path: path.clone(),
                count: *count,
                freq: *count as f64 / hist.total() as f64,
                top_tokens: top,
                categories: cat,
                modal_category: modal,
                concentration: modal_count as f64 / *count as f64,
            }
        })
        .collect()
}

/// Mean concentration over reports.
pub fn mean_concentration(reports: &[PathReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.concentration).sum::<f64>() / reports.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    pub fraction: f64,
    /// Path carrying the most tokens of this category.
    pub top_path: Vec<usize>,
    /// Share of the category's tokens carried by `top_path`.
    pub top_path_share: f64,
}

/// Category totals over a trace, each with its dominant path.
pub fn category_summary(trace: &RoutingTrace, cats: &Categories) -> Vec<CategoryRow> {
    let units = token_units(trace);
    let mut per: HashMap<&str, HashMap<Vec<usize>, usize>> = HashMap::new();
    for (t, unit) in units.iter().enumerate() {
        *per.entry(cats.categorize(unit)).or_default().entry(trace.path(t)).or_default() += 1;
    }
    let mut rows: Vec<CategoryRow> = cats
        .names()
        .iter()
        .filter_map(|name| {
            let paths = per.get(name.as_str())?;
            let count: usize = paths.values().sum();
            let (top_path, top) = paths.iter().max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0))).map(|(p, c)| (p.clone(), *c))?;
            Some(CategoryRow {
                category: name.clone(),
                count,
                fraction: count as f64 / trace.len() as f64,
                top_path,
                top_path_share: top as f64 / count as f64,
            })
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.category.cmp(&b.category)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::trace::TraceRecord;

    fn trace_of(text: &[u8], path_of: impl Fn(u8) -> usize) -> RoutingTrace {
        let mut t = RoutingTrace::new(1, 4, 1);
        for (pos, &b) in text.iter().enumerate() {
            t.push(TraceRecord { doc: 0, pos, token: b as usize, topk: vec![path_of(b)], gates: vec![1.0] }).unwrap();
        }
        t
    }

    #[test]
    fn punctuation_path_is_fully_concentrated() {
        let tr = trace_of(b"Hi. Yes, ok. No, go.", |b| if b == b'.' || b == b',' { 3 } else { 0 });
        let h = PathHistogram::from_trace(&tr);
        let rep = path_token_report(&tr, &h, &Categories::bundled(), 10, 5);
        assert_eq!(rep.len(), 2);
        let punct = rep.iter().find(|r| r.path == [3]).unwrap();
        assert_eq!(punct.modal_category, "punctuation");
        assert_eq!(punct.concentration, 1.0);
        assert_eq!(punct.top_tokens, [(".".to_string(), 3), (",".to_string(), 2)]);
        assert_eq!(rep[0].rank, 1);
        assert_eq!(rep[0].path, [0]);
    }

    #[test]
    fn even_mix_spreads_concentration() {
        // one byte each of four categories, all on one path
        let tr = trace_of(b"7.a ", |_| 1);
        let h = PathHistogram::from_trace(&tr);
        let rep = path_token_report(&tr, &h, &Categories::bundled(), 1, 10);
        assert_eq!(rep[0].categories.len(), 4);
        assert_eq!(rep[0].concentration, 0.25);
        assert_eq!(mean_concentration(&rep), 0.25);
    }

    #[test]
    fn summary_names_dominant_paths() {
        let tr = trace_of(b"a, b.", |b| if b == b',' { 2 } else { 0 });
        let rows = category_summary(&tr, &Categories::bundled());
        let p = rows.iter().find(|r| r.category == "punctuation").unwrap();
        assert_eq!(p.count, 2);
        assert_eq!(p.top_path_share, 0.5);
        assert!((rows.iter().map(|r| r.fraction).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
