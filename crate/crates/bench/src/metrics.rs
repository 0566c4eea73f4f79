//! Rank metrics and benchmark reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use kbq_core::query::Template;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QueryScore {
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub rr: f64,
}

/// Hits@k is 1 if any gold id is in the top k; the reciprocal rank uses the
/// best-ranked gold id.
pub fn score(ranked: &[usize], gold: &BTreeSet<usize>) -> QueryScore {
    match ranked.iter().position(|i| gold.contains(i)) {
        None => QueryScore::default(),
        Some(p) => {
            let hit = |k: usize| if p < k { 1.0 } else { 0.0 };
            QueryScore {
                hits1: hit(1),
                hits3: hit(3),
                hits10: hit(10),
                rr: 1.0 / (p + 1) as f64,
            }
        }
    }
}

/// Expected Hits@k of a uniformly random ranking of `n` entities with `g`
/// gold answers: `1 - C(n-g, k) / C(n, k)`.
pub fn random_hits_at_k(n: usize, g: usize, k: usize) -> f64 {
    if g == 0 || n == 0 {
        return 0.0;
    }
    let k = k.min(n);
    let miss: f64 = (0..k)
        .map(|i| (n.saturating_sub(g + i)) as f64 / (n - i) as f64)
        .product();
    1.0 - miss
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateStats {
    pub template: Template,
    pub count: usize,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mrr: f64,
}

impl TemplateStats {
    pub fn from_scores(template: Template, scores: &[QueryScore]) -> Self {
        let n = scores.len();
        let mean = |f: fn(&QueryScore) -> f64| {
            if n == 0 {
                0.0
            } else {
                scores.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            template,
            count: n,
            hits1: mean(|s| s.hits1),
            hits3: mean(|s| s.hits3),
            hits10: mean(|s| s.hits10),
            mrr: mean(|s| s.rr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Hits1,
    Hits3,
    Hits10,
    Mrr,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Hits1, Metric::Hits3, Metric::Hits10, Metric::Mrr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Hits1 => "hits@1",
            Metric::Hits3 => "hits@3",
            Metric::Hits10 => "hits@10",
            Metric::Mrr => "mrr",
        }
    }

    fn of(self, s: &TemplateStats) -> f64 {
        match self {
            Metric::Hits1 => s.hits1,
            Metric::Hits3 => s.hits3,
            Metric::Hits10 => s.hits10,
            Metric::Mrr => s.mrr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<TemplateStats>,
    /// Echo of the settings that produced the report.
    pub config: Vec<(String, String)>,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn get(&self, t: Template) -> Option<&TemplateStats> {
        self.rows.iter().find(|r| r.template == t)
    }

    /// Metric for one template, in `[0, 1]`.
    pub fn metric(&self, t: Template, m: Metric) -> Option<f64> {
        self.get(t).map(|r| m.of(r))
    }

    /// Mean of the per-template values over templates with queries.
    pub fn average(&self, m: Metric) -> f64 {
        let rows: Vec<&TemplateStats> = self.rows.iter().filter(|r| r.count > 0).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|r| m.of(r)).sum::<f64>() / rows.len() as f64
    }

    /// Machine-readable records. Values are x100 with one decimal; timing is
    /// left out so reports from identical runs compare equal.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("template\tcount");
        for m in Metric::ALL {
            let _ = write!(s, "\t{}", m.name());
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}", r.template, r.count);
            for m in Metric::ALL {
                let _ = write!(s, "\t{:.1}", 100.0 * m.of(r));
            }
            s.push('\n');
        }
        let _ = write!(s, "avg\t{}", self.rows.iter().map(|r| r.count).sum::<usize>());
        for m in Metric::ALL {
            let _ = write!(s, "\t{:.1}", 100.0 * self.average(m));
        }
        s.push('\n');
        s
    }

    /// Templates as columns, metrics as rows.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "");
        for r in &self.rows {
            let _ = write!(s, "{:>7}", r.template.name());
        }
        let _ = writeln!(s, "{:>7}", "Avg");
        for m in Metric::ALL {
            let _ = write!(s, "{:<8}", m.name());
            for r in &self.rows {
                let _ = write!(s, "{:>7.1}", 100.0 * m.of(r));
            }
            let _ = writeln!(s, "{:>7.1}", 100.0 * self.average(m));
        }
        let _ = write!(s, "{:<8}", "queries");
        for r in &self.rows {
            let _ = write!(s, "{:>7}", r.count);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "wall clock: {:.2}s", self.wall_clock_secs);
        s
    }
}
