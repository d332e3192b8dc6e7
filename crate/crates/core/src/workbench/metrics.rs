//! Time, prompt and repair statistics over a project's transcripts and
//! episodes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::gateway::{Origin, Transcript};
use crate::repair::{ErrorClass, RepairEpisode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    PaperReading,
    CodeGeneration,
    ErrorCorrection,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::PaperReading, Category::CodeGeneration, Category::ErrorCorrection];
}

/// Session stages whose prompts count as error correction. A prompt
/// belongs to the stage that was active when it was sent.
pub const ERROR_CORRECTION_STAGES: [&str; 2] = ["repair", "integration"];

pub fn category_of(stage: &str) -> Category {
    if ERROR_CORRECTION_STAGES.contains(&stage) {
        Category::ErrorCorrection
    } else {
        Category::CodeGeneration
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginCounts {
    pub automatic: u64,
    pub human: u64,
}

impl OriginCounts {
    pub fn total(&self) -> u64 {
        self.automatic + self.human
    }

    fn add(&mut self, origin: Origin, n: u64) {
        match origin {
            Origin::Automatic => self.automatic += n,
            Origin::Human => self.human += n,
        }
    }
}

/// An exact fraction with its percentage for display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub numerator: u64,
    pub denominator: u64,
    pub percent: f64,
}

impl Share {
    pub fn of(part: u64, whole: u64) -> Option<Share> {
        if whole == 0 {
            return None;
        }
        let r = Ratio::new(part, whole);
        Some(Share {
            numerator: *r.numer(),
            denominator: *r.denom(),
            percent: *r.numer() as f64 * 100.0 / *r.denom() as f64,
        })
    }

    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.numerator, self.denominator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OriginShares {
    pub automatic: Share,
    pub human: Share,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorStat {
    pub episodes: u64,
    pub repair_ms: u64,
    pub automatic_prompts: u64,
    pub human_prompts: u64,
}

/// Least-squares line of repair minutes against human prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub points: usize,
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation; absent when every y is the same.
    pub r: Option<f64>,
}

/// Fits `y = slope * x + intercept`. Needs two distinct x values.
pub fn least_squares(points: &[(f64, f64)]) -> Option<Regression> {
    let first = points.first()?.0;
    if points.iter().all(|p| p.0 == first) {
        return None;
    }
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    Some(Regression {
        points: points.len(),
        slope,
        intercept: my - slope * mx,
        r: (syy > 0.0).then(|| sxy / (sxx * syy).sqrt()),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage_durations_ms: BTreeMap<Category, u64>,
    /// Per session stage and origin.
    pub prompt_counts: BTreeMap<String, OriginCounts>,
    pub totals: OriginCounts,
    pub transcript_records: u64,
    pub shares: Option<OriginShares>,
    pub error_stats: BTreeMap<ErrorClass, ErrorStat>,
    pub episodes: u64,
    pub regression: Option<Regression>,
}

pub fn compute_metrics(transcripts: &[Transcript], episodes: &[RepairEpisode], paper_reading_ms: u64) -> MetricsReport {
    let mut report = MetricsReport::default();
    for c in Category::ALL {
        report.stage_durations_ms.insert(c, 0);
    }
    *report.stage_durations_ms.get_mut(&Category::PaperReading).expect("inserted") = paper_reading_ms;
    for t in transcripts {
        for r in &t.records {
            *report.stage_durations_ms.entry(category_of(&r.stage)).or_default() += r.duration_ms;
            report.prompt_counts.entry(r.stage.clone()).or_default().add(r.origin, 1);
            report.totals.add(r.origin, 1);
            report.transcript_records += 1;
        }
    }
    let total = report.totals.total();
    report.shares = Share::of(report.totals.automatic, total).zip(Share::of(report.totals.human, total)).map(
        |(automatic, human)| OriginShares { automatic, human },
    );
    for e in episodes {
        let s = report.error_stats.entry(e.class).or_default();
        s.episodes += 1;
        s.repair_ms += e.wall_clock_ms;
        s.automatic_prompts += u64::from(e.automatic_prompt_count);
        s.human_prompts += u64::from(e.human_prompt_count);
        report.episodes += 1;
    }
    let points: Vec<(f64, f64)> = episodes
        .iter()
        .map(|e| (f64::from(e.human_prompt_count), e.wall_clock_ms as f64 / 60_000.0))
        .collect();
    report.regression = least_squares(&points);
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsFormat {
    Csv,
    Json,
}

impl MetricsFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MetricsFormat::Csv => "csv",
            MetricsFormat::Json => "json",
        }
    }
}

impl FromStr for MetricsFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<MetricsFormat, String> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "json" => Ok(MetricsFormat::Json),
            other => Err(format!("unknown metrics format `{other}`; expected csv or json")),
        }
    }
}

pub const CSV_HEADER: &str = "category,name,metric,value";

impl MetricsReport {
    /// Long format: one value per row under `category,name,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut row = |c: &str, n: &str, m: &str, v: String| {
            writeln!(out, "{c},{n},{m},{v}").expect("write to string");
        };
        for (cat, ms) in &self.stage_durations_ms {
            row("stage_duration", &format!("{cat:?}"), "ms", ms.to_string());
        }
        for (stage, c) in &self.prompt_counts {
            row("prompts", stage, "automatic", c.automatic.to_string());
            row("prompts", stage, "human", c.human.to_string());
        }
        if !self.prompt_counts.is_empty() {
            row("prompts", "total", "automatic", self.totals.automatic.to_string());
            row("prompts", "total", "human", self.totals.human.to_string());
        }
        if let Some(s) = &self.shares {
            for (name, share) in [("automatic", s.automatic), ("human", s.human)] {
                row("origin_share", name, "fraction", format!("{}/{}", share.numerator, share.denominator));
                row("origin_share", name, "percent", share.percent.to_string());
            }
        }
        for (class, s) in &self.error_stats {
            let name = class.to_string();
            row("errors", &name, "episodes", s.episodes.to_string());
            row("errors", &name, "repair_ms", s.repair_ms.to_string());
            row("errors", &name, "automatic_prompts", s.automatic_prompts.to_string());
            row("errors", &name, "human_prompts", s.human_prompts.to_string());
        }
        if let Some(r) = &self.regression {
            let name = "repair_minutes_vs_human_prompts";
            row("regression", name, "points", r.points.to_string());
            row("regression", name, "slope", r.slope.to_string());
            row("regression", name, "intercept", r.intercept.to_string());
            if let Some(v) = r.r {
                row("regression", name, "r", v.to_string());
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render(&self, format: MetricsFormat) -> String {
        match format {
            MetricsFormat::Csv => self.to_csv(),
            MetricsFormat::Json => self.to_json(),
        }
    }
}

pub fn export_metrics(report: &MetricsReport, format: MetricsFormat, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, report.render(format))
}
