//! Run configuration, report persistence (JSON), and the self-contained
//! interactive HTML report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::atomic_write;
use crate::attr::engine::{AttributionResult, ExplainerConfig, TargetKind};
use crate::attr::metrics::MetricConfig;
use crate::concept::models::FitConfig;
use crate::error::{Error, Result};

pub const REPORT_VERSION: &str = "1";

/// Top-level run configuration: one structured file drives a whole CLI run;
/// flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in model registry name.
    pub model: String,
    /// Split point for the concept pipeline.
    pub split_point: String,
    /// Concept model kind name (snake_case) for `concepts fit`.
    pub concept_kind: String,
    pub concept: FitConfig,
    pub explainer: ExplainerConfig,
    pub metric: MetricConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "linear-bow".to_string(),
            split_point: "embeddings".to_string(),
            concept_kind: "pca".to_string(),
            concept: FitConfig::default(),
            explainer: ExplainerConfig::default(),
            metric: MetricConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parse a TOML config file; unknown keys are reported by name.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Push the run-level seed into every sub-config that consumes one.
    pub fn propagate_seed(&mut self) {
        self.explainer.seed = self.seed;
        self.explainer.perturb.seed = self.seed;
        self.explainer.grad.seed = self.seed;
        self.metric.perturb.seed = self.seed;
        self.concept.seed = self.seed;
    }
}

/// One faithfulness metric over one attribution result. Curve metrics fill
/// `fractions`/`scores`/`auc`; scalar metrics fill `value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fractions: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<f64>,
}

/// One input's worth of results under one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRun {
    pub model: String,
    pub config: ExplainerConfig,
    pub input: String,
    pub results: Vec<AttributionResult>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub metrics: Vec<Vec<MetricRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub version: String,
    pub runs: Vec<ReportRun>,
    /// Wall-clock duration; off by default so fixed-seed runs are
    /// byte-identical.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing_ms: Option<u64>,
}

impl ExplanationReport {
    pub fn new(runs: Vec<ReportRun>) -> Self {
        ExplanationReport {
            version: REPORT_VERSION.to_string(),
            runs,
            timing_ms: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn save_report(report: &ExplanationReport, path: &Path) -> Result<()> {
    atomic_write(path, report.to_json()?.as_bytes())
}

pub fn load_report(path: &Path) -> Result<ExplanationReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::BadFileFormat {
        kind: "report".to_string(),
        detail: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// HTML report
// ---------------------------------------------------------------------------

/// Color class under symmetric normalization by max |score|: positive scores
/// are warm, negative cold, zero (or a degenerate scale) neutral.
pub fn color_class(score: f64, max_abs: f64) -> &'static str {
    if max_abs <= 0.0 || score == 0.0 {
        "neutral"
    } else if score > 0.0 {
        "warm"
    } else {
        "cold"
    }
}

/// JSON embedded in a script tag must not contain a literal `</`, which would
/// terminate the tag early.
fn escape_for_script(json: &str) -> String {
    json.replace("</", "<\\/")
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const STYLE: &str = "\
body { font-family: system-ui, sans-serif; margin: 2rem; max-width: 60rem; }
.run { border: 1px solid #ccc; border-radius: 6px; padding: 1rem; margin-bottom: 1.5rem; }
.input { color: #555; font-style: italic; margin-bottom: 0.5rem; }
.tokens button { margin-right: 0.3rem; padding: 0.2rem 0.5rem; border: 1px solid #999;
  border-radius: 4px; background: #f4f4f4; cursor: pointer; }
.tokens button.active { border-color: #1a6; background: #e6f6ee; }
.heatmap span.unit { padding: 0.15rem 0.3rem; margin-right: 0.2rem; border-radius: 3px;
  display: inline-block; }
.unit.warm { background: rgba(214, 69, 44, var(--a)); }
.unit.cold { background: rgba(44, 110, 214, var(--a)); }
.unit.neutral { background: transparent; }
.meta { color: #777; font-size: 0.85rem; margin-top: 0.4rem; }
";

const SCRIPT: &str = "\
const data = JSON.parse(document.getElementById('report-data').textContent);
function colorClass(score, maxAbs) {
  if (maxAbs <= 0 || score === 0) return 'neutral';
  return score > 0 ? 'warm' : 'cold';
}
function render(runIdx, resIdx) {
  const run = data.runs[runIdx];
  const res = run.results[resIdx];
  const maxAbs = Math.max(...res.scores.map(Math.abs), 0);
  const map = document.getElementById('heatmap-' + runIdx);
  map.innerHTML = '';
  res.units.forEach((unit, i) => {
    const s = res.scores[i];
    const span = document.createElement('span');
    span.className = 'unit ' + colorClass(s, maxAbs);
    span.style.setProperty('--a', maxAbs > 0 ? (Math.abs(s) / maxAbs).toFixed(3) : '0');
    span.title = s.toPrecision(6);
    span.textContent = unit;
    map.appendChild(span);
  });
  const meta = document.getElementById('meta-' + runIdx);
  const t = res.target;
  const what = t.kind === 'generated_token'
    ? 'generated token ' + (t.token || '?') + ' at position ' + t.output_position
    : 'class ' + t.class_index;
  meta.textContent = res.method + ' | ' + res.granularity + ' | ' + res.inference_mode
    + ' | target: ' + what;
  document.querySelectorAll('#tokens-' + runIdx + ' button').forEach((b, i) => {
    b.classList.toggle('active', i === resIdx);
  });
}
document.querySelectorAll('.tokens button').forEach(b => {
  b.addEventListener('click', () => render(+b.dataset.run, +b.dataset.result));
});
data.runs.forEach((_, i) => render(i, 0));
";

/// Render the report as one self-contained HTML file: inline data, inline
/// script, no network access. For generation runs each output token is a
/// button that switches the displayed attribution map.
pub fn render_html(report: &ExplanationReport) -> Result<String> {
    let json = escape_for_script(&serde_json::to_string(report)?);
    let mut body = String::new();
    for (ri, run) in report.runs.iter().enumerate() {
        body.push_str(&format!(
            "<div class=\"run\">\n<div class=\"input\">{}</div>\n",
            escape_html(&run.input)
        ));
        body.push_str(&format!("<div class=\"tokens\" id=\"tokens-{ri}\">\n"));
        for (i, res) in run.results.iter().enumerate() {
            let label = match res.target.kind {
                TargetKind::GeneratedToken => res
                    .target
                    .token_display
                    .clone()
                    .unwrap_or_else(|| format!("#{i}")),
                TargetKind::ClassIndex => {
                    format!("class {}", res.target.class_index.unwrap_or(0))
                }
            };
            body.push_str(&format!(
                "<button data-run=\"{ri}\" data-result=\"{i}\">{}</button>\n",
                escape_html(&label)
            ));
        }
        body.push_str("</div>\n");
        body.push_str(&format!("<p class=\"heatmap\" id=\"heatmap-{ri}\"></p>\n"));
        body.push_str(&format!("<div class=\"meta\" id=\"meta-{ri}\"></div>\n"));
        body.push_str("</div>\n");
    }
    Ok(format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n\
         <title>lexplain report</title>\n<style>\n{STYLE}</style>\n</head>\n<body>\n\
         <h1>lexplain report</h1>\n{body}\
         <script id=\"report-data\" type=\"application/json\">{json}</script>\n\
         <script>\n{SCRIPT}</script>\n</body>\n</html>\n"
    ))
}

pub fn emit_html(report: &ExplanationReport, path: &Path) -> Result<()> {
    atomic_write(path, render_html(report)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attr::engine::{Diagnostics, InferenceMode, Target};
    use crate::text::Granularity;

    fn result_for(position: usize, scores: Vec<f64>) -> AttributionResult {
        let mut target = Target::generated(position);
        target.token_id = Some(40 + position as u32);
        target.token_display = Some(format!("<{}>", 40 + position));
        AttributionResult {
            method: "occlusion".to_string(),
            granularity: Granularity::Word,
            inference_mode: InferenceMode::Logits,
            target,
            units: vec!["alpha".to_string(), "beta".to_string()],
            scores,
            diagnostics: Diagnostics {
                n_model_calls: 3,
                seed: 0,
                warnings: Vec::new(),
            },
        }
    }

    fn sample_report() -> ExplanationReport {
        ExplanationReport::new(vec![ReportRun {
            model: "tiny-gen".to_string(),
            config: ExplainerConfig::default(),
            input: "alpha beta".to_string(),
            results: vec![
                result_for(0, vec![0.5, -0.25]),
                result_for(1, vec![-1.0, 2.0]),
                result_for(2, vec![0.0, 0.125]),
            ],
            metrics: Vec::new(),
        }])
    }

    #[test]
    fn json_round_trips() {
        let report = sample_report();
        let json = report.to_json().unwrap();
        let back: ExplanationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn json_is_byte_stable() {
        assert_eq!(
            sample_report().to_json().unwrap(),
            sample_report().to_json().unwrap()
        );
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = sample_report();
        save_report(&report, &path).unwrap();
        assert_eq!(load_report(&path).unwrap(), report);
    }

    #[test]
    fn html_embeds_one_token_and_score_array_per_result() {
        let html = render_html(&sample_report()).unwrap();
        assert_eq!(html.matches("<button data-run=").count(), 3);
        assert_eq!(html.matches("\"scores\":").count(), 3);
        assert!(html.contains("&lt;40&gt;"));
    }

    #[test]
    fn html_has_no_external_references() {
        let html = render_html(&sample_report()).unwrap();
        assert!(!html.contains("http://"));
        assert!(!html.contains("https://"));
        assert!(!html.contains("src=\""));
        assert!(!html.contains("href"));
    }

    #[test]
    fn html_escapes_script_terminators_in_inputs() {
        let mut report = sample_report();
        report.runs[0].input = "</script><b>x".to_string();
        let html = render_html(&report).unwrap();
        // One closer for the data tag, one for the inline script.
        assert_eq!(html.matches("</script>").count(), 2);
    }

    #[test]
    fn color_class_maps_sign_to_temperature() {
        assert_eq!(color_class(-1.0, 1.0), "cold");
        assert_eq!(color_class(0.0, 1.0), "neutral");
        assert_eq!(color_class(1.0, 1.0), "warm");
        assert_eq!(color_class(1.0, 0.0), "neutral");
    }

    #[test]
    fn config_parses_partial_toml_and_rejects_unknown_model_later() {
        let cfg = RunConfig::from_toml("model = \"tiny-gen\"\nseed = 7\n").unwrap();
        assert_eq!(cfg.model, "tiny-gen");
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.explainer.method, "occlusion");
    }

    #[test]
    fn malformed_config_names_the_key() {
        let err = RunConfig::from_toml("seed = \"not a number\"\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn propagate_seed_reaches_subconfigs() {
        let mut cfg = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        cfg.propagate_seed();
        assert_eq!(cfg.explainer.seed, 9);
        assert_eq!(cfg.explainer.perturb.seed, 9);
        assert_eq!(cfg.explainer.grad.seed, 9);
        assert_eq!(cfg.metric.perturb.seed, 9);
        assert_eq!(cfg.concept.seed, 9);
    }
}
