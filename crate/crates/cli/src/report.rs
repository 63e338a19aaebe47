//! Comparison report: one row per evaluated model, as CSV with a JSON-lines sibling.
//!
//! The only run-dependent field is the generation timestamp in the header,
//! so two runs of the same configuration give identical rows.

use dlfd_core::eval::NomusReport;
use serde::Serialize;

pub const CSV_COLUMNS: &str =
    "method,status,test_accuracy,mia_accuracy,forgetting_score,nomus,model_hash,start_model_hash,error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub status: RowStatus,
    pub test_accuracy: Option<f64>,
    pub mia_accuracy: Option<f64>,
    pub forgetting_score: Option<f64>,
    pub nomus: Option<f64>,
    pub model_hash: Option<String>,
    /// Digest of the model the method started from.
    pub start_model_hash: Option<String>,
    pub error: Option<String>,
}

impl ReportRow {
    pub fn ok(report: &NomusReport, model_hash: String, start_model_hash: Option<String>) -> Self {
        Self {
            method: report.method.clone(),
            status: RowStatus::Ok,
            test_accuracy: Some(report.test_accuracy),
            mia_accuracy: Some(report.mia_accuracy),
            forgetting_score: Some(report.forgetting_score),
            nomus: Some(report.nomus),
            model_hash: Some(model_hash),
            start_model_hash,
            error: None,
        }
    }

    pub fn failed(method: impl Into<String>, start_model_hash: Option<String>, error: impl ToString) -> Self {
        Self {
            method: method.into(),
            status: RowStatus::Failed,
            test_accuracy: None,
            mia_accuracy: None,
            forgetting_score: None,
            nomus: None,
            model_hash: None,
            start_model_hash,
            error: Some(error.to_string()),
        }
    }

    fn csv_line(&self) -> String {
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let text = |v: &Option<String>| v.clone().unwrap_or_default();
        // keep free text inside a single unquoted field
        let error = self
            .error
            .as_deref()
            .unwrap_or_default()
            .replace([',', '\n', '\r'], " ");
        let status = match self.status {
            RowStatus::Ok => "ok",
            RowStatus::Failed => "failed",
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            status,
            num(self.test_accuracy),
            num(self.mia_accuracy),
            num(self.forgetting_score),
            num(self.nomus),
            text(&self.model_hash),
            text(&self.start_model_hash),
            error
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportHeader {
    pub tool: String,
    pub version: String,
    pub generated_unix: u64,
    pub config_sha256: String,
    pub dataset_sha256: String,
}

impl ReportHeader {
    pub fn new(config_sha256: String, dataset_sha256: String) -> Self {
        let generated_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool: "dlfd".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            generated_unix,
            config_sha256,
            dataset_sha256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub header: ReportHeader,
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.status == RowStatus::Failed)
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Comment header line, column header, then one line per row.
    pub fn to_csv(&self) -> String {
        let h = &self.header;
        let mut out = format!(
            "# {} {} generated_unix={} config_sha256={} dataset_sha256={}\n{CSV_COLUMNS}\n",
            h.tool, h.version, h.generated_unix, h.config_sha256, h.dataset_sha256
        );
        for row in &self.rows {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }

    /// Header object on the first line, then one object per row.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

/// Drops the timestamp from a rendered report so two runs can be compared byte for byte.
pub fn without_timestamp(report: &str) -> String {
    report
        .lines()
        .map(|line| {
            line.split([' ', ','])
                .filter(|tok| !tok.starts_with("generated_unix") && !tok.starts_with("\"generated_unix"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlfd_core::eval::nomus;

    fn sample() -> ComparisonReport {
        let report = NomusReport {
            method: "Original".into(),
            test_accuracy: 0.75,
            mia_accuracy: 0.6,
            forgetting_score: 0.1,
            nomus: nomus(0.75, 0.1).unwrap(),
        };
        ComparisonReport {
            header: ReportHeader {
                tool: "dlfd".into(),
                version: "0.1.0".into(),
                generated_unix: 1,
                config_sha256: "cfg".into(),
                dataset_sha256: "data".into(),
            },
            rows: vec![
                ReportRow::ok(&report, "abc".into(), None),
                ReportRow::failed("ErrorMax", Some("abc".into()), "numeric error: loss, diverged\nbadly"),
            ],
        }
    }

    #[test]
    fn csv_layout() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# dlfd 0.1.0 generated_unix=1 config_sha256=cfg dataset_sha256=data");
        assert_eq!(lines[1], CSV_COLUMNS);
        assert_eq!(lines[2], "Original,ok,0.75,0.6,0.1,0.775,abc,,");
        assert_eq!(lines[3], "ErrorMax,failed,,,,,,abc,numeric error: loss  diverged badly");
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 9));
    }

    #[test]
    fn jsonl_layout() {
        let text = sample().to_jsonl();
        let lines: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["generated_unix"], 1);
        assert_eq!(lines[1]["nomus"], 0.775);
        assert_eq!(lines[2]["status"], "failed");
        assert!(lines[2]["nomus"].is_null());
    }

    #[test]
    fn timestamp_is_the_only_difference() {
        let a = sample();
        let mut b = sample();
        b.header.generated_unix = 99;
        assert_ne!(a.to_csv(), b.to_csv());
        assert_eq!(without_timestamp(&a.to_csv()), without_timestamp(&b.to_csv()));
        assert_eq!(without_timestamp(&a.to_jsonl()), without_timestamp(&b.to_jsonl()));
        b.rows[0].test_accuracy = Some(0.5);
        assert_ne!(without_timestamp(&a.to_csv()), without_timestamp(&b.to_csv()));
    }
}
