// Copyright 2026 The hmvcc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use std::io::Write;
use std::path::Path;

use crate::config::BenchConfig;
use crate::BenchResult;

/// One measured value. `timing` marks wall-clock derived values, which are
/// left out of deterministic reports.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub section: String,
    pub label: String,
    pub metric: String,
    pub value: String,
    pub timing: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub experiment: String,
    pub config: BenchConfig,
    pub records: Vec<Record>,
}

impl RunReport {
    pub fn new(experiment: impl Into<String>, config: &BenchConfig) -> Self {
        RunReport {
            experiment: experiment.into(),
            config: config.clone(),
            records: Vec::new(),
        }
    }

    pub fn count(&mut self, section: &str, label: &str, metric: &str, value: impl ToString) {
        self.push(section, label, metric, value.to_string(), false);
    }

    pub fn timing(&mut self, section: &str, label: &str, metric: &str, value: f64) {
        self.push(section, label, metric, format!("{value:.6}"), true);
    }

    fn push(&mut self, section: &str, label: &str, metric: &str, value: String, timing: bool) {
        self.records.push(Record {
            section: section.into(),
            label: label.into(),
            metric: metric.into(),
            value,
            timing,
        });
    }

    pub fn extend(&mut self, other: RunReport) {
        self.records.extend(other.records);
    }

    pub fn get(&self, section: &str, label: &str, metric: &str) -> Option<&str> {
        self.records
            .iter()
            .find(|r| r.section == section && r.label == label && r.metric == metric)
            .map(|r| r.value.as_str())
    }

    pub fn get_f64(&self, section: &str, label: &str, metric: &str) -> Option<f64> {
        self.get(section, label, metric)?.parse().ok()
    }

    pub fn section(&self, section: &str) -> impl Iterator<Item = &Record> {
        let section = section.to_string();
        self.records.iter().filter(move |r| r.section == section)
    }

    /// Header comment with the config, then `section,label,metric,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> BenchResult<()> {
        let mut header = format!("# experiment={}", self.experiment);
        for (k, v) in self.config.pairs() {
            header.push_str(&format!(" {k}={v}"));
        }
        writeln!(out, "{header}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["section", "label", "metric", "value"])?;
        for r in &self.records {
            if r.timing && self.config.deterministic {
                continue;
            }
            w.write_record([&r.section, &r.label, &r.metric, &r.value])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 report")
    }

    pub fn save(&self, path: &Path) -> BenchResult<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}
