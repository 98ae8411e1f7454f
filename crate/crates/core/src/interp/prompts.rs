//! Prompt assembly. Builders are pure: identical inputs give identical bytes.

use std::collections::HashMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::error::{Result, SaeError};

use super::{ActiveFeatureSet, FeatureRecord};

const DESCRIBE: &str = include_str!("templates/describe.txt");
const REPORT_PREAMBLE: &str = include_str!("templates/report_preamble.txt");
const REPORT_INSTRUCTIONS: &str = include_str!("templates/report_instructions.txt");
const REPORT_CLOSING: &str = include_str!("templates/report_closing.txt");

const INDICATION_LEAD: &str = "The reason for the current x-ray examination is provided below:";
const NO_FEATURES: &str = "No features were detected in the current X-ray image. \
Report that there are no acute findings.";

/// At most this many prior reports are included in a report prompt.
pub const MAX_PRIORS: usize = 3;

/// The describer prompt with the record's reports in activation order.
pub fn build_describe_prompt(record: &FeatureRecord, manifest: &Manifest) -> Result<String> {
    if record.top_examples.is_empty() {
        return Err(SaeError::Pipeline(format!(
            "feature {} has no examples to describe",
            record.index
        )));
    }
    let mut out = String::from(DESCRIBE.trim_end());
    out.push('\n');
    for (k, (id, _)) in record.top_examples.iter().enumerate() {
        let report = manifest.report(*id)?;
        writeln!(out, "Report number {}: {report}", k + 1).expect("string write");
    }
    Ok(out)
}

/// An earlier report for the same patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorReport {
    pub text: String,
    /// Minutes between this report and the current examination.
    #[serde(default)]
    pub age_minutes: Option<u64>,
}

/// `"X years, Y days, Z hours and W minutes"`, with 365-day years.
pub fn format_age(minutes: u64) -> String {
    let (hours, mins) = (minutes / 60, minutes % 60);
    let (days, hours) = (hours / 24, hours % 24);
    let (years, days) = (days / 365, days % 365);
    format!("{years} years, {days} days, {hours} hours and {mins} minutes")
}

/// Most recent first; reports of unknown age go last, in input order.
fn select_priors(priors: &[PriorReport]) -> Vec<&PriorReport> {
    let mut sorted: Vec<&PriorReport> = priors.iter().collect();
    sorted.sort_by_key(|p| p.age_minutes.unwrap_or(u64::MAX));
    sorted.truncate(MAX_PRIORS);
    sorted
}

/// The generator prompt for one image.
pub fn build_report_prompt(
    set: &ActiveFeatureSet,
    descriptions: &HashMap<usize, String>,
    indication: Option<&str>,
    priors: &[PriorReport],
) -> Result<String> {
    let mut out = String::from(REPORT_PREAMBLE.trim_end());
    out.push('\n');

    let priors = select_priors(priors);
    if !priors.is_empty() {
        out.push_str("<patient_history>\n");
        for (k, prior) in priors.iter().enumerate() {
            out.push_str("<past_report>\n");
            match prior.age_minutes {
                Some(age) => writeln!(
                    out,
                    "Report number {}. This report was written {} before the current chest x-ray",
                    k + 1,
                    format_age(age)
                ),
                None => writeln!(out, "Report number {}.", k + 1),
            }
            .expect("string write");
            out.push_str(prior.text.trim_end());
            out.push_str("\n</past_report>\n");
        }
        out.push_str("</patient_history>\n\n");
    }

    out.push_str("<current_chest_x_ray>\n");
    if set.entries.is_empty() {
        out.push_str(NO_FEATURES);
        out.push('\n');
    }
    let mut ordered: Vec<_> = set.entries.iter().collect();
    ordered.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.feature.cmp(&b.feature)));
    for (k, entry) in ordered.iter().enumerate() {
        let desc = descriptions.get(&entry.feature).ok_or_else(|| {
            SaeError::Pipeline(format!("feature {} has no description", entry.feature))
        })?;
        let n = k + 1;
        writeln!(
            out,
            "<feature {n}>\nFeature number {n}. Relative importance score {:.2}:\n{}\n</feature {n}>",
            entry.importance,
            desc.trim()
        )
        .expect("string write");
    }
    out.push_str("</current_chest_x_ray>\n");

    out.push_str(REPORT_INSTRUCTIONS.trim_end());
    match indication.map(str::trim).filter(|s| !s.is_empty()) {
        Some(ind) => {
            write!(out, " {INDICATION_LEAD}\n\n<indication>\n{ind}\n</indication>\n\n")
                .expect("string write");
        }
        None => out.push_str("\n\n"),
    }
    out.push_str(REPORT_CLOSING.trim_end());
    out.push('\n');
    Ok(out)
}
