//! Response generation for instruction records.

use serde::{Deserialize, Serialize};

use crate::corpus::InstructionRecord;
use crate::gateway::{ChatRequest, Gateway};

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub overwrite: bool,
}

impl ResponseSettings {
    pub fn new(model: impl Into<String>) -> Self {
        ResponseSettings {
            model: model.into(),
            temperature: 0.0,
            max_tokens: 2048,
            overwrite: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseFailure {
    pub record_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ResponseReport {
    pub generated: usize,
    pub skipped: usize,
    pub failures: Vec<ResponseFailure>,
}

/// Sends each instruction as a single user message and stores the reply
/// verbatim. Records that already have a response are left alone unless
/// `overwrite` is set; failed records keep a null response.
pub fn generate_responses(
    records: &[InstructionRecord],
    gateway: &Gateway,
    settings: &ResponseSettings,
) -> (Vec<InstructionRecord>, ResponseReport) {
    let outcomes = gateway.for_each_bounded(records, |_, record| {
        if record.response.is_some() && !settings.overwrite {
            return None;
        }
        let request = ChatRequest::user(&settings.model, &record.instruction, settings.temperature, settings.max_tokens);
        Some(gateway.complete(&request))
    });

    let mut report = ResponseReport::default();
    let mut out = Vec::with_capacity(records.len());
    for (record, outcome) in records.iter().zip(outcomes) {
        let mut record = record.clone();
        match outcome {
            None => report.skipped += 1,
            Some(Ok(reply)) => {
                record.response = Some(reply.content);
                report.generated += 1;
            }
            Some(Err(err)) => {
                record.response = None;
                report.failures.push(ResponseFailure {
                    record_id: record.id.clone(),
                    error: err.to_string(),
                });
            }
        }
        out.push(record);
    }
    (out, report)
}
