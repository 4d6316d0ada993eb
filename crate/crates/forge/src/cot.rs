//! Prompt asking an external model to expand a bare answer into an
//! answer-first rationale.

use std::path::Path;

use expertforge_core::InstructionSample;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

const HEADER: &str = "Read the question and answer. According to the answer, present your thought about the solution.\n\
- Please think step by step and provide the answer first then with its explanation.\n\
- Your explanation should not exceed three sentences.\n";

/// Renders the template. A non-empty input follows the instruction on its
/// own line; an empty one adds nothing. No trailing newline.
pub fn emit_cot_prompt(sample: &InstructionSample) -> String {
    let mut question = sample.instruction.clone();
    if !sample.input.is_empty() {
        question.push('\n');
        question.push_str(&sample.input);
    }
    format!("{HEADER}\nQuestion: {question}\nAnswer: {}.", sample.output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotPrompt {
    pub id: String,
    pub prompt: String,
}

/// One `{"id", "prompt"}` line per sample, in sample order.
pub fn write_cot_prompts(path: &Path, samples: &[InstructionSample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(
            &mut out,
            &CotPrompt {
                id: s.id.clone(),
                prompt: emit_cot_prompt(s),
            },
        )
        .expect("prompt serializes");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| ForgeError::io(path, e))
}
