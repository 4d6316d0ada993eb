//! JSON-Lines instruction sets: one `{"instruction", "input", "output"}`
//! object per line, with optional `id` and `cot_output`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use expertforge_core::{InstructionSample, ShotSet};
use serde_json::Value;

use crate::error::{ForgeError, Result};

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> std::result::Result<Option<&'a str>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(format!("key {key:?} must be a string, got {other}")),
    }
}

/// Parse instruction samples, assigning the 0-based line index as id when
/// absent. Blank lines are skipped but still counted.
pub fn parse_instruction_lines(path: &Path, text: &str) -> Result<Vec<InstructionSample>> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| ForgeError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse_err("expected a JSON object".into()))?;
        let id = match obj.get("id") {
            None | Some(Value::Null) => idx.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(other) => return Err(parse_err(format!("id must be a string, got {other}"))),
        };
        let instruction = field(obj, "instruction")
            .map_err(parse_err)?
            .ok_or_else(|| parse_err("missing key \"instruction\"".into()))?;
        if instruction.is_empty() {
            return Err(parse_err("empty instruction".into()));
        }
        let output = field(obj, "output")
            .map_err(parse_err)?
            .ok_or_else(|| parse_err("missing key \"output\"".into()))?;
        let input = field(obj, "input").map_err(parse_err)?.unwrap_or("");
        let cot_output = field(obj, "cot_output").map_err(parse_err)?;
        if cot_output == Some("") {
            return Err(parse_err("empty cot_output".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(ForgeError::Conflict {
                path: path.to_path_buf(),
                id,
            });
        }
        samples.push(InstructionSample {
            id,
            instruction: instruction.to_string(),
            input: input.to_string(),
            output: output.to_string(),
            cot_output: cot_output.map(str::to_string),
        });
    }
    Ok(samples)
}

pub fn read_instruction_samples(path: &Path) -> Result<Vec<InstructionSample>> {
    let text = fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
    parse_instruction_lines(path, &text)
}

/// Read a K-shot set. An empty file yields `K = 0`; operations needing
/// shots reject it.
pub fn read_instruction_set(path: &Path) -> Result<ShotSet> {
    let samples = read_instruction_samples(path)?;
    ShotSet::new(samples).map_err(|source| ForgeError::Invalid {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_instruction_samples<'a>(
    path: &Path,
    samples: impl IntoIterator<Item = &'a InstructionSample>,
) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s).expect("sample serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| ForgeError::io(path, e))?;
    f.write_all(&out).map_err(|e| ForgeError::io(path, e))
}
