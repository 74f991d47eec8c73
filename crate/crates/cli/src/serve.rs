//! Serves a scorer over the newline-delimited JSON protocol used by
//! external scorers: one `{"seq": ...}` request per line, one response per line.

use std::io::{BufRead, Write};

use anyhow::Result;
use humanize_core::scorers::ConditionalSequenceModel;
use humanize_core::seqcore::AntibodySequence;
use serde::Deserialize;
use serde_json::json;

#[derive(Deserialize)]
struct Request {
    seq: String,
}

fn respond(model: &dyn ConditionalSequenceModel, line: &str) -> serde_json::Value {
    let result = serde_json::from_str::<Request>(line)
        .map_err(|e| format!("bad request: {e}"))
        .and_then(|r| AntibodySequence::parse("query", &r.seq).map_err(|e| e.to_string()))
        .and_then(|seq| model.score(&seq).map_err(|e| e.to_string()));
    match result {
        Ok(z) => json!({ "logits": z.rows() }),
        Err(e) => json!({ "error": e }),
    }
}

pub fn serve(model: &dyn ConditionalSequenceModel, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        serde_json::to_writer(&mut output, &respond(model, &line))?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use humanize_core::scorers::{FixedLogitsModel, LogitsMatrix};

    #[test]
    fn answers_each_line() {
        let model = FixedLogitsModel::new(LogitsMatrix::new(vec![[0.5; 20]; 3]).unwrap());
        let input = b"{\"seq\": \"AC#\"}\n\n{\"seq\": \"AC\"}\nnot json\n";
        let mut out = Vec::new();
        serve(&model, &input[..], &mut out).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["logits"].as_array().unwrap().len(), 3);
        assert!(lines[1]["error"].is_string());
        assert!(lines[2]["error"].as_str().unwrap().starts_with("bad request"));
    }
}
