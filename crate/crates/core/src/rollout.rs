//! Rollout records and their newline-delimited JSON file format.
//!
//! One record per response:
//! `{"prompt_id": "...", "prompt_tokens": [..], "response_tokens": [..], "advantage": 0.5}`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{Response, RolloutGroup, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSample {
    pub prompt_id: String,
    pub prompt_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
    pub advantage: f64,
}

impl RolloutSample {
    pub fn seq_len(&self) -> usize {
        self.prompt_tokens.len() + self.response_tokens.len()
    }
}

/// Parses a rollout file. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn read_rollouts(reader: impl BufRead) -> Result<Vec<RolloutSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: RolloutSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !sample.advantage.is_finite() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "advantage must be finite".into(),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_rollouts(mut writer: impl Write, samples: &[RolloutSample]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut writer, s)?;
        writeln!(writer)?;
    }
    Ok(())
}

/// Groups samples by prompt id in order of first appearance. Every record
/// of a prompt must carry identical prompt tokens.
pub fn group_samples(samples: &[RolloutSample]) -> Result<Vec<RolloutGroup>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<RolloutGroup> = Vec::new();
    for s in samples {
        let response = Response {
            tokens: s.response_tokens.clone(),
            advantage: s.advantage,
        };
        match index.get(s.prompt_id.as_str()) {
            Some(&gi) => {
                let g = &mut groups[gi];
                if g.prompt_tokens != s.prompt_tokens {
                    return Err(Error::InconsistentPrompt(s.prompt_id.clone()));
                }
                g.responses.push(response);
            }
            None => {
                index.insert(&s.prompt_id, groups.len());
                groups.push(RolloutGroup {
                    prompt_id: s.prompt_id.clone(),
                    prompt_tokens: s.prompt_tokens.clone(),
                    responses: vec![response],
                });
            }
        }
    }
    Ok(groups)
}

/// Groups consecutive samples that share a prompt id, keeping their order.
/// Unlike [`group_samples`] a prompt may appear in several runs.
pub fn group_runs(samples: &[RolloutSample]) -> Vec<RolloutGroup> {
    let mut groups: Vec<RolloutGroup> = Vec::new();
    for s in samples {
        let response = Response {
            tokens: s.response_tokens.clone(),
            advantage: s.advantage,
        };
        match groups.last_mut() {
            Some(g) if g.prompt_id == s.prompt_id && g.prompt_tokens == s.prompt_tokens => g.responses.push(response),
            _ => groups.push(RolloutGroup {
                prompt_id: s.prompt_id.clone(),
                prompt_tokens: s.prompt_tokens.clone(),
                responses: vec![response],
            }),
        }
    }
    groups
}

pub fn flatten_groups(groups: &[RolloutGroup]) -> Vec<RolloutSample> {
    groups
        .iter()
        .flat_map(|g| {
            g.responses.iter().map(move |r| RolloutSample {
                prompt_id: g.prompt_id.clone(),
                prompt_tokens: g.prompt_tokens.clone(),
                response_tokens: r.tokens.clone(),
                advantage: r.advantage,
            })
        })
        .collect()
}
