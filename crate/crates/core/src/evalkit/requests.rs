//! Evaluation prompts: a token-aligned prefix of a held-out utterance serves
//! as the speaker prompt, and the full text is the condition.

use crate::error::{LabError, Result};
use crate::sampling::SampleRequest;
use crate::synthtask::{estimate_length, Example, SyntheticTask};

/// Builds the continuation request for `ex`: the first
/// `max(1, round(n * prompt_fraction))` tokens (at most `n - 1`) are the prompt.
pub fn continuation_request(
    task: &SyntheticTask,
    ex: &Example,
    prompt_fraction: f64,
    seed: u64,
) -> Result<SampleRequest> {
    let n = ex.tokens.len();
    if n < 2 {
        return Err(LabError::invalid("continuation needs at least two tokens"));
    }
    let p_tok = ((n as f64 * prompt_fraction).round() as usize).clamp(1, n - 1);
    let rate = task.speaker(ex.speaker)?.rate;
    let p_frames = p_tok * rate;
    let prompt = ex.latent.slice_frames(0, p_frames)?;
    let rest = estimate_length(&ex.tokens[p_tok..], p_tok, p_frames)?;
    Ok(SampleRequest { tokens: ex.tokens.clone(), prompt: Some(prompt), total_frames: p_frames + rest, seed })
}
