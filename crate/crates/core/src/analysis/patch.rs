//! Residual patching: overwrite a recipient's residuals at one layer with a
//! donor's and check that everything downstream follows the donor.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{byte_tokens, Model};
use crate::numerics::{argmax, kl_divergence, softmax};

/// Byte used to right-pad the shorter prompt.
pub const PAD_BYTE: u8 = 0x20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatchSpec {
    pub donor: Vec<u8>,
    pub recipient: Vec<u8>,
    /// `0..=L`; `L` patches the input to the final norm.
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchOutcome {
    pub layer: usize,
    /// `KL(patched ‖ donor)` at the final position of the prompt.
    pub kl: f64,
    /// The same divergence at each continuation step.
    pub step_kl: Vec<f64>,
    pub donor_continuation: Vec<u32>,
    pub patched_continuation: Vec<u32>,
}

impl PatchOutcome {
    pub fn continuation_matches(&self) -> bool {
        self.donor_continuation == self.patched_continuation
    }

    pub fn max_kl(&self) -> f64 {
        self.step_kl.iter().copied().fold(self.kl, f64::max)
    }
}

/// Pads the shorter prompt with [`PAD_BYTE`] so both have the same length.
pub fn pad_prompts(donor: &[u8], recipient: &[u8]) -> Result<(Vec<u32>, Vec<u32>)> {
    if donor.is_empty() || recipient.is_empty() {
        return Err(Error::Empty("patch prompt"));
    }
    let n = donor.len().max(recipient.len());
    let pad = |p: &[u8]| {
        let mut v = byte_tokens(p);
        v.resize(n, PAD_BYTE as u32);
        v
    };
    let (d, r) = (pad(donor), pad(recipient));
    if d.len() != r.len() {
        return Err(Error::Shape("prompt lengths differ after padding".into()));
    }
    Ok((d, r))
}

/// Patches at `spec.layer`, reports the divergence at the last prompt
/// position and greedily continues for `n_continue` tokens.
///
/// Each continuation step re-runs both sequences, overwrites the whole
/// recipient prefix at the patch layer with the donor's residuals, and
/// finishes the forward pass from there.
pub fn patch_and_continue(
    model: &Model,
    spec: &PatchSpec,
    n_continue: usize,
) -> Result<PatchOutcome> {
    let n_layers = model.config().n_layers;
    if spec.layer > n_layers {
        return Err(Error::Param(format!(
            "patch layer {} outside 0..={n_layers}",
            spec.layer
        )));
    }
    let (mut donor, mut recipient) = pad_prompts(&spec.donor, &spec.recipient)?;

    let mut kl = None;
    let mut step_kl = Vec::with_capacity(n_continue);
    let mut donor_continuation = Vec::with_capacity(n_continue);
    let mut patched_continuation = Vec::with_capacity(n_continue);
    for step in 0..=n_continue {
        let donor_run = model.forward_batch(&donor, true)?;
        let donor_trace = donor_run.trace.as_ref().expect("captured");
        let recipient_run = model.forward_batch(&recipient, true)?;
        let recipient_h = &recipient_run.trace.as_ref().expect("captured").layers[spec.layer];
        let donor_h = &donor_trace.layers[spec.layer];
        if recipient_h.rows() != donor_h.rows() || recipient_h.cols() != donor_h.cols() {
            return Err(Error::Shape(
                "donor and recipient residuals differ in shape".into(),
            ));
        }
        let patched = model.forward_from_layer(spec.layer, donor_h)?;
        let last = |m: &crate::numerics::Matrix| m.row(m.rows() - 1).to_vec();
        let (p_logits, d_logits) = (last(&patched), donor_run.last_logits().to_vec());
        let div = kl_divergence(&softmax(&p_logits)?, &softmax(&d_logits)?)?;
        if step == 0 {
            kl = Some(div);
        } else {
            step_kl.push(div);
        }
        if step == n_continue {
            break;
        }
        let (d_next, p_next) = (argmax(&d_logits) as u32, argmax(&p_logits) as u32);
        donor_continuation.push(d_next);
        patched_continuation.push(p_next);
        donor.push(d_next);
        recipient.push(p_next);
    }
    Ok(PatchOutcome {
        layer: spec.layer,
        kl: kl.expect("step 0 runs"),
        step_kl,
        donor_continuation,
        patched_continuation,
    })
}

/// [`patch_and_continue`] at every layer `0..=L`.
pub fn patch_all_layers(
    model: &Model,
    donor: &[u8],
    recipient: &[u8],
    n_continue: usize,
) -> Result<Vec<PatchOutcome>> {
    (0..=model.config().n_layers)
        .map(|layer| {
            let spec = PatchSpec {
                donor: donor.to_vec(),
                recipient: recipient.to_vec(),
                layer,
            };
            patch_and_continue(model, &spec, n_continue)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn padding_equalizes_lengths() {
        let (d, r) = pad_prompts(b"abc", b"a").unwrap();
        assert_eq!(d, vec![97, 98, 99]);
        assert_eq!(r, vec![97, 32, 32]);
        assert!(pad_prompts(b"", b"x").is_err());
    }

    #[test]
    fn self_patch_is_trivial() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let spec = PatchSpec {
            donor: b"same".to_vec(),
            recipient: b"same".to_vec(),
            layer: 2,
        };
        let out = patch_and_continue(&m, &spec, 3).unwrap();
        assert_eq!(out.kl, 0.0);
        assert!(out.continuation_matches());
    }

    #[test]
    fn distinct_prompts_follow_donor_at_every_layer() {
        let m = Model::from_config(ModelConfig::toy_mixed()).unwrap();
        let outs = patch_all_layers(&m, b"the donor prompt", b"a different recipient", 4).unwrap();
        assert_eq!(outs.len(), m.config().n_layers + 1);
        for o in &outs {
            assert_eq!(o.max_kl(), 0.0, "layer {}", o.layer);
            assert!(o.continuation_matches());
        }
    }

    #[test]
    fn layer_out_of_range_rejected() {
        let m = Model::from_config(ModelConfig::toy()).unwrap();
        let spec = PatchSpec {
            donor: b"a".to_vec(),
            recipient: b"b".to_vec(),
            layer: 5,
        };
        assert!(patch_and_continue(&m, &spec, 1).is_err());
    }
}
