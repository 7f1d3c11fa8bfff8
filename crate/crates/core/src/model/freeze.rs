use super::{DecoderKind, ModelParams, Preformer, CONV_PREFIX, CTC_PREFIX};
use crate::error::{Error, Result};
use crate::model::decoder::{CROSS_PREFIX, OUT_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Only the heads and the cross layer(s) train.
    Warm,
    /// The encoder context network trains as well.
    Main,
}

/// What happens to a donor-initialized LM group during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmGroupPolicy {
    Frozen,
    /// Train the last `k` self layers; the rest of the group stays fixed.
    UnfreezeLast(usize),
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePolicy {
    pub lm_group: LmGroupPolicy,
    /// Whether the LM group was copied from a donor. A randomly initialized group always trains.
    pub lm_initialized: bool,
    /// Extra selectors to make trainable in both phases.
    pub unfreeze: Vec<String>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            lm_group: LmGroupPolicy::Frozen,
            lm_initialized: true,
            unfreeze: Vec::new(),
        }
    }
}

impl FreezePolicy {
    pub fn no_init() -> Self {
        Self {
            lm_initialized: false,
            ..Self::default()
        }
    }
}

/// Rewrites every freeze flag for `phase`. The convolutional frontend is frozen always.
pub fn apply_freeze_policy(params: &mut ModelParams, model: &Preformer, phase: Phase, policy: &FreezePolicy) -> Result<()> {
    for sel in &policy.unfreeze {
        if params.count(sel) == 0 && !params.contains(sel) {
            return Err(Error::invalid(format!("freeze policy names unknown path {sel:?}")));
        }
        if sel.is_empty() || super::path_matches(sel, CONV_PREFIX) || super::path_matches(CONV_PREFIX, sel) {
            return Err(Error::invalid(format!("selector {sel:?} would unfreeze the convolutional frontend")));
        }
    }
    let decoder = model.decoder();
    params.set_frozen("", true);
    let mut trainable: Vec<String> = vec![CTC_PREFIX.into(), OUT_PREFIX.into(), CROSS_PREFIX.into()];
    if let DecoderKind::Vanilla { .. } = decoder.kind() {
        trainable.push("decoder".into());
    }
    if phase == Phase::Main {
        trainable.push("encoder.context".into());
        trainable.push("encoder.ln_f".into());
    }
    let group = decoder.lm_group_selectors();
    if !policy.lm_initialized {
        trainable.extend(group);
    } else {
        match policy.lm_group {
            LmGroupPolicy::Frozen => {}
            LmGroupPolicy::All => trainable.extend(group),
            LmGroupPolicy::UnfreezeLast(k) => {
                let n = decoder.n_self();
                if k > n {
                    return Err(Error::invalid(format!("cannot unfreeze {k} of {n} self layers")));
                }
                trainable.extend((n - k..n).map(super::Decoder::self_layer_selector));
            }
        }
    }
    trainable.extend(policy.unfreeze.iter().cloned());
    for sel in &trainable {
        params.set_frozen(sel, false);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup(kind: DecoderKind) -> (Preformer, ModelParams) {
        let mut cfg = ModelConfig::toy(16);
        cfg.decoder = kind;
        let m = Preformer::new(cfg).unwrap();
        let p = m.init(3).unwrap();
        (m, p)
    }

    fn frozen_under(p: &ModelParams, sel: &str) -> Vec<bool> {
        p.iter()
            .filter(|(k, _)| crate::model::path_matches(k, sel))
            .map(|(_, v)| v.frozen)
            .collect()
    }

    #[test]
    fn warm_phase_freezes_encoder_context() {
        let (m, mut p) = setup(DecoderKind::Ocd { n_self: 2 });
        apply_freeze_policy(&mut p, &m, Phase::Warm, &FreezePolicy::default()).unwrap();
        assert!(frozen_under(&p, "encoder.context").iter().all(|&f| f));
        assert!(frozen_under(&p, "decoder.self").iter().all(|&f| f));
        assert!(frozen_under(&p, "decoder.cross").iter().all(|&f| !f));
        assert!(frozen_under(&p, "ctc").iter().all(|&f| !f));
        assert!(frozen_under(&p, "decoder.out").iter().all(|&f| !f));
    }

    #[test]
    fn main_phase_keeps_conv_frozen() {
        let (m, mut p) = setup(DecoderKind::Ocd { n_self: 2 });
        apply_freeze_policy(&mut p, &m, Phase::Main, &FreezePolicy::default()).unwrap();
        assert!(frozen_under(&p, "encoder.conv").iter().all(|&f| f));
        assert!(frozen_under(&p, "encoder.context").iter().all(|&f| !f));
        assert!(frozen_under(&p, "decoder.embed").iter().all(|&f| f));
    }

    #[test]
    fn all_policy_unfreezes_self_stack() {
        let (m, mut p) = setup(DecoderKind::Ocd { n_self: 2 });
        let pol = FreezePolicy {
            lm_group: LmGroupPolicy::All,
            ..FreezePolicy::default()
        };
        apply_freeze_policy(&mut p, &m, Phase::Warm, &pol).unwrap();
        assert!(frozen_under(&p, "decoder.self").iter().all(|&f| !f));
    }

    #[test]
    fn unfreeze_last_selects_top_layers() {
        let (m, mut p) = setup(DecoderKind::Ocd { n_self: 3 });
        let pol = FreezePolicy {
            lm_group: LmGroupPolicy::UnfreezeLast(1),
            ..FreezePolicy::default()
        };
        apply_freeze_policy(&mut p, &m, Phase::Main, &pol).unwrap();
        assert!(frozen_under(&p, "decoder.self.0").iter().all(|&f| f));
        assert!(frozen_under(&p, "decoder.self.1").iter().all(|&f| f));
        assert!(frozen_under(&p, "decoder.self.2").iter().all(|&f| !f));
        let too_many = FreezePolicy {
            lm_group: LmGroupPolicy::UnfreezeLast(4),
            ..FreezePolicy::default()
        };
        assert!(apply_freeze_policy(&mut p, &m, Phase::Main, &too_many).is_err());
    }

    #[test]
    fn unknown_or_conv_selector_rejected() {
        let (m, mut p) = setup(DecoderKind::Ocd { n_self: 2 });
        let mut pol = FreezePolicy::default();
        pol.unfreeze = vec!["decoder.bogus".into()];
        assert!(apply_freeze_policy(&mut p, &m, Phase::Warm, &pol).is_err());
        pol.unfreeze = vec!["encoder.conv.0".into()];
        assert!(apply_freeze_policy(&mut p, &m, Phase::Warm, &pol).is_err());
        pol.unfreeze = vec!["encoder".into()];
        assert!(apply_freeze_policy(&mut p, &m, Phase::Warm, &pol).is_err());
    }

    #[test]
    fn vanilla_decoder_trains_fully() {
        let (m, mut p) = setup(DecoderKind::Vanilla { n_layers: 2 });
        apply_freeze_policy(&mut p, &m, Phase::Warm, &FreezePolicy::default()).unwrap();
        assert!(frozen_under(&p, "decoder").iter().all(|&f| !f));
    }
}
