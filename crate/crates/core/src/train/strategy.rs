//! Which parameters a fine-tuning run may update.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{CellKind, LoraTarget, ReadInit};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::params::Owner;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Full,
    Bias,
    Partial,
    Proj,
    Lora,
    Prompt,
    Adapter,
    Read,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::Full,
        StrategyKind::Bias,
        StrategyKind::Partial,
        StrategyKind::Proj,
        StrategyKind::Lora,
        StrategyKind::Prompt,
        StrategyKind::Adapter,
        StrategyKind::Read,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Full => "full",
            StrategyKind::Bias => "bias",
            StrategyKind::Partial => "partial",
            StrategyKind::Proj => "proj",
            StrategyKind::Lora => "lora",
            StrategyKind::Prompt => "prompt",
            StrategyKind::Adapter => "adapter",
            StrategyKind::Read => "read",
        }
    }

    /// Strategies that add modules to the backbone.
    pub fn inserts_modules(self) -> bool {
        matches!(
            self,
            StrategyKind::Lora | StrategyKind::Prompt | StrategyKind::Adapter | StrategyKind::Read
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneStrategy {
    pub kind: StrategyKind,
    /// Bottleneck width for `adapter` and `read`.
    pub k: usize,
    pub rank: usize,
    pub prompt_len: usize,
    pub cell: CellKind,
    pub read_init: ReadInit,
    pub lora_targets: Vec<LoraTarget>,
}

impl Default for FinetuneStrategy {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Read,
            k: 4,
            rank: 4,
            prompt_len: 8,
            cell: CellKind::Rnn,
            read_init: ReadInit::IdentityInput,
            lora_targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

impl FinetuneStrategy {
    pub fn of(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Inserts and initializes whatever modules the strategy trains.
    pub fn prepare(&self, model: &mut Backbone, seed: u64) -> Result<()> {
        match self.kind {
            StrategyKind::Read => model.attach_read(self.k, self.cell, self.read_init, seed),
            StrategyKind::Adapter => model.attach_adapter(self.k, seed),
            StrategyKind::Lora => model.attach_lora(self.rank, &self.lora_targets, seed),
            StrategyKind::Prompt => model.attach_prompt(self.prompt_len, seed),
            _ => Ok(()),
        }
    }
}

/// Per-parameter trainability for `strategy` on `model`.
pub fn select_trainable(model: &Backbone, strategy: &FinetuneStrategy) -> Result<Vec<bool>> {
    let store = &model.store;
    let mut mask = vec![false; store.len()];
    let mut set = |ids: Vec<crate::params::ParamId>| {
        for id in ids {
            mask[id.index()] = true;
        }
    };
    let attached = model.attachment.kind_name();
    let needs = |name: &str| -> Result<()> {
        if attached == name {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "strategy {name} needs its modules inserted, backbone carries {attached}"
            )))
        }
    };
    match strategy.kind {
        StrategyKind::Full => set(store.ids().collect()),
        StrategyKind::Bias => set(
            store
                .iter()
                .filter(|(_, p)| p.owner == Owner::Backbone && p.role.is_bias())
                .map(|(id, _)| id)
                .collect(),
        ),
        StrategyKind::Partial => set(model.blocks.last().expect("at least one block").param_ids()),
        StrategyKind::Proj => set(model.head_ids()),
        StrategyKind::Lora => {
            needs("lora")?;
            set(model.attachment.param_ids())
        }
        StrategyKind::Prompt => {
            needs("prompt")?;
            set(model.attachment.param_ids())
        }
        StrategyKind::Adapter => {
            needs("adapter")?;
            set(model.attachment.param_ids())
        }
        StrategyKind::Read => {
            needs("read")?;
            set(model.attachment.param_ids())
        }
    }
    Ok(mask)
}

/// Scalar count of parameters selected by `mask`.
pub fn masked_numel(model: &Backbone, mask: &[bool]) -> usize {
    model
        .store
        .iter()
        .filter(|(id, _)| mask[id.index()])
        .map(|(_, p)| p.value.numel())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    fn prepared(kind: StrategyKind) -> (Backbone, Vec<bool>) {
        let mut model = Backbone::new(ModelConfig::default(), 0).unwrap();
        model.freeze_backbone();
        let s = FinetuneStrategy::of(kind);
        s.prepare(&mut model, 1).unwrap();
        let mask = select_trainable(&model, &s).unwrap();
        (model, mask)
    }

    #[test]
    fn full_covers_everything() {
        let (model, mask) = prepared(StrategyKind::Full);
        assert!(mask.iter().all(|&m| m));
        assert_eq!(masked_numel(&model, &mask), model.total_params());
    }

    #[test]
    fn read_covers_only_adapters() {
        let (model, mask) = prepared(StrategyKind::Read);
        for (id, p) in model.store.iter() {
            assert_eq!(mask[id.index()], p.owner == Owner::Strategy, "{}", p.name);
        }
        let frac = masked_numel(&model, &mask) as f64 / model.total_params() as f64;
        assert!(frac < 0.015, "{frac}");
    }

    #[test]
    fn bias_masks_one_dimensional_offsets() {
        let (model, mask) = prepared(StrategyKind::Bias);
        assert!(mask.iter().any(|&m| m));
        for (_, p) in model.store.iter().filter(|(id, _)| mask[id.index()]) {
            assert_eq!(p.value.shape().len(), 1, "{}", p.name);
            assert!(p.role.is_bias());
            assert_eq!(p.owner, Owner::Backbone);
        }
    }

    #[test]
    fn bias_and_read_masks_are_disjoint() {
        let (model, read) = prepared(StrategyKind::Read);
        let bias = select_trainable(&model, &FinetuneStrategy::of(StrategyKind::Bias)).unwrap();
        assert!(read.iter().zip(&bias).all(|(a, b)| !(a & b)));
    }

    #[test]
    fn partial_and_proj_scopes() {
        let (model, mask) = prepared(StrategyKind::Partial);
        for (id, p) in model.store.iter() {
            assert_eq!(mask[id.index()], p.name.starts_with("block3."), "{}", p.name);
        }
        let (model, mask) = prepared(StrategyKind::Proj);
        for (id, p) in model.store.iter() {
            assert_eq!(mask[id.index()], p.name.starts_with("head."), "{}", p.name);
        }
    }

    #[test]
    fn missing_modules_are_rejected() {
        let model = Backbone::new(ModelConfig::default(), 0).unwrap();
        for kind in [StrategyKind::Read, StrategyKind::Lora, StrategyKind::Prompt, StrategyKind::Adapter] {
            assert!(matches!(
                select_trainable(&model, &FinetuneStrategy::of(kind)),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn adapter_and_lora_exceed_read() {
        let (m, read) = prepared(StrategyKind::Read);
        let read_n = masked_numel(&m, &read);
        let (m, mask) = prepared(StrategyKind::Adapter);
        assert!(masked_numel(&m, &mask) > read_n);
        let (m, mask) = prepared(StrategyKind::Lora);
        assert!(masked_numel(&m, &mask) > read_n);
    }
}
