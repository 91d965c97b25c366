//! Strategy registries.
//!
//! Each interchangeable family — backbones, reinforcement stages,
//! cross-modality decoder blocks, branch-fusion strategies — registers its
//! variants here by name; configuration and the CLI select them at runtime.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::backbone::{self, Encoder};
use crate::config::ModelConfig;
use crate::crc::{self, CrossModalBlock};
use crate::error::{Error, Result};
use crate::gdr::{self, Reinforcer};
use crate::ipf::{self, FusionStrategy};
use crate::nn::ParamStore;

pub struct Registry<C: Copy> {
    kind: &'static str,
    entries: BTreeMap<&'static str, C>,
}

impl<C: Copy> Registry<C> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, ctor: C) {
        self.entries.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<C> {
        self.entries.get(name).copied().ok_or_else(|| Error::UnknownName {
            kind: self.kind,
            name: name.to_string(),
            known: self.names(),
        })
    }
}

pub type EncoderCtor = fn(&ModelConfig, &ParamStore, &str) -> Result<Box<dyn Encoder>>;
pub type ReinforcerCtor = fn(&ParamStore, usize) -> Result<Box<dyn Reinforcer>>;
pub type BlockCtor = fn(&ParamStore, usize, usize, usize) -> Result<Box<dyn CrossModalBlock>>;
pub type FusionCtor = fn(&ParamStore, usize) -> Result<Box<dyn FusionStrategy>>;

pub fn encoders() -> &'static Registry<EncoderCtor> {
    static REG: OnceLock<Registry<EncoderCtor>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r = Registry::new("backbone");
        r.register("resnet50", backbone::ctor_resnet50 as EncoderCtor);
        r.register("tiny", backbone::ctor_tiny as EncoderCtor);
        r
    })
}

pub fn reinforcers() -> &'static Registry<ReinforcerCtor> {
    static REG: OnceLock<Registry<ReinforcerCtor>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r = Registry::new("reinforcer");
        r.register("gdr", gdr::ctor_gdr as ReinforcerCtor);
        r.register("pass", gdr::ctor_pass as ReinforcerCtor);
        r
    })
}

pub fn cross_modal_blocks() -> &'static Registry<BlockCtor> {
    static REG: OnceLock<Registry<BlockCtor>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r = Registry::new("cross-modality block");
        r.register("crc", crc::ctor_crc as BlockCtor);
        r.register("baseline", crc::ctor_baseline as BlockCtor);
        r
    })
}

pub fn fusions() -> &'static Registry<FusionCtor> {
    static REG: OnceLock<Registry<FusionCtor>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r = Registry::new("fusion strategy");
        r.register("ipf", ipf::ctor_ipf as FusionCtor);
        r.register("add", ipf::ctor_add as FusionCtor);
        r.register("concat", ipf::ctor_concat as FusionCtor);
        r.register("channel-attention", ipf::ctor_channel_attention as FusionCtor);
        r
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registries_list_their_variants() {
        assert_eq!(encoders().names(), vec!["resnet50", "tiny"]);
        assert_eq!(reinforcers().names(), vec!["gdr", "pass"]);
        assert_eq!(cross_modal_blocks().names(), vec!["baseline", "crc"]);
        assert_eq!(
            fusions().names(),
            vec!["add", "channel-attention", "concat", "ipf"]
        );
    }

    #[test]
    fn unknown_names_report_the_known_set() {
        let err = fusions().get("mystery").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown fusion strategy 'mystery'"), "{msg}");
        assert!(msg.contains("ipf"), "{msg}");
    }
}
