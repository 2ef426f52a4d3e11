use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock};

use crate::error::{Error, Result};

use super::strategy::{
    AvgFirstLast, AvgLast, ClsLast, ConcatAvg, ConcatClsAvg, PoolingStrategy, ATTN_AVG, ATTN_CLS, ATTN_CLS_AVG,
    ATTN_CLS_AVG_CONCAT,
};

/// Pooling strategies keyed by [`PoolingStrategy::name`].
#[derive(Clone, Default)]
pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, Arc<dyn PoolingStrategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The fixed baselines and the four layer-attention variants.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(ClsLast));
        r.register(Arc::new(AvgLast));
        r.register(Arc::new(AvgFirstLast));
        r.register(Arc::new(ConcatAvg));
        r.register(Arc::new(ConcatClsAvg));
        r.register(Arc::new(ATTN_CLS));
        r.register(Arc::new(ATTN_AVG));
        r.register(Arc::new(ATTN_CLS_AVG));
        r.register(Arc::new(ATTN_CLS_AVG_CONCAT));
        r
    }

    /// Adds `strategy`, returning any previous entry with the same name.
    pub fn register(&mut self, strategy: Arc<dyn PoolingStrategy>) -> Option<Arc<dyn PoolingStrategy>> {
        self.entries.insert(strategy.name(), strategy)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn PoolingStrategy>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownStrategy(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

static BUILTIN: LazyLock<StrategyRegistry> = LazyLock::new(StrategyRegistry::builtin);

/// Looks `name` up among the built-in strategies.
pub fn strategy(name: &str) -> Result<Arc<dyn PoolingStrategy>> {
    BUILTIN.get(name)
}

pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN.names().collect()
}
