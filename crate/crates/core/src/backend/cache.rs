//! Run-scoped entailment cache keyed on exact (premise, hypothesis).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{BackendError, Entailer, EntailmentJudgment};

type Slot = Arc<Mutex<Option<EntailmentJudgment>>>;

/// Memoizes judgments so each ordered pair costs at most one service call,
/// even when the same pair is requested concurrently. Failed calls are not
/// cached.
pub struct CachedEntailer<E> {
    inner: E,
    slots: Mutex<HashMap<(String, String), Slot>>,
}

impl<E> CachedEntailer<E> {
    pub fn new(inner: E) -> Self {
        CachedEntailer { inner, slots: Mutex::new(HashMap::new()) }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("cache lock").values().filter(|s| s.lock().map(|v| v.is_some()).unwrap_or(false)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<E: Entailer> Entailer for CachedEntailer<E> {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, BackendError> {
        let slot = {
            let mut slots = self.slots.lock().expect("cache lock");
            slots.entry((premise.to_string(), hypothesis.to_string())).or_default().clone()
        };
        let mut value = slot.lock().expect("cache slot lock");
        if let Some(j) = *value {
            return Ok(j);
        }
        let j = self.inner.entails(premise, hypothesis)?;
        *value = Some(j);
        Ok(j)
    }
}
