//! Read access to extracted features.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::features::{cache, FeatureKind, FeatureMatrix};

pub trait FeatureStore: Send + Sync {
    fn get(&self, track_id: &str, kind: FeatureKind) -> Result<Arc<FeatureMatrix>>;
}

/// The on-disk feature cache, memoised after first read.
pub struct CacheStore {
    dir: PathBuf,
    memo: Mutex<HashMap<(String, FeatureKind), Arc<FeatureMatrix>>>,
}

impl CacheStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            memo: Mutex::new(HashMap::new()),
        }
    }
}

impl FeatureStore for CacheStore {
    fn get(&self, track_id: &str, kind: FeatureKind) -> Result<Arc<FeatureMatrix>> {
        let key = (track_id.to_owned(), kind);
        if let Some(m) = self.memo.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let m = Arc::new(cache::read_cache(track_id, kind, &self.dir)?);
        self.memo.lock().unwrap().insert(key, m.clone());
        Ok(m)
    }
}

#[derive(Default)]
pub struct MemoryStore {
    map: HashMap<(String, FeatureKind), Arc<FeatureMatrix>>,
}

impl MemoryStore {
    pub fn insert(&mut self, m: FeatureMatrix) {
        self.map.insert((m.track_id.clone(), m.kind), Arc::new(m));
    }
}

impl FeatureStore for MemoryStore {
    fn get(&self, track_id: &str, kind: FeatureKind) -> Result<Arc<FeatureMatrix>> {
        self.map
            .get(&(track_id.to_owned(), kind))
            .cloned()
            .ok_or_else(|| Error::CacheMiss {
                track_id: track_id.to_owned(),
                kind: kind.as_str().to_owned(),
            })
    }
}
