use serde::{Deserialize, Serialize};

use crate::ApiError;

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 500;

/// `?cursor=&limit=`. The cursor is opaque to clients; it is the offset of
/// the next item. Both stay strings here because query structs that embed
/// this one with `serde(flatten)` cannot deserialize numbers.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct PageQuery {
    pub cursor: Option<String>,
    pub limit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub next_cursor: Option<String>,
    pub total: usize,
}

impl PageQuery {
    /// Limits above the cap are clamped to it.
    pub fn apply<T>(&self, mut items: Vec<T>) -> Result<Page<T>, ApiError> {
        let limit = match &self.limit {
            None => DEFAULT_LIMIT,
            Some(l) => l.parse::<usize>().map_err(|_| ApiError::invalid(format!("bad limit {l:?}")))?,
        };
        if limit == 0 {
            return Err(ApiError::invalid("limit must be at least 1"));
        }
        let limit = limit.min(MAX_LIMIT);
        let start = match &self.cursor {
            None => 0,
            Some(c) => c.parse::<usize>().map_err(|_| ApiError::invalid(format!("bad cursor {c:?}")))?,
        };
        let total = items.len();
        if start > total {
            return Err(ApiError::invalid(format!("cursor {start} is past the end")));
        }
        let end = (start + limit).min(total);
        items.truncate(end);
        let items = items.split_off(start);
        Ok(Page { items, next_cursor: (end < total).then(|| end.to_string()), total })
    }
}
