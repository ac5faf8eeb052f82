//! Per-conversation carry state.
//!
//! Requests for one conversation are serialized through the conversation's
//! async mutex, so they are processed in the order they acquire it. Entries
//! idle for longer than the TTL are dropped on the next access.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use ric_core::{Message, TurnCarry};
use sha2::{Digest, Sha256};
use tokio::sync::{Mutex as AsyncMutex, OwnedMutexGuard};

use crate::metrics::RatioSummary;

#[derive(Debug, Clone)]
pub struct ConversationState {
    /// Number of inbound messages already transformed.
    pub watermark: usize,
    /// Digest of those inbound messages.
    pub prefix_digest: [u8; 32],
    /// Their transformed form.
    pub transformed: Vec<Message>,
    pub carry: TurnCarry,
    /// Next interruption id; never reset, so ids stay unique per conversation.
    pub next_id: u64,
}

impl Default for ConversationState {
    fn default() -> Self {
        ConversationState {
            watermark: 0,
            prefix_digest: digest_messages(&[]),
            transformed: Vec::new(),
            carry: TurnCarry::default(),
            next_id: 1,
        }
    }
}

impl ConversationState {
    /// Number of leading `inbound` messages that were already transformed, or
    /// `None` when the history no longer extends the stored prefix.
    pub fn reusable_prefix(&self, inbound: &[Message]) -> Option<usize> {
        if inbound.len() < self.watermark {
            return None;
        }
        (digest_messages(&inbound[..self.watermark]) == self.prefix_digest).then_some(self.watermark)
    }

    /// Forgets the transformed history but keeps the id sequence.
    pub fn reset(&mut self) {
        *self = ConversationState {
            next_id: self.next_id,
            ..ConversationState::default()
        };
    }
}

pub fn digest_messages(messages: &[Message]) -> [u8; 32] {
    let mut hash = Sha256::new();
    for m in messages {
        let content = m.content();
        hash.update(format!("{:?}:{}:", m.role(), content.len()).as_bytes());
        hash.update(content.as_bytes());
    }
    hash.finalize().into()
}

struct Entry {
    state: Arc<AsyncMutex<ConversationState>>,
    last_seen: Instant,
    last_ratio: Option<f64>,
}

pub struct ConversationStore {
    ttl: Duration,
    entries: Mutex<HashMap<String, Entry>>,
}

impl ConversationStore {
    pub fn new(ttl: Duration) -> Self {
        ConversationStore {
            ttl,
            entries: Mutex::new(HashMap::new()),
        }
    }

    /// Waits for exclusive access to the conversation's state.
    pub async fn lock(&self, id: &str) -> OwnedMutexGuard<ConversationState> {
        let state = {
            let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let ttl = self.ttl;
            entries.retain(|key, e| {
                key == id || now.duration_since(e.last_seen) <= ttl || Arc::strong_count(&e.state) > 1
            });
            let entry = entries.entry(id.to_owned()).or_insert_with(|| Entry {
                state: Arc::default(),
                last_seen: now,
                last_ratio: None,
            });
            if now.duration_since(entry.last_seen) > ttl && Arc::strong_count(&entry.state) == 1 {
                entry.state = Arc::default();
                entry.last_ratio = None;
            }
            entry.last_seen = now;
            entry.state.clone()
        };
        state.lock_owned().await
    }

    pub fn record_ratio(&self, id: &str, ratio: f64) {
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(entry) = entries.get_mut(id) {
            entry.last_ratio = Some(ratio);
            entry.last_seen = Instant::now();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Summary of the latest measured ratio of each live conversation.
    pub fn ratio_summary(&self) -> RatioSummary {
        let entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        RatioSummary::from_values(entries.values().filter_map(|e| e.last_ratio))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_reuse() {
        let mut state = ConversationState::default();
        let history = vec![Message::user("a b"), Message::assistant("c")];
        assert_eq!(state.reusable_prefix(&history), Some(0));
        state.watermark = 2;
        state.prefix_digest = digest_messages(&history);
        let mut longer = history.clone();
        longer.push(Message::user("d"));
        assert_eq!(state.reusable_prefix(&longer), Some(2));
        assert_eq!(state.reusable_prefix(&history[..1]), None);
        let edited = vec![Message::user("a x"), Message::assistant("c"), Message::user("d")];
        assert_eq!(state.reusable_prefix(&edited), None);
    }

    #[test]
    fn reset_keeps_ids() {
        let mut state = ConversationState {
            next_id: 9,
            watermark: 3,
            ..ConversationState::default()
        };
        state.reset();
        assert_eq!(state.next_id, 9);
        assert_eq!(state.watermark, 0);
    }

    #[tokio::test]
    async fn same_conversation_shares_state() {
        let store = ConversationStore::new(Duration::from_secs(60));
        store.lock("a").await.next_id = 5;
        assert_eq!(store.lock("a").await.next_id, 5);
        assert_eq!(store.lock("b").await.next_id, 1);
        assert_eq!(store.len(), 2);
    }

    #[tokio::test]
    async fn expired_entries_are_dropped() {
        let store = ConversationStore::new(Duration::ZERO);
        store.lock("a").await.next_id = 5;
        std::thread::sleep(Duration::from_millis(5));
        store.lock("b").await;
        assert_eq!(store.len(), 1);
        assert_eq!(store.lock("a").await.next_id, 1);
    }

    #[tokio::test]
    async fn ratio_summary_over_conversations() {
        let store = ConversationStore::new(Duration::from_secs(60));
        drop(store.lock("a").await);
        drop(store.lock("b").await);
        store.record_ratio("a", 0.1);
        store.record_ratio("b", 0.3);
        let summary = store.ratio_summary();
        assert_eq!(summary.conversations, 2);
        assert_eq!(summary.max, 0.3);
    }
}
