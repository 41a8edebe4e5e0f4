//! In-process insight bus with per-topic sequence numbers.
//!
//! Topics are `/`-separated segments of `[A-Za-z0-9_.-]`. A subscription pattern is either a
//! literal topic or a prefix ending in `/*` (or `*` alone), matching every topic below that
//! prefix. Subscribers only see messages published after they subscribe.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Insight;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("malformed topic {0:?}")]
    MalformedTopic(String),
    #[error("malformed topic pattern {0:?}")]
    MalformedPattern(String),
    #[error("unknown subscription {0}")]
    UnknownSubscription(u64),
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

pub fn validate_topic(topic: &str) -> Result<(), BusError> {
    if topic.split('/').all(valid_segment) {
        Ok(())
    } else {
        Err(BusError::MalformedTopic(topic.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TopicPattern {
    Exact(String),
    /// Matches topics that start with the stored prefix (which ends in `/`, or is empty).
    Prefix(String),
}

impl TopicPattern {
    pub fn parse(pattern: &str) -> Result<Self, BusError> {
        let bad = || BusError::MalformedPattern(pattern.to_string());
        if pattern == "*" {
            return Ok(TopicPattern::Prefix(String::new()));
        }
        if let Some(prefix) = pattern.strip_suffix("/*") {
            validate_topic(prefix).map_err(|_| bad())?;
            return Ok(TopicPattern::Prefix(format!("{prefix}/")));
        }
        validate_topic(pattern).map_err(|_| bad())?;
        Ok(TopicPattern::Exact(pattern.to_string()))
    }

    pub fn matches(&self, topic: &str) -> bool {
        match self {
            TopicPattern::Exact(t) => t == topic,
            TopicPattern::Prefix(p) => topic.starts_with(p.as_str()) && topic.len() > p.len(),
        }
    }
}

impl fmt::Display for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopicPattern::Exact(t) => f.write_str(t),
            TopicPattern::Prefix(p) => write!(f, "{p}*"),
        }
    }
}

impl TryFrom<String> for TopicPattern {
    type Error = BusError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<TopicPattern> for String {
    fn from(p: TopicPattern) -> Self {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubscriptionId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub topic: String,
    pub sequence: u64,
    pub insight: Insight,
}

#[derive(Debug, Default)]
pub struct InsightBus {
    sequences: BTreeMap<String, u64>,
    subscriptions: BTreeMap<SubscriptionId, (TopicPattern, VecDeque<Delivery>)>,
    next_subscription: u64,
}

impl InsightBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, pattern: &str) -> Result<SubscriptionId, BusError> {
        let pattern = TopicPattern::parse(pattern)?;
        self.next_subscription += 1;
        let id = SubscriptionId(self.next_subscription);
        self.subscriptions.insert(id, (pattern, VecDeque::new()));
        Ok(id)
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) -> Result<(), BusError> {
        self.subscriptions.remove(&id).map(|_| ()).ok_or(BusError::UnknownSubscription(id.0))
    }

    /// Assigns the next sequence number on `topic` (starting at 1) and fans out to every
    /// matching subscription.
    pub fn publish(&mut self, topic: &str, insight: &Insight) -> Result<u64, BusError> {
        validate_topic(topic)?;
        let seq = self.sequences.entry(topic.to_string()).or_insert(0);
        *seq += 1;
        let sequence = *seq;
        for (pattern, queue) in self.subscriptions.values_mut() {
            if pattern.matches(topic) {
                queue.push_back(Delivery { topic: topic.to_string(), sequence, insight: insight.clone() });
            }
        }
        Ok(sequence)
    }

    /// Removes and returns every pending delivery of a subscription, oldest first.
    pub fn drain(&mut self, id: SubscriptionId) -> Result<Vec<Delivery>, BusError> {
        let (_, queue) = self.subscriptions.get_mut(&id).ok_or(BusError::UnknownSubscription(id.0))?;
        Ok(queue.drain(..).collect())
    }

    pub fn last_sequence(&self, topic: &str) -> u64 {
        self.sequences.get(topic).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_grammar() {
        assert!(TopicPattern::parse("anomaly/*").is_ok());
        assert!(TopicPattern::parse("sla/report").is_ok());
        assert!(TopicPattern::parse("*").is_ok());
        assert!(TopicPattern::parse("anomaly*").is_err());
        assert!(TopicPattern::parse("a/*/b").is_err());
        assert!(TopicPattern::parse("a//b").is_err());
        assert!(TopicPattern::parse("").is_err());
    }

    #[test]
    fn matching_rules() {
        let p = TopicPattern::parse("anomaly/*").unwrap();
        assert!(p.matches("anomaly/cell7"));
        assert!(p.matches("anomaly/cell7/x"));
        assert!(!p.matches("anomaly"));
        assert!(!p.matches("anomalyX/cell7"));
        let exact = TopicPattern::parse("sla/report").unwrap();
        assert!(exact.matches("sla/report"));
        assert!(!exact.matches("sla/reportX"));
        assert!(TopicPattern::parse("*").unwrap().matches("x"));
    }
}
