// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::Serialize;

use super::{Result, TopicError, TopicLog, TopicRecord};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TopicPartition {
    pub topic: String,
    pub partition: u32,
}

/// Consumer id to owned partitions.
pub type Assignment = BTreeMap<String, Vec<TopicPartition>>;

#[derive(Default)]
struct GroupState {
    members: BTreeMap<String, Vec<String>>,
    partitions: HashMap<String, u32>,
    generation: u64,
    assignment: Assignment,
}

impl GroupState {
    fn rebalance(&mut self) {
        self.generation += 1;
        let mut out: Assignment = self.members.keys().map(|m| (m.clone(), Vec::new())).collect();
        let mut topics: Vec<&String> = self.members.values().flatten().collect();
        topics.sort();
        topics.dedup();
        for topic in topics {
            let n = self.partitions.get(topic).copied().unwrap_or(0);
            let subscribed: Vec<&String> = self
                .members
                .iter()
                .filter(|(_, ts)| ts.contains(topic))
                .map(|(m, _)| m)
                .collect();
            let m = subscribed.len() as u32;
            let (per, extra) = (n / m, n % m);
            let mut next = 0;
            for (i, member) in subscribed.into_iter().enumerate() {
                let take = per + u32::from((i as u32) < extra);
                let owned = out.get_mut(member).unwrap();
                for p in next..next + take {
                    owned.push(TopicPartition {
                        topic: topic.clone(),
                        partition: p,
                    });
                }
                next += take;
            }
        }
        self.assignment = out;
    }
}

#[derive(Default)]
pub(super) struct Coordinator {
    groups: BTreeMap<String, GroupState>,
    committed: HashMap<(String, String, u32), u64>,
}

impl Coordinator {
    pub(super) fn knows(&self, group: &str) -> bool {
        self.groups.contains_key(group) || self.committed.keys().any(|(g, _, _)| g == group)
    }

    pub(super) fn restore_commit(&mut self, group: String, topic: String, partition: u32, offset: u64) {
        self.committed.insert((group, topic, partition), offset);
    }

    pub(super) fn committed(&self, group: &str, topic: &str, partition: u32) -> Option<u64> {
        self.committed
            .get(&(group.to_string(), topic.to_string(), partition))
            .copied()
    }

    pub(super) fn join(
        &mut self,
        group: &str,
        consumer: &str,
        topics: &[String],
        counts: &HashMap<String, u32>,
    ) -> Assignment {
        let state = self.groups.entry(group.to_string()).or_default();
        state.partitions.extend(counts.iter().map(|(k, v)| (k.clone(), *v)));
        state.members.insert(consumer.to_string(), topics.to_vec());
        state.rebalance();
        state.assignment.clone()
    }

    pub(super) fn leave(&mut self, group: &str, consumer: &str) -> Option<Assignment> {
        let state = self.groups.get_mut(group)?;
        if state.members.remove(consumer).is_some() {
            state.rebalance();
        }
        Some(state.assignment.clone())
    }

    pub(super) fn assignment(&self, group: &str) -> Option<(u64, Assignment)> {
        self.groups
            .get(group)
            .map(|s| (s.generation, s.assignment.clone()))
    }
}

/// A group member that follows rebalances and tracks its read positions.
pub struct GroupConsumer {
    log: Arc<TopicLog>,
    group: String,
    id: String,
    generation: u64,
    owned: Vec<TopicPartition>,
    positions: HashMap<TopicPartition, u64>,
}

impl GroupConsumer {
    pub fn join(log: Arc<TopicLog>, group: &str, id: &str, topics: &[String]) -> Result<Self> {
        log.group_join(group, id, topics)?;
        Ok(GroupConsumer {
            log,
            group: group.to_string(),
            id: id.to_string(),
            generation: 0,
            owned: Vec::new(),
            positions: HashMap::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn owned(&self) -> &[TopicPartition] {
        &self.owned
    }

    fn refresh(&mut self) -> Result<()> {
        let (generation, assignment) = self.log.group_assignment(&self.group)?;
        if generation != self.generation {
            self.generation = generation;
            self.owned = assignment.get(&self.id).cloned().unwrap_or_default();
            self.positions.clear();
            for tp in &self.owned {
                let start = self.log.start_offset(&self.group, &tp.topic, tp.partition)?;
                self.positions.insert(tp.clone(), start);
            }
        }
        Ok(())
    }

    /// Fetches up to `max` records across owned partitions.
    pub fn poll(&mut self, max: usize) -> Result<Vec<TopicRecord>> {
        self.refresh()?;
        let mut out = Vec::new();
        for tp in &self.owned {
            if out.len() >= max {
                break;
            }
            let pos = self.positions[tp];
            let batch = match self.log.fetch(&tp.topic, tp.partition, pos, max - out.len()) {
                Ok(b) => b,
                Err(TopicError::OffsetTrimmed { head }) => {
                    self.positions.insert(tp.clone(), head);
                    self.log.fetch(&tp.topic, tp.partition, head, max - out.len())?
                }
                Err(e) => return Err(e),
            };
            if let Some(last) = batch.last() {
                self.positions.insert(tp.clone(), last.offset + 1);
            }
            out.extend(batch);
        }
        Ok(out)
    }

    /// Commits current positions. Returns false, committing nothing, when a
    /// rebalance happened since the last poll.
    pub fn commit(&mut self) -> Result<bool> {
        let (generation, _) = self.log.group_assignment(&self.group)?;
        if generation != self.generation {
            return Ok(false);
        }
        for (tp, pos) in &self.positions {
            self.log.commit_offset(&self.group, &tp.topic, tp.partition, *pos)?;
        }
        Ok(true)
    }

    pub fn leave(self) -> Result<Assignment> {
        self.log.group_leave(&self.group, &self.id)
    }
}
