// SPDX-License-Identifier: Apache-2.0

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;

pub const BUCKET_MS: i64 = 5_000;
pub const BUCKETS: usize = 60;
pub const WINDOW_MS: i64 = BUCKET_MS * BUCKETS as i64;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub flowfiles_in: u64,
    pub flowfiles_out: u64,
    pub errors: u64,
}

impl AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        self.bytes_read += o.bytes_read;
        self.bytes_written += o.bytes_written;
        self.bytes_in += o.bytes_in;
        self.bytes_out += o.bytes_out;
        self.flowfiles_in += o.flowfiles_in;
        self.flowfiles_out += o.flowfiles_out;
        self.errors += o.errors;
    }
}

/// Rolling five-minute totals in 5 s buckets. A sample lands in the bucket
/// `floor(t / 5000)`; a read at `now` sums the current bucket and the 59
/// before it.
#[derive(Debug, Clone)]
pub struct StatusWindow {
    buckets: [(i64, Counters); BUCKETS],
}

impl Default for StatusWindow {
    fn default() -> Self {
        StatusWindow {
            buckets: [(i64::MIN, Counters::default()); BUCKETS],
        }
    }
}

fn bucket_of(t: Timestamp) -> i64 {
    t.div_euclid(BUCKET_MS)
}

impl StatusWindow {
    pub fn record(&mut self, now: Timestamp, c: Counters) {
        let b = bucket_of(now);
        let slot = &mut self.buckets[b.rem_euclid(BUCKETS as i64) as usize];
        if slot.0 != b {
            *slot = (b, Counters::default());
        }
        slot.1 += c;
    }

    pub fn totals(&self, now: Timestamp) -> Counters {
        let current = bucket_of(now);
        let mut out = Counters::default();
        for (b, c) in &self.buckets {
            if *b <= current && *b > current - BUCKETS as i64 {
                out += *c;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(n: u64) -> Counters {
        Counters {
            flowfiles_in: n,
            ..Default::default()
        }
    }

    #[test]
    fn window_is_five_minutes_of_five_second_buckets() {
        assert_eq!(WINDOW_MS, 300_000);
        let mut w = StatusWindow::default();
        w.record(0, one(1));
        w.record(4_999, one(2));
        w.record(5_000, one(4));
        assert_eq!(w.totals(5_000).flowfiles_in, 7);
        // bucket 0 covers [0, 5000) and leaves the window once bucket 60 begins
        assert_eq!(w.totals(299_999).flowfiles_in, 7);
        assert_eq!(w.totals(300_000).flowfiles_in, 4);
        assert_eq!(w.totals(305_000).flowfiles_in, 0);
    }

    #[test]
    fn six_minute_old_counter_excluded() {
        let mut w = StatusWindow::default();
        w.record(1_000, one(9));
        w.record(361_000, one(1));
        assert_eq!(w.totals(361_000).flowfiles_in, 1);
    }

    #[test]
    fn idle_is_zero() {
        assert_eq!(StatusWindow::default().totals(12_345), Counters::default());
    }
}
