use std::fmt;

use serde::{Deserialize, Serialize};

/// Main address of a simulated node. Interfaces are not modeled separately,
/// so this doubles as the interface address.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

/// Simulation time in seconds.
pub type Time = f64;

/// Protocol timers are kept on a 1 µs grid.
pub const TIME_QUANTUM: f64 = 1e-6;

pub fn quantize(t: Time) -> Time {
    (t / TIME_QUANTUM).round() * TIME_QUANTUM
}

/// Integer microsecond tick of a time value, used for event ordering.
pub fn to_ticks(t: Time) -> i64 {
    (t / TIME_QUANTUM).round() as i64
}

/// Whether a timer set for `t` has expired at `now`, on the tick grid.
pub fn due(t: Time, now: Time) -> bool {
    to_ticks(t) <= to_ticks(now)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_snaps_to_microseconds() {
        assert_eq!(to_ticks(quantize(1.000_000_4)), 1_000_000);
        assert_eq!(to_ticks(quantize(1.000_000_6)), 1_000_001);
    }
}
