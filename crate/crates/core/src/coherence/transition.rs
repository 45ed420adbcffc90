//! The MESI state table for a single cached copy.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoherenceState {
    Modified,
    Exclusive,
    Shared,
    Invalid,
}

impl CoherenceState {
    pub fn letter(self) -> char {
        match self {
            CoherenceState::Modified => 'M',
            CoherenceState::Exclusive => 'E',
            CoherenceState::Shared => 'S',
            CoherenceState::Invalid => 'I',
        }
    }

    /// M or E: the holder is the only private copy.
    pub fn is_owned(self) -> bool {
        matches!(self, CoherenceState::Modified | CoherenceState::Exclusive)
    }
}

impl fmt::Display for CoherenceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// An event observed by one private copy of a line.
///
/// `LocalRead` carries the directory's shared signal: a fill from Invalid
/// lands in E only when no other private cache holds the line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    LocalRead { shared: bool },
    LocalWrite,
    LocalPrefetchW,
    RemoteRead,
    RemoteWrite,
    RemotePrefetchW,
    Evict,
    Flush,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    FetchFromOwner,
    InvalidateSharers,
    UpdateLlc,
    WriteBack,
    FillS,
    FillE,
    FillM,
}

/// Successor state and protocol actions for `state` under `event`.
pub fn transition(state: CoherenceState, event: Event) -> (CoherenceState, &'static [Action]) {
    use Action::*;
    use CoherenceState::*;
    use Event::*;

    match (state, event) {
        (Modified, LocalRead { .. }) | (Modified, LocalWrite) | (Modified, LocalPrefetchW) => {
            (Modified, &[])
        }
        (Modified, RemoteRead) => (Shared, &[FetchFromOwner, UpdateLlc, FillS]),
        (Modified, RemoteWrite) | (Modified, RemotePrefetchW) => {
            (Invalid, &[FetchFromOwner, InvalidateSharers])
        }
        (Modified, Evict) => (Invalid, &[WriteBack, UpdateLlc]),
        (Modified, Flush) => (Invalid, &[WriteBack]),

        (Exclusive, LocalRead { .. }) => (Exclusive, &[]),
        (Exclusive, LocalWrite) | (Exclusive, LocalPrefetchW) => (Modified, &[]),
        (Exclusive, RemoteRead) => (Shared, &[FillS]),
        (Exclusive, RemoteWrite) | (Exclusive, RemotePrefetchW) => (Invalid, &[InvalidateSharers]),
        (Exclusive, Evict) | (Exclusive, Flush) => (Invalid, &[]),

        (Shared, LocalRead { .. }) => (Shared, &[]),
        (Shared, LocalWrite) | (Shared, LocalPrefetchW) => (Modified, &[InvalidateSharers]),
        (Shared, RemoteRead) => (Shared, &[FillS]),
        (Shared, RemoteWrite) | (Shared, RemotePrefetchW) => (Invalid, &[InvalidateSharers]),
        (Shared, Evict) | (Shared, Flush) => (Invalid, &[]),

        (Invalid, LocalRead { shared: false }) => (Exclusive, &[FillE]),
        (Invalid, LocalRead { shared: true }) => (Shared, &[FillS]),
        (Invalid, LocalWrite) | (Invalid, LocalPrefetchW) => {
            (Modified, &[InvalidateSharers, FillM])
        }
        (Invalid, RemoteRead)
        | (Invalid, RemoteWrite)
        | (Invalid, RemotePrefetchW)
        | (Invalid, Evict)
        | (Invalid, Flush) => (Invalid, &[]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Action::*;
    use CoherenceState::*;

    const ALL_STATES: [CoherenceState; 4] = [Modified, Exclusive, Shared, Invalid];
    const ALL_EVENTS: [Event; 9] = [
        Event::LocalRead { shared: false },
        Event::LocalRead { shared: true },
        Event::LocalWrite,
        Event::LocalPrefetchW,
        Event::RemoteRead,
        Event::RemoteWrite,
        Event::RemotePrefetchW,
        Event::Evict,
        Event::Flush,
    ];

    #[test]
    fn modified_remote_read_demotes_to_shared() {
        let (next, actions) = transition(Modified, Event::RemoteRead);
        assert_eq!(next, Shared);
        assert_eq!(actions, [FetchFromOwner, UpdateLlc, FillS]);
    }

    #[test]
    fn shared_remote_write_invalidates() {
        let (next, actions) = transition(Shared, Event::RemoteWrite);
        assert_eq!(next, Invalid);
        assert_eq!(actions, [InvalidateSharers]);
    }

    #[test]
    fn invalid_evict_is_noop() {
        assert_eq!(transition(Invalid, Event::Evict), (Invalid, &[][..]));
    }

    #[test]
    fn exclusive_write_is_silent_upgrade() {
        assert_eq!(
            transition(Exclusive, Event::LocalWrite),
            (Modified, &[][..])
        );
    }

    #[test]
    fn write_intent_always_ends_modified() {
        for s in ALL_STATES {
            assert_eq!(transition(s, Event::LocalWrite).0, Modified);
            assert_eq!(transition(s, Event::LocalPrefetchW).0, Modified);
        }
    }

    #[test]
    fn remote_write_intent_always_ends_invalid() {
        for s in ALL_STATES {
            assert_eq!(transition(s, Event::RemoteWrite).0, Invalid);
            assert_eq!(transition(s, Event::RemotePrefetchW).0, Invalid);
            assert_eq!(transition(s, Event::Flush).0, Invalid);
        }
    }

    #[test]
    fn total_and_deterministic() {
        for s in ALL_STATES {
            for e in ALL_EVENTS {
                assert_eq!(transition(s, e), transition(s, e));
            }
        }
    }
}
