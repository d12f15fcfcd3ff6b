//! Aho-Corasick automaton over token ids, reporting every (overlapping)
//! occurrence of every pattern.

use std::collections::{HashMap, VecDeque};

use crate::corpus::TokenId;

type StateId = u32;

const ROOT: StateId = 0;

#[derive(Debug, Default)]
struct State {
    goto: HashMap<TokenId, StateId>,
    fail: StateId,
    /// Pattern ending exactly at this state.
    pattern: Option<usize>,
    /// Nearest proper suffix state that ends a pattern.
    output: Option<StateId>,
    depth: usize,
}

#[derive(Debug)]
pub struct TokenMatcher {
    states: Vec<State>,
    pattern_count: usize,
}

impl TokenMatcher {
    /// Builds the automaton. Empty patterns never match. Identical patterns
    /// share one trie node; the returned vector maps each input index to the
    /// id reported for it (the first index with that content).
    pub fn new<P: AsRef<[TokenId]>>(patterns: &[P]) -> (Self, Vec<usize>) {
        let mut states = vec![State::default()];
        let mut canonical = Vec::with_capacity(patterns.len());
        for (id, pattern) in patterns.iter().enumerate() {
            let pattern = pattern.as_ref();
            if pattern.is_empty() {
                canonical.push(id);
                continue;
            }
            let mut s = ROOT;
            for &tok in pattern {
                s = match states[s as usize].goto.get(&tok) {
                    Some(&next) => next,
                    None => {
                        let next = states.len() as StateId;
                        let depth = states[s as usize].depth + 1;
                        states.push(State {
                            depth,
                            ..State::default()
                        });
                        states[s as usize].goto.insert(tok, next);
                        next
                    }
                };
            }
            let slot = &mut states[s as usize].pattern;
            canonical.push(*slot.get_or_insert(id));
        }

        // Breadth-first failure links.
        let mut queue: VecDeque<StateId> = VecDeque::new();
        let root_children: Vec<StateId> = states[ROOT as usize].goto.values().copied().collect();
        for child in root_children {
            states[child as usize].fail = ROOT;
            queue.push_back(child);
        }
        while let Some(s) = queue.pop_front() {
            let edges: Vec<(TokenId, StateId)> =
                states[s as usize].goto.iter().map(|(&t, &n)| (t, n)).collect();
            for (tok, next) in edges {
                let mut f = states[s as usize].fail;
                let fail = loop {
                    if let Some(&n) = states[f as usize].goto.get(&tok) {
                        break n;
                    }
                    if f == ROOT {
                        break ROOT;
                    }
                    f = states[f as usize].fail;
                };
                states[next as usize].fail = fail;
                states[next as usize].output = if states[fail as usize].pattern.is_some() {
                    Some(fail)
                } else {
                    states[fail as usize].output
                };
                queue.push_back(next);
            }
        }

        (
            Self {
                states,
                pattern_count: patterns.len(),
            },
            canonical,
        )
    }

    pub fn pattern_count(&self) -> usize {
        self.pattern_count
    }

    fn step(&self, mut s: StateId, tok: TokenId) -> StateId {
        loop {
            if let Some(&n) = self.states[s as usize].goto.get(&tok) {
                return n;
            }
            if s == ROOT {
                return ROOT;
            }
            s = self.states[s as usize].fail;
        }
    }

    /// Calls `on_match(pattern_id, end)` for every occurrence in `haystack`,
    /// where `end` is one past the last matched position. Only canonical
    /// pattern ids are reported.
    pub fn for_each_match(&self, haystack: &[TokenId], mut on_match: impl FnMut(usize, usize)) {
        let mut s = ROOT;
        for (i, &tok) in haystack.iter().enumerate() {
            s = self.step(s, tok);
            let mut out = if self.states[s as usize].pattern.is_some() {
                Some(s)
            } else {
                self.states[s as usize].output
            };
            while let Some(o) = out {
                let state = &self.states[o as usize];
                debug_assert!(state.depth <= i + 1);
                if let Some(p) = state.pattern {
                    on_match(p, i + 1);
                }
                out = state.output;
            }
        }
    }
}
