use crate::error::{Error, Result};

/// Upper bound on chunk length accepted anywhere in the crate.
pub const K_MAX: usize = 1024;

/// A horizon-K sequence of action vectors from one policy query.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    actions: Vec<Vec<f64>>,
    produced_at_tick: u64,
}

impl ActionChunk {
    pub fn new(actions: Vec<Vec<f64>>, produced_at_tick: u64) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::Empty("action chunk"));
        }
        if actions.len() > K_MAX {
            return Err(Error::Config(format!(
                "chunk length {} exceeds {K_MAX}",
                actions.len()
            )));
        }
        if actions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteAction);
        }
        Ok(Self {
            actions,
            produced_at_tick,
        })
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn into_actions(self) -> Vec<Vec<f64>> {
        self.actions
    }

    pub fn produced_at_tick(&self) -> u64 {
        self.produced_at_tick
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}
