use rand::seq::index;
use rand::Rng;

use crate::env::Episode;
use crate::error::{Error, Result};

/// Ring buffer of whole episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: Vec<Episode>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            episodes: Vec::new(),
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores a finished episode, evicting the oldest one when full.
    pub fn push(&mut self, episode: Episode) -> Result<()> {
        episode.check()?;
        if !episode.terminated() {
            return Err(Error::contract("only finished episodes can be stored"));
        }
        if self.episodes.len() < self.capacity {
            self.episodes.push(episode);
        } else {
            self.episodes[self.next] = episode;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    pub fn can_sample(&self, batch: usize) -> bool {
        batch > 0 && self.episodes.len() >= batch
    }

    /// `batch` distinct episodes drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Episode>> {
        if !self.can_sample(batch) {
            return Err(Error::contract(format!(
                "cannot sample {batch} episodes from a buffer of {}",
                self.episodes.len()
            )));
        }
        Ok(index::sample(rng, self.episodes.len(), batch)
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect())
    }
}
