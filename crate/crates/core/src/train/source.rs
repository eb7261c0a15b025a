use std::ops::Range;

use crate::data::{DataError, SubjectPair, SynthConfig, SyntheticVideo};
use crate::model::{Batch, TaskKind};
use crate::tensor::{streams, RngStream};

#[derive(Clone, Debug)]
enum Pool {
    Identity(Vec<SubjectPair>),
    Motion(Vec<SyntheticVideo>),
}

impl Pool {
    fn len(&self) -> usize {
        match self {
            Pool::Identity(v) => v.len(),
            Pool::Motion(v) => v.len(),
        }
    }
}

/// Deterministic mini-batch stream over a pre-generated pool. The pool is
/// reshuffled at every epoch from `(seed, epoch)`; a batch that crosses an
/// epoch boundary continues into the next epoch's order.
#[derive(Clone, Debug)]
pub struct BatchSource {
    pool: Pool,
    batch_size: usize,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    max_epochs: Option<usize>,
}

/// Per-item generator seed, independent of the pool's other items.
fn item_seed(seed: u64, id: u64) -> u64 {
    RngStream::new(seed, streams::DATA).child(id).seed()
}

impl BatchSource {
    /// Subject pairs for ids in `ids`.
    pub fn identity(
        synth: &SynthConfig,
        seed: u64,
        ids: Range<u64>,
        batch_size: usize,
        max_epochs: Option<usize>,
    ) -> Result<Self, DataError> {
        let pool = ids
            .map(|id| synth.subject_pair(seed, id))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(Pool::Identity(pool), seed, batch_size, max_epochs)
    }

    /// Clips of `frames` frames for ids in `ids`.
    pub fn motion(
        synth: &SynthConfig,
        seed: u64,
        ids: Range<u64>,
        frames: usize,
        batch_size: usize,
        max_epochs: Option<usize>,
    ) -> Result<Self, DataError> {
        let pool = ids
            .map(|id| synth.video(item_seed(seed, id), frames))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(Pool::Motion(pool), seed, batch_size, max_epochs)
    }

    fn new(
        pool: Pool,
        seed: u64,
        batch_size: usize,
        max_epochs: Option<usize>,
    ) -> Result<Self, DataError> {
        if pool.len() == 0 || batch_size == 0 {
            return Err(DataError::Domain(
                "pool and batch size must be non-empty".into(),
            ));
        }
        let mut s = Self {
            pool,
            batch_size,
            seed,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            max_epochs,
        };
        s.shuffle();
        Ok(s)
    }

    pub fn kind(&self) -> TaskKind {
        match self.pool {
            Pool::Identity(_) => TaskKind::Identity,
            Pool::Motion(_) => TaskKind::Motion,
        }
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn shuffle(&mut self) {
        let tag = match self.pool {
            Pool::Identity(_) => 0,
            Pool::Motion(_) => 1,
        };
        let mut rng = RngStream::new(self.seed, streams::SAMPLER)
            .child(tag)
            .child(self.epoch as u64);
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        self.order = order;
        self.cursor = 0;
    }

    fn next_index(&mut self) -> Result<usize, DataError> {
        if self.cursor == self.order.len() {
            if self.max_epochs.is_some_and(|m| self.epoch + 1 >= m) {
                return Err(DataError::Exhausted {
                    epochs: self.epoch + 1,
                });
            }
            self.epoch += 1;
            self.shuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        Ok(i)
    }

    pub fn next_batch(&mut self) -> Result<Batch, DataError> {
        let idx = (0..self.batch_size)
            .map(|_| self.next_index())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(match &self.pool {
            Pool::Identity(v) => Batch::Identity(idx.iter().map(|&i| v[i].clone()).collect()),
            Pool::Motion(v) => Batch::Motion(idx.iter().map(|&i| v[i].clone()).collect()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(b: &Batch) -> Vec<u64> {
        match b {
            Batch::Identity(v) => v.iter().map(|p| p.subject_id).collect(),
            Batch::Motion(_) => unreachable!(),
        }
    }

    #[test]
    fn epochs_cover_the_pool_and_reshuffle() {
        let synth = SynthConfig::default();
        let mut s = BatchSource::identity(&synth, 4, 0..6, 3, None).unwrap();
        let mut first: Vec<u64> = ids(&s.next_batch().unwrap());
        first.extend(ids(&s.next_batch().unwrap()));
        let mut second: Vec<u64> = ids(&s.next_batch().unwrap());
        second.extend(ids(&s.next_batch().unwrap()));
        assert_ne!(first, second);
        first.sort();
        second.sort();
        assert_eq!(first, (0..6).collect::<Vec<_>>());
        assert_eq!(second, first);

        let mut again = BatchSource::identity(&synth, 4, 0..6, 3, None).unwrap();
        let mut s2 = BatchSource::identity(&synth, 4, 0..6, 3, None).unwrap();
        for _ in 0..5 {
            assert_eq!(again.next_batch().unwrap(), s2.next_batch().unwrap());
        }
    }

    #[test]
    fn exhaustion() {
        let synth = SynthConfig::default();
        let mut s = BatchSource::motion(&synth, 0, 0..2, 2, 2, Some(1)).unwrap();
        assert!(s.next_batch().is_ok());
        assert!(matches!(
            s.next_batch(),
            Err(DataError::Exhausted { epochs: 1 })
        ));
    }
}
