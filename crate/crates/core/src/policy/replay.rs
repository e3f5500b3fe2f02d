use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};

/// Uniformly sampled minibatch of stored transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub s: Array2<f64>,
    /// Normalized actions.
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s_next: Array2<f64>,
}

impl ReplayBatch {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Fixed-capacity ring buffer of `(s, a, r, s')` rows.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    state_dim: usize,
    action_dim: usize,
    capacity: usize,
    rows: Vec<f64>,
    len: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be >= 1".into()));
        }
        Ok(Self {
            state_dim,
            action_dim,
            capacity,
            rows: Vec::new(),
            len: 0,
            cursor: 0,
        })
    }

    fn width(&self) -> usize {
        2 * self.state_dim + self.action_dim + 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends one transition, overwriting the oldest once full. Non-finite
    /// entries are rejected and leave the buffer unchanged.
    pub fn push(&mut self, s: &[f64], a: &[f64], r: f64, s_next: &[f64]) -> Result<()> {
        if s.len() != self.state_dim || s_next.len() != self.state_dim {
            return Err(Error::dim("replay state", self.state_dim, s.len()));
        }
        if a.len() != self.action_dim {
            return Err(Error::dim("replay action", self.action_dim, a.len()));
        }
        if !s
            .iter()
            .chain(a)
            .chain(s_next)
            .chain([&r])
            .all(|x| x.is_finite())
        {
            return Err(Error::Numerical(
                "refusing to store a non-finite transition".into(),
            ));
        }
        let w = self.width();
        let row = s.iter().chain(a).chain([&r]).chain(s_next).copied();
        if self.len < self.capacity {
            self.rows.extend(row);
            self.len += 1;
        } else {
            let start = self.cursor * w;
            for (dst, x) in self.rows[start..start + w].iter_mut().zip(row) {
                *dst = x;
            }
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<ReplayBatch> {
        if self.is_empty() {
            return Err(Error::Usage(
                "cannot sample from an empty replay buffer".into(),
            ));
        }
        let (ds, da, w) = (self.state_dim, self.action_dim, self.width());
        let mut out = ReplayBatch {
            s: Array2::zeros((batch_size, ds)),
            a: Array2::zeros((batch_size, da)),
            r: Array1::zeros(batch_size),
            s_next: Array2::zeros((batch_size, ds)),
        };
        for i in 0..batch_size {
            let row = &self.rows[rng.random_range(0..self.len) * w..][..w];
            out.s.row_mut(i).assign(&ndarray::aview1(&row[..ds]));
            out.a.row_mut(i).assign(&ndarray::aview1(&row[ds..ds + da]));
            out.r[i] = row[ds + da];
            out.s_next
                .row_mut(i)
                .assign(&ndarray::aview1(&row[ds + da + 1..]));
        }
        Ok(out)
    }
}
