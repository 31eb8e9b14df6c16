use std::sync::{Condvar, Mutex};

/// Counting gate bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(limit: usize) -> Self {
        InFlightLimiter {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("limiter poisoned");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("limiter poisoned");
        }
        *active += 1;
        Permit { limiter: self }
    }

    pub fn active(&self) -> usize {
        *self.active.lock().expect("limiter poisoned")
    }
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().expect("limiter poisoned");
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}
