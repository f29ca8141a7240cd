/// Runs per-chunk work on a fixed number of scoped worker threads.
///
/// Items are split into contiguous runs, one per worker, and results come
/// back in input order, so output never depends on the worker count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Executor {
    workers: usize,
}

impl Default for Executor {
    fn default() -> Self {
        Executor::sequential()
    }
}

impl Executor {
    pub fn new(workers: usize) -> Self {
        Executor { workers: workers.max(1) }
    }

    pub fn sequential() -> Self {
        Executor { workers: 1 }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        if self.workers == 1 || items.len() < 2 {
            return items.iter().map(f).collect();
        }
        let per = items.len().div_ceil(self.workers);
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(per)
                .map(|run| s.spawn(move || run.iter().map(f).collect::<Vec<R>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u32> = (0..37).collect();
        for w in 1..6 {
            let out = Executor::new(w).map(&items, |x| x * 2);
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }
}
