//! Bounded worker pool over scoped threads.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use crate::error::Result;

/// Applies `f` to every item with at most `width` calls in flight; results
/// keep input order. After a failure no new items start, and the failure
/// with the lowest input position is returned.
pub fn bounded_map<T: Sync, R: Send>(items: &[T], width: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let workers = width.max(1).min(items.len().max(1));
    let results: Vec<Vec<(usize, Result<R>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() || failed.load(Ordering::Relaxed) {
                            break;
                        }
                        let r = f(&items[i]);
                        if r.is_err() {
                            failed.store(true, Ordering::Relaxed);
                        }
                        out.push((i, r));
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, r) in results.into_iter().flatten() {
        slots[i] = Some(r);
    }
    if let Some(pos) = slots.iter().position(|s| matches!(s, Some(Err(_)))) {
        if let Some(Err(e)) = slots.swap_remove(pos) {
            return Err(e);
        }
    }
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn bounded_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        let out = bounded_map(&items, 4, |&i| Ok(i * 2)).unwrap();
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        assert!(bounded_map(&items, 3, |&i| if i == 5 { Err(Error::Invalid("x".into())) } else { Ok(i) }).is_err());
    }

    #[test]
    fn failure_stops_new_work() {
        let items: Vec<usize> = (0..100).collect();
        let calls = AtomicUsize::new(0);
        let r = bounded_map(&items, 1, |&i| {
            calls.fetch_add(1, Ordering::Relaxed);
            if i >= 3 {
                Err(Error::Invalid(format!("{i}")))
            } else {
                Ok(i)
            }
        });
        assert_eq!(r.unwrap_err().to_string(), "invalid input: 3");
        assert_eq!(calls.load(Ordering::Relaxed), 4);
    }
}
