//! Instrumented scratch allocation.
//!
//! Every temporary buffer the engine allocates goes through a [`ScratchArena`],
//! which tracks bytes in use and the high-water mark and enforces an optional
//! cap. Requests over the cap fail with [`Error::OutOfMemory`] before anything
//! is allocated.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct ScratchArena {
    cap: Option<usize>,
    in_use: AtomicUsize,
    peak: AtomicUsize,
}

impl ScratchArena {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn with_cap(cap_bytes: usize) -> Self {
        Self {
            cap: Some(cap_bytes),
            ..Self::default()
        }
    }

    pub fn cap(&self) -> Option<usize> {
        self.cap
    }

    pub fn in_use(&self) -> usize {
        self.in_use.load(Ordering::Acquire)
    }

    /// Largest number of bytes simultaneously reserved since the last reset.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Acquire)
    }

    pub fn reset_peak(&self) {
        self.peak.store(self.in_use(), Ordering::Release);
    }

    /// Reserves `bytes` against the cap; released when the guard drops.
    pub fn reserve(&self, bytes: usize) -> Result<ScratchGuard<'_>> {
        let mut current = self.in_use.load(Ordering::Acquire);
        loop {
            let next = current.checked_add(bytes).ok_or(Error::OutOfMemory {
                requested: bytes,
                in_use: current,
                cap: self.cap.unwrap_or(usize::MAX),
            })?;
            if let Some(cap) = self.cap {
                if next > cap {
                    return Err(Error::OutOfMemory {
                        requested: bytes,
                        in_use: current,
                        cap,
                    });
                }
            }
            match self
                .in_use
                .compare_exchange(current, next, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => {
                    self.peak.fetch_max(next, Ordering::AcqRel);
                    return Ok(ScratchGuard { arena: self, bytes });
                }
                Err(actual) => current = actual,
            }
        }
    }

    /// A zeroed, tracked buffer of `len` elements.
    pub fn alloc<T: Copy + Default>(&self, len: usize) -> Result<ScratchBuf<'_, T>> {
        let bytes = len
            .checked_mul(std::mem::size_of::<T>())
            .ok_or(Error::OutOfMemory {
                requested: usize::MAX,
                in_use: self.in_use(),
                cap: self.cap.unwrap_or(usize::MAX),
            })?;
        let guard = self.reserve(bytes)?;
        let mut data = Vec::new();
        data.try_reserve_exact(len).map_err(|_| Error::OutOfMemory {
            requested: bytes,
            in_use: self.in_use(),
            cap: self.cap.unwrap_or(usize::MAX),
        })?;
        data.resize(len, T::default());
        Ok(ScratchBuf { data, _guard: guard })
    }
}

#[derive(Debug)]
pub struct ScratchGuard<'a> {
    arena: &'a ScratchArena,
    bytes: usize,
}

impl Drop for ScratchGuard<'_> {
    fn drop(&mut self) {
        self.arena.in_use.fetch_sub(self.bytes, Ordering::AcqRel);
    }
}

/// A tracked buffer; the reservation is released on drop.
#[derive(Debug)]
pub struct ScratchBuf<'a, T> {
    data: Vec<T>,
    _guard: ScratchGuard<'a>,
}

impl<T> Deref for ScratchBuf<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for ScratchBuf<'_, T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracks_peak_and_releases() {
        let arena = ScratchArena::unlimited();
        {
            let _a = arena.alloc::<f32>(100).unwrap();
            let _b = arena.alloc::<f64>(10).unwrap();
            assert_eq!(arena.in_use(), 480);
        }
        assert_eq!(arena.in_use(), 0);
        assert_eq!(arena.peak(), 480);
    }

    #[test]
    fn cap_is_enforced_without_allocating() {
        let arena = ScratchArena::with_cap(1 << 20);
        let err = arena.alloc::<f32>(1 << 40).unwrap_err();
        assert!(matches!(err, Error::OutOfMemory { .. }));
        assert_eq!(arena.in_use(), 0);
        let _ok = arena.alloc::<f32>(1 << 18).unwrap();
        assert!(arena.alloc::<f32>(1).is_err());
    }
}
