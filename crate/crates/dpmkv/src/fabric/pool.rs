//! Flat byte pool backing the simulated persistent-memory tier.
//!
//! Invariants enforced here rather than by callers:
//! - accesses are bounds-checked; a straddling access faults with no partial
//!   effect,
//! - compare-and-swap is 8-byte aligned and atomic (applied at one instant),
//! - reclaimed ranges are poisoned: any access overlapping one is a simulator
//!   bug and panics immediately instead of returning garbage.

use std::collections::BTreeMap;

use thiserror::Error;

/// Atomic granularity of raw pool writes, in bytes.
pub const ATOMIC_UNIT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Fault {
    #[error("access [{addr}, +{len}) outside pool of {pool_size} bytes")]
    OutOfBounds { addr: u64, len: u64, pool_size: u64 },
    #[error("compare-and-swap at {addr} is not 8-byte aligned")]
    MisalignedCas { addr: u64 },
}

pub struct Pool {
    bytes: Vec<u8>,
    /// Poisoned (reclaimed) ranges: base -> length. Non-overlapping.
    poisoned: BTreeMap<u64, u64>,
}

impl Pool {
    pub fn new(size: u64) -> Self {
        Pool { bytes: vec![0; size as usize], poisoned: BTreeMap::new() }
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }

    fn check(&self, addr: u64, len: u64) -> Result<(), Fault> {
        let end = addr.checked_add(len);
        match end {
            Some(end) if end <= self.size() => {
                self.assert_unpoisoned(addr, len);
                Ok(())
            }
            _ => Err(Fault::OutOfBounds { addr, len, pool_size: self.size() }),
        }
    }

    fn assert_unpoisoned(&self, addr: u64, len: u64) {
        if len == 0 {
            return;
        }
        // Ranges are non-overlapping, so only the last range starting at or
        // before the access end can overlap it.
        if let Some((&base, &plen)) = self.poisoned.range(..addr + len).next_back() {
            assert!(
                base + plen <= addr,
                "access [{addr}, +{len}) touches reclaimed range [{base}, +{plen})"
            );
        }
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>, Fault> {
        self.check(addr, len)?;
        Ok(self.bytes[addr as usize..(addr + len) as usize].to_vec())
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), Fault> {
        self.check(addr, data.len() as u64)?;
        self.bytes[addr as usize..addr as usize + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Read a little-endian u64 (the pool's atomic word size).
    pub fn read_u64(&self, addr: u64) -> Result<u64, Fault> {
        let b = self.read(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) -> Result<(), Fault> {
        self.write(addr, &value.to_le_bytes())
    }

    /// Atomic compare-and-swap on an aligned 8-byte word. Returns
    /// `(success, observed)`; `observed` is the word's value at the
    /// linearization instant regardless of success.
    pub fn cas(&mut self, addr: u64, expected: u64, desired: u64) -> Result<(bool, u64), Fault> {
        if addr % ATOMIC_UNIT != 0 {
            return Err(Fault::MisalignedCas { addr });
        }
        let observed = self.read_u64(addr)?;
        if observed == expected {
            self.write_u64(addr, desired)?;
            Ok((true, observed))
        } else {
            Ok((false, observed))
        }
    }

    /// Mark a reclaimed range. Accesses overlapping it panic until the range
    /// is reused via `unpoison`.
    pub fn poison(&mut self, addr: u64, len: u64) {
        self.assert_unpoisoned(addr, len);
        self.poisoned.insert(addr, len);
    }

    /// Reopen a previously reclaimed range (reallocation) and zero it.
    pub fn unpoison(&mut self, addr: u64, len: u64) {
        let removed = self.poisoned.remove(&addr);
        assert_eq!(removed, Some(len), "unpoison of a range that was not poisoned as such");
        self.bytes[addr as usize..(addr + len) as usize].fill(0);
    }

    pub fn poisoned_ranges(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.poisoned.iter().map(|(&b, &l)| (b, l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_write_round_trip() {
        let mut p = Pool::new(1024);
        p.write(100, b"hello").unwrap();
        assert_eq!(p.read(100, 5).unwrap(), b"hello");
    }

    #[test]
    fn straddling_read_faults_without_partial_effect() {
        let p = Pool::new(64);
        let err = p.read(60, 8).unwrap_err();
        assert!(matches!(err, Fault::OutOfBounds { .. }));
    }

    #[test]
    fn cas_requires_alignment_and_is_atomic() {
        let mut p = Pool::new(64);
        p.write_u64(8, 7).unwrap();
        assert!(matches!(p.cas(9, 7, 9), Err(Fault::MisalignedCas { .. })));
        // Success swings the value and reports the old word.
        assert_eq!(p.cas(8, 7, 9).unwrap(), (true, 7));
        // Failure leaves the word intact and reports what was observed.
        assert_eq!(p.cas(8, 7, 11).unwrap(), (false, 9));
        assert_eq!(p.read_u64(8).unwrap(), 9);
    }

    #[test]
    #[should_panic(expected = "reclaimed range")]
    fn poisoned_access_panics() {
        let mut p = Pool::new(1024);
        p.poison(256, 128);
        let _ = p.read(300, 4);
    }

    #[test]
    fn unpoison_reopens_and_zeroes() {
        let mut p = Pool::new(1024);
        p.write(256, &[0xff; 16]).unwrap();
        p.poison(256, 128);
        p.unpoison(256, 128);
        assert_eq!(p.read(256, 16).unwrap(), vec![0; 16]);
    }
}
