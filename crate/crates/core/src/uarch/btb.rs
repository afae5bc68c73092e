//! Set-associative branch target buffer with partial tags and true LRU.

use crate::ir::VirtualAddress;

/// BTB geometry and address slicing.
///
/// The set index is folded from the low 16 address bits only, and the tag
/// covers bits 16..31. Bits 31 and above never enter the structure, so
/// addresses `a` and `a + 2^31` are indistinguishable to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BtbConfig {
    pub ways: usize,
    pub sets: usize,
}

impl Default for BtbConfig {
    fn default() -> Self {
        BtbConfig {
            ways: 4,
            sets: 1024,
        }
    }
}

impl BtbConfig {
    /// Set index: bits [9:0] XOR bits [15:6] of the branch address.
    pub fn index(&self, addr: VirtualAddress) -> usize {
        let low = addr.0 & 0x3ff;
        let high = (addr.0 >> 6) & 0x3ff;
        ((low ^ high) as usize) % self.sets
    }

    /// Partial tag: bits [30:16] of the branch address.
    pub fn tag(&self, addr: VirtualAddress) -> u64 {
        (addr.0 >> 16) & 0x7fff
    }
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    tag: u64,
    target: VirtualAddress,
    /// Larger = more recently used.
    lru: u64,
}

/// The target buffer proper. Targets are stored as given; consumers compare
/// them modulo 2^31.
#[derive(Clone)]
pub struct Btb {
    config: BtbConfig,
    sets: Vec<Vec<Entry>>,
    tick: u64,
}

impl Btb {
    pub fn new(config: BtbConfig) -> Btb {
        Btb {
            config,
            sets: vec![Vec::new(); config.sets],
            tick: 0,
        }
    }

    pub fn config(&self) -> BtbConfig {
        self.config
    }

    /// Stored target for a branch at `addr`, if its (index, tag) pair hits.
    /// A hit refreshes the entry's LRU position.
    pub fn lookup(&mut self, addr: VirtualAddress) -> Option<VirtualAddress> {
        let idx = self.config.index(addr);
        let tag = self.config.tag(addr);
        self.tick += 1;
        let tick = self.tick;
        self.sets[idx].iter_mut().find(|e| e.tag == tag).map(|e| {
            e.lru = tick;
            e.target
        })
    }

    /// Installs (or updates) the entry for `addr`, evicting the least
    /// recently used way when the set is full.
    pub fn insert(&mut self, addr: VirtualAddress, target: VirtualAddress) {
        let idx = self.config.index(addr);
        let tag = self.config.tag(addr);
        self.tick += 1;
        let set = &mut self.sets[idx];
        if let Some(e) = set.iter_mut().find(|e| e.tag == tag) {
            e.target = target;
            e.lru = self.tick;
            return;
        }
        if set.len() == self.config.ways {
            let victim = set
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.lru)
                .map(|(i, _)| i)
                .expect("set is full");
            set.swap_remove(victim);
        }
        set.push(Entry {
            tag,
            target,
            lru: self.tick,
        });
    }

    /// Removes the entry for `addr`, if present.
    pub fn invalidate(&mut self, addr: VirtualAddress) {
        let idx = self.config.index(addr);
        let tag = self.config.tag(addr);
        self.sets[idx].retain(|e| e.tag != tag);
    }

    /// Removes every entry.
    pub fn flush(&mut self) {
        self.sets.iter_mut().for_each(Vec::clear);
        self.tick = 0;
    }

    /// Number of valid entries across all sets.
    pub fn occupancy(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    /// Number of valid entries in the set `addr` maps to.
    pub fn set_occupancy(&self, addr: VirtualAddress) -> usize {
        self.sets[self.config.index(addr)].len()
    }
}
