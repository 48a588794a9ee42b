//! Set-associative last-level cache with LRU replacement.
//!
//! The cache holds line data so the coherent view of memory (cache overlaid
//! on DRAM) can be reconstructed exactly. Dirty evictions are returned to
//! the caller, which is responsible for writing them back to memory.

#[derive(Debug, Clone)]
struct Line {
    tag: u64,
    dirty: bool,
    data: Box<[u8]>,
    last_used: u64,
}

/// A dirty line displaced by an insertion.
#[derive(Debug, Clone)]
pub struct Eviction {
    pub line_addr: u64,
    pub data: Box<[u8]>,
}

pub struct Llc {
    sets: Vec<Vec<Line>>,
    num_sets: u64,
    ways: usize,
    line_bytes: u64,
    tick: u64,
    pub hits: u64,
    pub misses: u64,
}

impl Llc {
    pub fn new(capacity_bytes: u64, ways: u64, line_bytes: u64) -> Self {
        let num_lines = capacity_bytes / line_bytes;
        let num_sets = (num_lines / ways).max(1);
        Llc {
            sets: (0..num_sets).map(|_| Vec::new()).collect(),
            num_sets,
            ways: ways as usize,
            line_bytes,
            tick: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn line_bytes(&self) -> u64 {
        self.line_bytes
    }

    fn set_and_tag(&self, line_addr: u64) -> (usize, u64) {
        (
            (line_addr % self.num_sets) as usize,
            line_addr / self.num_sets,
        )
    }

    fn touch(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    /// Look a line up without touching LRU state or counters (used by
    /// coherence scans).
    pub fn probe(&self, line_addr: u64) -> Option<(bool, &[u8])> {
        let (set, tag) = self.set_and_tag(line_addr);
        self.sets[set]
            .iter()
            .find(|l| l.tag == tag)
            .map(|l| (l.dirty, &l.data[..]))
    }

    /// Demand lookup: counts a hit or miss and refreshes LRU on hit.
    pub fn lookup(&mut self, line_addr: u64) -> Option<Vec<u8>> {
        let tick = self.touch();
        let (set, tag) = self.set_and_tag(line_addr);
        match self.sets[set].iter_mut().find(|l| l.tag == tag) {
            Some(line) => {
                line.last_used = tick;
                self.hits += 1;
                Some(line.data.to_vec())
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Write into a cached line if present (marks it dirty). Returns false
    /// on miss; counters are updated either way.
    pub fn write_hit(&mut self, line_addr: u64, data: &[u8]) -> bool {
        let tick = self.touch();
        let (set, tag) = self.set_and_tag(line_addr);
        match self.sets[set].iter_mut().find(|l| l.tag == tag) {
            Some(line) => {
                line.data.copy_from_slice(data);
                line.dirty = true;
                line.last_used = tick;
                self.hits += 1;
                true
            }
            None => {
                self.misses += 1;
                false
            }
        }
    }

    /// Insert or overwrite a line; the LRU victim is evicted if the set is
    /// full and returned when it was dirty.
    pub fn insert(&mut self, line_addr: u64, data: &[u8], dirty: bool) -> Option<Eviction> {
        let tick = self.touch();
        let (set, tag) = self.set_and_tag(line_addr);
        let ways = self.ways;
        let num_sets = self.num_sets;
        let lines = &mut self.sets[set];
        if let Some(line) = lines.iter_mut().find(|l| l.tag == tag) {
            line.data.copy_from_slice(data);
            line.dirty = dirty;
            line.last_used = tick;
            return None;
        }
        let mut evicted = None;
        if lines.len() == ways {
            let victim_idx = lines
                .iter()
                .enumerate()
                .min_by_key(|(_, l)| l.last_used)
                .map(|(i, _)| i)
                .unwrap();
            let victim = lines.swap_remove(victim_idx);
            if victim.dirty {
                evicted = Some(Eviction {
                    line_addr: victim.tag * num_sets + set as u64,
                    data: victim.data,
                });
            }
        }
        lines.push(Line {
            tag,
            dirty,
            data: data.to_vec().into_boxed_slice(),
            last_used: tick,
        });
        evicted
    }

    /// Drop a line without writing it back (destination-region coherence).
    pub fn invalidate(&mut self, line_addr: u64) {
        let (set, tag) = self.set_and_tag(line_addr);
        self.sets[set].retain(|l| l.tag != tag);
    }

    /// Clear the dirty bit after an explicit writeback.
    pub fn mark_clean(&mut self, line_addr: u64) {
        let (set, tag) = self.set_and_tag(line_addr);
        if let Some(line) = self.sets[set].iter_mut().find(|l| l.tag == tag) {
            line.dirty = false;
        }
    }

    pub fn resident_lines(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }
}
