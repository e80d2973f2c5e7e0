/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Open-addressing index from hashes to entry numbers with linear probing.
/// Key equality is decided by the caller, which owns the entries.
#[derive(Debug, Clone)]
pub struct OpenTable {
    slots: Vec<u32>,
    len: usize,
}

impl Default for OpenTable {
    fn default() -> Self {
        OpenTable::new()
    }
}

const LOAD_NUM: usize = 7;
const LOAD_DEN: usize = 10;

impl OpenTable {
    pub fn new() -> Self {
        OpenTable {
            slots: vec![0; 16],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Bytes held by the slot array.
    pub fn footprint(&self) -> usize {
        self.slots.len() * 4
    }

    /// Finds the entry whose hash is `h` and for which `eq` holds.
    pub fn find(&self, h: u64, mut eq: impl FnMut(usize) -> bool) -> Option<usize> {
        let mask = self.slots.len() - 1;
        let mut i = (h as usize) & mask;
        loop {
            match self.slots[i] {
                0 => return None,
                e => {
                    if eq(e as usize - 1) {
                        return Some(e as usize - 1);
                    }
                }
            }
            i = (i + 1) & mask;
        }
    }

    /// Inserts entry number `entry` under hash `h`; `hash_of` re-hashes
    /// existing entries when the table doubles.
    pub fn insert(&mut self, h: u64, entry: usize, hash_of: impl Fn(usize) -> u64) {
        if (self.len + 1) * LOAD_DEN > self.slots.len() * LOAD_NUM {
            let cap = self.slots.len() * 2;
            let old = std::mem::replace(&mut self.slots, vec![0; cap]);
            for e in old.into_iter().filter(|&e| e != 0) {
                self.place(hash_of(e as usize - 1), e);
            }
        }
        self.place(h, entry as u32 + 1);
        self.len += 1;
    }

    fn place(&mut self, h: u64, tagged: u32) {
        let mask = self.slots.len() - 1;
        let mut i = (h as usize) & mask;
        while self.slots[i] != 0 {
            i = (i + 1) & mask;
        }
        self.slots[i] = tagged;
    }

    pub fn clear(&mut self) {
        self.slots = vec![0; 16];
        self.len = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn table_grows_past_load_factor() {
        let mut t = OpenTable::new();
        let hashes: Vec<u64> = (0..100u64).map(|i| fnv1a(&i.to_le_bytes())).collect();
        for (i, &h) in hashes.iter().enumerate() {
            t.insert(h, i, |e| hashes[e]);
            assert!(t.len() * 10 <= t.capacity() * 7);
        }
        for (i, &h) in hashes.iter().enumerate() {
            assert_eq!(t.find(h, |e| e == i), Some(i));
        }
        assert_eq!(t.find(fnv1a(b"zz"), |_| false), None);
    }
}
