//! Bit-packed binary latent vectors.

use std::cmp::Ordering;
use std::fmt;

use smallvec::SmallVec;

type Words = SmallVec<[u64; 2]>;

/// Active-unit indices, inline for sparse states.
pub type ActiveList = SmallVec<[usize; 16]>;

/// A latent configuration `s ∈ {0,1}^H`, packed 64 bits per word.
///
/// Bits beyond `len` in the last word are always zero, so derived equality
/// and hashing only see bit content.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryState {
    words: Words,
    len: u32,
}

fn word_count(len: usize) -> usize {
    len.div_ceil(64)
}

impl BinaryState {
    pub fn zeros(len: usize) -> Self {
        BinaryState {
            words: SmallVec::from_elem(0, word_count(len)),
            len: len as u32,
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut s = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                s.set(i, true);
            }
        }
        s
    }

    /// Build from packed words; stray bits above `len` are cleared.
    pub fn from_words(words: &[u64], len: usize) -> Self {
        assert_eq!(words.len(), word_count(len), "word count does not match length");
        let mut s = BinaryState {
            words: SmallVec::from_slice(words),
            len: len as u32,
        };
        s.clear_tail();
        s
    }

    /// Enumeration index: bit `i` of `index` becomes latent `i`.
    pub fn from_index(index: u64, len: usize) -> Self {
        let mut s = Self::zeros(len);
        for i in 0..len.min(64) {
            if index >> i & 1 == 1 {
                s.set(i, true);
            }
        }
        s
    }

    fn clear_tail(&mut self) {
        let rem = self.len as usize % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len as usize
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len());
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len());
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        debug_assert!(i < self.len());
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    /// Number of active units `|s|`.
    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Indices of active units in increasing order.
    pub fn active(&self) -> Active<'_> {
        Active {
            words: &self.words,
            word: 0,
            current: self.words.first().copied().unwrap_or(0),
        }
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.active().collect()
    }

    pub fn active_list(&self) -> ActiveList {
        self.active().collect()
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.words
            .iter()
            .zip(other.words.iter())
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// Single-point crossover: keep the first `cut` bits of each parent and
    /// swap the remaining `len - cut` bits.
    pub fn crossover(&self, other: &Self, cut: usize) -> (Self, Self) {
        debug_assert_eq!(self.len, other.len);
        let mut a = self.clone();
        let mut b = other.clone();
        for (w, (wa, wb)) in a.words.iter_mut().zip(b.words.iter_mut()).enumerate() {
            let lo = w * 64;
            // mask of bits at positions >= cut within this word
            let tail = if cut <= lo {
                u64::MAX
            } else if cut >= lo + 64 {
                0
            } else {
                !((1u64 << (cut - lo)) - 1)
            };
            let diff = (*wa ^ *wb) & tail;
            *wa ^= diff;
            *wb ^= diff;
        }
        (a, b)
    }
}

pub struct Active<'a> {
    words: &'a [u64],
    word: usize,
    current: u64,
}

impl Iterator for Active<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        loop {
            if self.current != 0 {
                let bit = self.current.trailing_zeros() as usize;
                self.current &= self.current - 1;
                return Some(self.word * 64 + bit);
            }
            self.word += 1;
            if self.word >= self.words.len() {
                return None;
            }
            self.current = self.words[self.word];
        }
    }
}

/// Lexicographic order over the bit sequence `s_0, s_1, ...` with `0 < 1`.
impl Ord for BinaryState {
    fn cmp(&self, other: &Self) -> Ordering {
        self.len.cmp(&other.len).then_with(|| {
            for (a, b) in self.words.iter().zip(other.words.iter()) {
                let diff = a ^ b;
                if diff != 0 {
                    let bit = diff.trailing_zeros();
                    return if a >> bit & 1 == 1 {
                        Ordering::Greater
                    } else {
                        Ordering::Less
                    };
                }
            }
            Ordering::Equal
        })
    }
}

impl PartialOrd for BinaryState {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for BinaryState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryState(")?;
        for i in 0..self.len() {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        write!(f, ")")
    }
}
