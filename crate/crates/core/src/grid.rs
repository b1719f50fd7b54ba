use serde::{Deserialize, Serialize};

/// Dense row-major `n x n` matrix indexed by token pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Square<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Clone> Square<T> {
    pub fn filled(n: usize, value: T) -> Self {
        Square {
            n,
            data: vec![value; n * n],
        }
    }
}

impl<T> Square<T> {
    pub fn from_vec(n: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == n * n).then_some(Square { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.n + j] = value;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

impl<T: Copy> Square<T> {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }
}

impl Square<bool> {
    /// Packs the matrix into a hex string, 4 cells per digit, row-major.
    pub fn to_hex(&self) -> String {
        self.data
            .chunks(4)
            .map(|c| {
                let v = c
                    .iter()
                    .enumerate()
                    .fold(0u32, |acc, (k, &b)| acc | ((b as u32) << (3 - k)));
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    pub fn from_hex(n: usize, hex: &str) -> Option<Self> {
        let cells = n * n;
        if hex.len() != cells.div_ceil(4) {
            return None;
        }
        let mut data = Vec::with_capacity(cells);
        for ch in hex.chars() {
            let v = ch.to_digit(16)?;
            for k in 0..4 {
                if data.len() < cells {
                    data.push(v & (1 << (3 - k)) != 0);
                }
            }
        }
        Some(Square { n, data })
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hex_roundtrip(n in 0usize..9, bits in proptest::collection::vec(any::<bool>(), 81)) {
            let sq = Square::from_vec(n, bits[..n * n].to_vec()).unwrap();
            prop_assert_eq!(Square::from_hex(n, &sq.to_hex()).unwrap(), sq);
        }
    }

    #[test]
    fn indexing() {
        let mut s = Square::filled(3, 0u8);
        s.set(1, 2, 7);
        assert_eq!(s.at(1, 2), 7);
        assert_eq!(s.row(1), &[0, 0, 7]);
        assert!(Square::from_vec(2, vec![1, 2, 3]).is_none());
        assert!(Square::from_hex(3, "zz0").is_none());
    }
}
