//! Systematic Reed-Solomon over GF(256) with a Cauchy parity block.
//!
//! The generator is `[I_k; C]` where `C[i][j] = 1 / (x_i + y_j)` with
//! `x_i = k + i` and `y_j = j`. Every square submatrix of a Cauchy matrix is
//! nonsingular, so any `k` rows of the generator are invertible.

use super::gf256;
use super::CodecError;

/// Largest number of distinct evaluation points in GF(256).
pub const MAX_TOTAL_SHARDS: usize = 256;

#[derive(Debug, Clone)]
pub struct ReedSolomon {
    data_shards: usize,
    total_shards: usize,
    parity: Vec<Vec<u8>>,
}

impl ReedSolomon {
    pub fn new(data_shards: usize, total_shards: usize) -> Result<Self, CodecError> {
        if data_shards == 0 || total_shards < data_shards {
            return Err(CodecError::Config(format!(
                "invalid code shape ({data_shards}, {total_shards})"
            )));
        }
        if total_shards > MAX_TOTAL_SHARDS {
            return Err(CodecError::FieldTooSmall { total_shards });
        }
        let parity = (data_shards..total_shards)
            .map(|x| {
                (0..data_shards)
                    .map(|y| gf256::inv((x ^ y) as u8))
                    .collect()
            })
            .collect();
        Ok(Self {
            data_shards,
            total_shards,
            parity,
        })
    }

    pub fn data_shards(&self) -> usize {
        self.data_shards
    }

    pub fn total_shards(&self) -> usize {
        self.total_shards
    }

    /// Row `index` of the generator matrix.
    pub fn generator_row(&self, index: usize) -> Vec<u8> {
        assert!(index < self.total_shards);
        if index < self.data_shards {
            let mut row = vec![0u8; self.data_shards];
            row[index] = 1;
            row
        } else {
            self.parity[index - self.data_shards].clone()
        }
    }

    /// Splits `data_blocks` (already padded, `k` blocks of equal length) into
    /// `total_shards` coded shards.
    pub fn encode_blocks(&self, data_blocks: &[&[u8]]) -> Vec<Vec<u8>> {
        assert_eq!(data_blocks.len(), self.data_shards);
        let shard_len = data_blocks[0].len();
        let mut shards: Vec<Vec<u8>> = data_blocks.iter().map(|b| b.to_vec()).collect();
        for row in &self.parity {
            let mut out = vec![0u8; shard_len];
            for (coef, block) in row.iter().zip(data_blocks) {
                gf256::mul_add_slice(&mut out, block, *coef);
            }
            shards.push(out);
        }
        shards
    }

    /// Recovers the `k` data blocks from exactly `k` shards with distinct indices.
    pub fn decode_blocks(&self, shards: &[(usize, &[u8])]) -> Result<Vec<Vec<u8>>, CodecError> {
        let k = self.data_shards;
        if shards.len() != k {
            return Err(CodecError::InsufficientFragments {
                have: shards.len(),
                need: k,
            });
        }
        let shard_len = shards[0].1.len();
        if shards.iter().all(|&(idx, _)| idx < k) {
            let mut blocks = vec![Vec::new(); k];
            for &(idx, data) in shards {
                blocks[idx] = data.to_vec();
            }
            return Ok(blocks);
        }
        let rows: Vec<Vec<u8>> = shards
            .iter()
            .map(|&(idx, _)| self.generator_row(idx))
            .collect();
        let inverse = invert(rows)
            .ok_or_else(|| CodecError::Corruption("generator submatrix is singular".to_string()))?;
        let blocks = inverse
            .iter()
            .map(|coefs| {
                let mut out = vec![0u8; shard_len];
                for (coef, &(_, data)) in coefs.iter().zip(shards) {
                    gf256::mul_add_slice(&mut out, data, *coef);
                }
                out
            })
            .collect();
        Ok(blocks)
    }
}

/// Gauss-Jordan inversion of a square matrix over GF(256).
fn invert(mut m: Vec<Vec<u8>>) -> Option<Vec<Vec<u8>>> {
    let n = m.len();
    let mut inv: Vec<Vec<u8>> = (0..n)
        .map(|i| {
            let mut row = vec![0u8; n];
            row[i] = 1;
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| m[r][col] != 0)?;
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let scale = gf256::inv(m[col][col]);
        for j in 0..n {
            m[col][j] = gf256::mul(m[col][j], scale);
            inv[col][j] = gf256::mul(inv[col][j], scale);
        }
        for r in 0..n {
            if r != col && m[r][col] != 0 {
                let factor = m[r][col];
                let (pivot_m, pivot_inv) = (m[col].clone(), inv[col].clone());
                gf256::mul_add_slice(&mut m[r], &pivot_m, factor);
                gf256::mul_add_slice(&mut inv[r], &pivot_inv, factor);
            }
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_codes_wider_than_the_field() {
        assert!(matches!(
            ReedSolomon::new(50, 4950),
            Err(CodecError::FieldTooSmall { total_shards: 4950 })
        ));
        assert!(ReedSolomon::new(11, 231).is_ok());
    }

    #[test]
    fn inverse_of_generator_subset_is_identity_product() {
        let rs = ReedSolomon::new(3, 15).unwrap();
        let rows: Vec<Vec<u8>> = [2usize, 7, 14]
            .iter()
            .map(|&i| rs.generator_row(i))
            .collect();
        let inv = invert(rows.clone()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0u8;
                for t in 0..3 {
                    acc ^= gf256::mul(inv[i][t], rows[t][j]);
                }
                assert_eq!(acc, u8::from(i == j));
            }
        }
    }

    #[test]
    fn singular_matrix_has_no_inverse() {
        assert!(invert(vec![vec![1, 2], vec![1, 2]]).is_none());
    }
}
