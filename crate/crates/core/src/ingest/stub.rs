//! Deterministic stand-in for a pretrained visual feature extractor:
//! each cell's row is Gaussian noise keyed by (sample_id, cell_id).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{randn, Tensor};

pub const STUB_WIDTH: usize = 1024;

fn row_seed(seed: u64, sample_id: &str, cell_id: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((sample_id.len() as u64).to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update(cell_id.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// N x F feature matrix, reproducible row by row.
pub fn stub_features(sample_id: &str, cell_ids: &[u64], seed: u64, f: usize) -> Tensor {
    let mut data = Vec::with_capacity(cell_ids.len() * f);
    for &id in cell_ids {
        let mut rng = ChaCha8Rng::seed_from_u64(row_seed(seed, sample_id, id));
        let row = randn(&[1, f], 1.0, &mut rng);
        data.extend_from_slice(row.data());
    }
    Tensor::new(vec![cell_ids.len(), f], data).expect("rows are uniform width")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_matrix() {
        let a = stub_features("s0", &[1, 2, 3], 42, 16);
        let b = stub_features("s0", &[1, 2, 3], 42, 16);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rows_keyed_by_cell_not_position() {
        let a = stub_features("s0", &[1, 2], 42, 8);
        let b = stub_features("s0", &[2, 1], 42, 8);
        assert_eq!(&a.data()[..8], &b.data()[8..]);
        assert_eq!(&a.data()[8..], &b.data()[..8]);
    }

    #[test]
    fn different_cells_and_samples_differ() {
        let a = stub_features("s0", &[1], 42, 8);
        let b = stub_features("s0", &[2], 42, 8);
        let c = stub_features("s1", &[1], 42, 8);
        assert_ne!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }
}
