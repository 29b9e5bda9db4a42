//! Adam with global-norm gradient clipping.
//!
//! Gradients are clipped jointly across all trainable tensors before the
//! moment update. Frozen tensors are never touched; rows disabled by a
//! parameter's row mask keep zero moments, so their values stay
//! bit-identical across steps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, clip_norm: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable tensor in `params`.
    pub fn step(
        &mut self,
        params: &mut ParamTree,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        // Masked gradients feed both the norm and the update.
        let mut effective: Vec<(String, Tensor)> = Vec::new();
        for (name, entry) in params.iter() {
            if !entry.trainable {
                continue;
            }
            let g = grads.get(name).ok_or_else(|| {
                Error::Contract(format!("missing gradient for trainable tensor {name}"))
            })?;
            if g.shape() != entry.tensor.shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} vs parameter {name} {:?}",
                    g.shape(),
                    entry.tensor.shape()
                )));
            }
            let mut g = g.clone();
            if let Some(mask) = &entry.row_mask {
                let cols = g.len() / mask.len().max(1);
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        for v in &mut g.data_mut()[r * cols..(r + 1) * cols] {
                            *v = 0.0;
                        }
                    }
                }
            }
            effective.push((name.to_string(), g));
        }

        let total_norm = effective
            .iter()
            .map(|(_, g)| g.norm_sq())
            .sum::<f64>()
            .sqrt();
        let scale = if total_norm > self.clip_norm {
            self.clip_norm / total_norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (name, g) in effective {
            let g = g.scale(scale);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (&self.m[&name], &self.v[&name]);
            let entry = params.get_mut(&name).expect("collected from params above");
            for i in 0..entry.tensor.len() {
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                entry.tensor.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ArchConfig, Extent, ParamTree};

    fn arch() -> ArchConfig {
        ArchConfig {
            d_model: 2,
            feature_dim: 2,
            pca_dim: 0,
            genes: vec!["G1".into()],
            gat_layers: 1,
            gat_heads: 1,
            leaky_slope: 0.2,
            knn_k: 1,
            trf_layers: 1,
            trf_heads: 1,
            d_ff: 4,
            n_pos: 4,
            extent: Extent {
                x_min: 0.0,
                x_max: 1.0,
                y_min: 0.0,
                y_max: 1.0,
            },
            d_readout: 2,
            use_softplus: true,
            k_clusters: 2,
            normalize: false,
            norm_stats: None,
        }
    }

    fn grads_of(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParamTree::new(arch());
        params.insert("w", Tensor::vector(&[1.0, -2.0, 3.0]));
        let before = params.tensor("w").unwrap().clone();
        let mut opt = AdamState::new(0.1, 1.0);
        for _ in 0..5 {
            opt.step(&mut params, &grads_of(&[("w", Tensor::zeros(&[3]))]))
                .unwrap();
        }
        assert_eq!(params.tensor("w").unwrap(), &before);
    }

    #[test]
    fn first_step_matches_hand_evaluated_recurrence() {
        // g=1, lr=0.1: m_hat=1, v_hat=1, delta = 0.1/(1+eps).
        let mut params = ParamTree::new(arch());
        params.insert("w", Tensor::scalar(5.0));
        let mut opt = AdamState::new(0.1, 1.0);
        opt.step(&mut params, &grads_of(&[("w", Tensor::scalar(1.0))]))
            .unwrap();
        let got = params.tensor("w").unwrap().data()[0];
        assert!((got - 4.9).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn clipping_matches_prescaled_gradient() {
        // Norm-10 gradient under clip 1.0 behaves like the 0.1-scaled gradient.
        let mut p1 = ParamTree::new(arch());
        p1.insert("w", Tensor::vector(&[1.0, 1.0]));
        let mut p2 = p1.clone();
        let mut o1 = AdamState::new(0.05, 1.0);
        let mut o2 = AdamState::new(0.05, 1e18);
        for _ in 0..3 {
            o1.step(&mut p1, &grads_of(&[("w", Tensor::vector(&[6.0, 8.0]))]))
                .unwrap();
            o2.step(&mut p2, &grads_of(&[("w", Tensor::vector(&[0.6, 0.8]))]))
                .unwrap();
        }
        let (a, b) = (p1.tensor("w").unwrap(), p2.tensor("w").unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn frozen_tensor_bit_identical() {
        let mut params = ParamTree::new(arch());
        params.insert("w", Tensor::vector(&[0.1, 0.2]));
        params.insert("frozen", Tensor::vector(&[0.3, 0.7]));
        params.set_trainable("frozen", false).unwrap();
        let before: Vec<u64> = params
            .tensor("frozen")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let mut opt = AdamState::new(0.1, 1.0);
        for _ in 0..10 {
            opt.step(&mut params, &grads_of(&[("w", Tensor::vector(&[1.0, -1.0]))]))
                .unwrap();
        }
        let after: Vec<u64> = params
            .tensor("frozen")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn masked_rows_bit_identical() {
        let mut params = ParamTree::new(arch());
        params.insert(
            "q",
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
        );
        params
            .set_row_mask("q", Some(vec![false, true, false]))
            .unwrap();
        let mut opt = AdamState::new(0.1, 1.0);
        for _ in 0..4 {
            opt.step(&mut params, &grads_of(&[("q", Tensor::full(&[3, 2], 1.0))]))
                .unwrap();
        }
        let q = params.tensor("q").unwrap();
        assert_eq!(q.row(0), &[1.0, 2.0]);
        assert_eq!(q.row(2), &[5.0, 6.0]);
        assert!(q.at2(1, 0) < 3.0 && q.at2(1, 1) < 4.0);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut params = ParamTree::new(arch());
        params.insert("w", Tensor::scalar(1.0));
        let mut opt = AdamState::new(0.1, 1.0);
        let err = opt.step(&mut params, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
