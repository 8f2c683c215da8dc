//! Mask-aware Adam with L2-coupled weight decay.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{TableData, TensorTable};
use crate::error::{Error, Result};
use crate::model::Parameter;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moments for every registry parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Parameter]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.v[index]
    }

    /// Zero both moments and the step counter.
    pub fn reset(&mut self) {
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|t| t.fill(0.0));
        self.t = 0;
    }

    /// Append `<name>.m`, `<name>.v` and `adam.t` entries to a checkpoint table.
    pub fn append_to(&self, table: &mut TensorTable, params: &[Parameter]) {
        for (i, p) in params.iter().enumerate() {
            let dims = p.value.shape();
            table.push(format!("{}.m", p.name), dims, TableData::F32(self.m[i].data().to_vec()));
            table.push(format!("{}.v", p.name), dims, TableData::F32(self.v[i].data().to_vec()));
        }
        table.push("adam.t", &[1], TableData::U64(vec![self.t]));
    }

    pub fn from_table(config: AdamConfig, table: &TensorTable, params: &[Parameter]) -> Result<Self> {
        let mut state = AdamState::new(config, params);
        let read = |name: String, dims: &[usize]| -> Result<Tensor> {
            match table.get(&name) {
                Some(e) if e.dims == dims => match &e.data {
                    TableData::F32(v) => Tensor::new(dims.to_vec(), v.clone()),
                    _ => Err(Error::Load(format!("{name}: wrong dtype"))),
                },
                Some(e) => Err(Error::Load(format!(
                    "{name}: shape {:?} in file, {dims:?} in network",
                    e.dims
                ))),
                None => Err(Error::Load(format!("{name}: missing"))),
            }
        };
        for (i, p) in params.iter().enumerate() {
            state.m[i] = read(format!("{}.m", p.name), p.value.shape())?;
            state.v[i] = read(format!("{}.v", p.name), p.value.shape())?;
        }
        state.t = match table.get("adam.t").map(|e| &e.data) {
            Some(TableData::U64(t)) if t.len() == 1 => t[0],
            _ => return Err(Error::Load("adam.t: missing".into())),
        };
        Ok(state)
    }
}

/// One Adam update over every trainable parameter:
///
/// ```text
/// g = grad + wd * w
/// m = b1 m + (1 - b1) g
/// v = b2 v + (1 - b2) g^2
/// w = w - lr * m_hat / (sqrt(v_hat) + eps)
/// ```
///
/// after which `w`, `m` and `v` are multiplied by the mask. Frozen parameters and
/// their moments are left untouched.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, registry has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.trainable && (p.grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape()) {
            return Err(Error::Contract(format!(
                "no gradient of shape {:?} for trainable parameter {}",
                p.value.shape(),
                p.name
            )));
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let mask = p.mask.data();
        let grad = p.grad.data();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[j] as f64 + c.weight_decay * *w as f64;
            let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g;
            let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g * g;
            let update = c.lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
            let keep = mask[j];
            *w = (*w as f64 - update) as f32 * keep;
            m[j] = mj as f32 * keep;
            v[j] = vj as f32 * keep;
        }
    }
    Ok(())
}

pub fn zero_grads(params: &mut [Parameter]) {
    for p in params {
        p.grad.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Block;

    fn scalar_param(w: f32, g: f32) -> Parameter {
        let mut p = Parameter::new("w", Block::Head, Tensor::from_slice(&[1], &[w]), true);
        p.grad = Tensor::from_slice(&[1], &[g]);
        p
    }

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.beta1, c.beta2, c.eps), (1e-3, 1e-5, 0.9, 0.999, 1e-8));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut params = vec![scalar_param(1.0, 0.0)];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &params);
        adam_step(&mut params, &mut st).unwrap();
        assert_eq!(params[0].value.data()[0], 1.0);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let mut params = vec![scalar_param(0.5, 0.2)];
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &params);
        adam_step(&mut params, &mut st).unwrap();
        // hand-executed in f64: m = 0.02, v = 4e-5, m_hat = 0.2, v_hat = 0.04
        let m_hat = (0.1f64 * 0.2) / (1.0 - 0.9);
        let v_hat = (0.001f64 * 0.04) / (1.0 - 0.999);
        let expected = 0.5 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((params[0].value.data()[0] as f64 - expected).abs() < 1e-7);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn masked_and_frozen_positions() {
        let mut a = Parameter::new("a", Block::Head, Tensor::from_slice(&[3], &[0.5, -0.2, 0.9]), true);
        a.grad = Tensor::from_slice(&[3], &[0.1, 0.3, -0.4]);
        a.mask = Tensor::from_slice(&[3], &[1.0, 0.0, 1.0]);
        let mut b = scalar_param(0.7, 0.5);
        b.trainable = false;
        let mut params = vec![a, b];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..10 {
            adam_step(&mut params, &mut st).unwrap();
        }
        assert_eq!(params[0].value.data()[1], 0.0);
        assert_eq!(st.first_moment(0).data()[1], 0.0);
        assert_eq!(st.second_moment(0).data()[1], 0.0);
        assert_eq!(params[1].value.data()[0].to_bits(), 0.7f32.to_bits());
        assert_eq!(st.first_moment(1).data()[0], 0.0);
    }

    #[test]
    fn registry_mismatch_is_a_contract_error() {
        let mut params = vec![scalar_param(1.0, 0.0)];
        let mut st = AdamState::new(AdamConfig::default(), &[]);
        assert!(matches!(adam_step(&mut params, &mut st), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_probe_descends() {
        // f(w) = ||w||^2, gradient 2w
        let init = [0.8f32, -0.3, 0.5, -1.0];
        let mut params = vec![Parameter::new("w", Block::Head, Tensor::from_slice(&[4], &init), true)];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &params);
        let mut losses = Vec::new();
        for _ in 0..100 {
            zero_grads(&mut params);
            let w = params[0].value.data().to_vec();
            losses.push(w.iter().map(|x| (x * x) as f64).sum::<f64>());
            params[0].grad = Tensor::from_slice(&[4], &w.iter().map(|x| 2.0 * x).collect::<Vec<_>>());
            adam_step(&mut params, &mut st).unwrap();
        }
        for k in 5..losses.len() - 1 {
            assert!(losses[k + 1] < losses[k], "step {k}: {} -> {}", losses[k], losses[k + 1]);
        }
    }

    proptest::proptest! {
        #[test]
        fn convex_probe_reaches_target(c in proptest::collection::vec(-1.0f32..1.0, 1..16)) {
            // f(w) = ||w - c||^2 from w = 0
            let n = c.len();
            let mut params = vec![Parameter::new("w", Block::Head, Tensor::zeros(&[n]), true)];
            let cfg = AdamConfig { lr: 0.05, weight_decay: 0.0, ..AdamConfig::default() };
            let mut st = AdamState::new(cfg, &params);
            for _ in 0..200 {
                let g: Vec<f32> = params[0].value.data().iter().zip(&c).map(|(w, c)| 2.0 * (w - c)).collect();
                params[0].grad = Tensor::from_slice(&[n], &g);
                adam_step(&mut params, &mut st).unwrap();
            }
            let dist = params[0].value.data().iter().zip(&c)
                .map(|(w, c)| ((w - c) as f64).powi(2)).sum::<f64>().sqrt();
            proptest::prop_assert!(dist < 1e-2, "distance {}", dist);
        }
    }

    #[test]
    fn state_table_round_trip() {
        let mut params = vec![scalar_param(0.5, 0.2)];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        adam_step(&mut params, &mut st).unwrap();
        let mut table = TensorTable::new();
        st.append_to(&mut table, &params);
        let back = AdamState::from_table(AdamConfig::default(), &table, &params).unwrap();
        assert_eq!(back, st);
    }
}
