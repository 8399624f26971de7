//! AdamW with decoupled weight decay and per-group learning rates.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// A set of parameters sharing one learning rate.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub params: Vec<ParamId>,
}

/// Splits a model's parameters into the modality-encoder group (at `lr_modality`)
/// and everything else (at `lr_rest`). Empty groups are dropped.
pub fn build_optimizer_groups<T: Scalar>(
    store: &ParamStore<T>,
    lr_rest: f64,
    lr_modality: f64,
) -> Result<Vec<ParamGroup>> {
    let mut seen = std::collections::HashSet::new();
    let mut rest = Vec::new();
    let mut modality = Vec::new();
    for (id, p) in store.iter() {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::config(format!(
                "parameter `{}` is registered twice and would be optimised twice",
                p.name
            )));
        }
        if !p.requires_grad {
            continue;
        }
        match p.role {
            ParamRole::Backbone => rest.push(id),
            ParamRole::ModalityEncoder => modality.push(id),
        }
    }
    let mut groups = vec![ParamGroup {
        name: "rest".into(),
        lr: lr_rest,
        params: rest,
    }];
    if !modality.is_empty() {
        groups.push(ParamGroup {
            name: "modality".into(),
            lr: lr_modality,
            params: modality,
        });
    }
    groups.retain(|g| !g.params.is_empty());
    Ok(groups)
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

pub struct AdamW<T> {
    pub config: AdamWConfig,
    groups: Vec<ParamGroup>,
    state: Vec<Vec<Moments<T>>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, groups: Vec<ParamGroup>, config: AdamWConfig) -> Result<Self> {
        let mut owner = std::collections::HashMap::new();
        for g in &groups {
            for &id in &g.params {
                if let Some(prev) = owner.insert(id, g.name.clone()) {
                    let name = &store.get(id)?.name;
                    return Err(Error::config(format!(
                        "parameter `{name}` is in both group `{prev}` and `{}`",
                        g.name
                    )));
                }
            }
        }
        let state = groups
            .iter()
            .map(|g| {
                g.params
                    .iter()
                    .map(|&id| {
                        let shape = store.value(id).shape();
                        Moments {
                            m: Tensor::zeros(shape),
                            v: Tensor::zeros(shape),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(AdamW {
            config,
            groups,
            state,
            step: 0,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every grouped parameter from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for g in &self.groups {
            for &id in &g.params {
                let p = store.get(id)?;
                if p.grad.is_none() {
                    return Err(Error::contract(format!("parameter `{}` has no gradient", p.name)));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        for (group, states) in self.groups.iter().zip(&mut self.state) {
            let lr = T::lit(group.lr);
            let decay = T::one() - lr * T::lit(c.weight_decay);
            for (&id, st) in group.params.iter().zip(states.iter_mut()) {
                let p = store.get_mut(id)?;
                let grad = p.grad.as_ref().expect("checked above");
                let vals = p.value.data_mut();
                for (((x, &g), m), v) in vals
                    .iter_mut()
                    .zip(grad.data())
                    .zip(st.m.data_mut())
                    .zip(st.v.data_mut())
                {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *x = *x * decay - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value), ParamRole::Backbone);
        store.get_mut(id).unwrap().grad = Some(Tensor::scalar(grad));
        (store, id)
    }

    fn opt(store: &ParamStore<f64>, lr: f64, wd: f64, eps: f64) -> AdamW<f64> {
        let groups = build_optimizer_groups(store, lr, lr).unwrap();
        let config = AdamWConfig {
            weight_decay: wd,
            eps,
            ..Default::default()
        };
        AdamW::new(store, groups, config).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = one_param(1.0, 1.0);
        let mut o = opt(&store, 1e-3, 0.0, 0.0);
        o.step(&mut store).unwrap();
        assert!((store.value(id).item() - 0.999).abs() < 1e-15);
        assert_eq!(o.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut store, id) = one_param(0.37, 0.0);
        let mut o = opt(&store, 1e-3, 0.0, 1e-8);
        for _ in 0..5 {
            o.step(&mut store).unwrap();
        }
        assert_eq!(store.value(id).item(), 0.37);
    }

    #[test]
    fn decay_is_decoupled_from_adaptive_step() {
        let (mut store, id) = one_param(1.0, 1.0);
        let mut o = opt(&store, 1e-3, 0.01, 1e-8);
        o.step(&mut store).unwrap();
        let expected = (1.0 - 1e-5) * 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.add("encoder.w", Tensor::scalar(1.0), ParamRole::ModalityEncoder);
        let mut o = opt(&store, 1e-3, 0.0, 1e-8);
        let err = o.step(&mut store).unwrap_err().to_string();
        assert!(err.contains("encoder.w"), "{err}");
        assert_eq!(o.steps(), 0);
    }

    #[test]
    fn overlapping_groups_are_rejected() {
        let (store, id) = one_param(1.0, 1.0);
        let groups = vec![
            ParamGroup {
                name: "a".into(),
                lr: 1.0,
                params: vec![id],
            },
            ParamGroup {
                name: "b".into(),
                lr: 1.0,
                params: vec![id],
            },
        ];
        assert!(matches!(
            AdamW::new(&store, groups, AdamWConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(1.0), ParamRole::Backbone);
        store.add("w", Tensor::scalar(1.0), ParamRole::ModalityEncoder);
        assert!(matches!(build_optimizer_groups(&store, 1.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_modality_rate_freezes_encoder_exactly() {
        let mut store = ParamStore::<f64>::new();
        let enc = store.add("enc", Tensor::vector(vec![0.3, -0.2]), ParamRole::ModalityEncoder);
        let rest = store.add("rest", Tensor::vector(vec![0.1]), ParamRole::Backbone);
        let groups = build_optimizer_groups(&store, 1e-2, 0.0).unwrap();
        let config = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut o = AdamW::new(&store, groups, config).unwrap();
        let before = store.value(enc).clone();
        for _ in 0..3 {
            store.get_mut(enc).unwrap().grad = Some(Tensor::vector(vec![1.0, -4.0]));
            store.get_mut(rest).unwrap().grad = Some(Tensor::vector(vec![2.0]));
            o.step(&mut store).unwrap();
        }
        assert_eq!(store.value(enc), &before);
        assert_ne!(store.value(rest).item(), 0.1);
    }
}
