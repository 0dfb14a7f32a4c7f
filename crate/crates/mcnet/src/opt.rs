//! Adam with coupled L2 weight decay, plus a finite-difference gradient
//! checker.
//!
//! The decay term `weight_decay * p` is added to the raw gradient before the
//! moment updates, matching classical L2 regularization rather than the
//! decoupled AdamW variant.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-3, weight_decay: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("adam eps must be > 0, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam state over a fixed subset of parameters. Only that subset is ever
/// touched by [`Adam::step`], which is what the staged training protocol and
/// the alternating adversarial update rely on.
pub struct Adam {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, ids: Vec<ParamId>, store: &ParameterStore) -> Result<Self> {
        cfg.validate()?;
        let m = ids.iter().map(|&id| {
            let (r, c) = store.value(id).shape();
            Tensor::zeros(r, c)
        });
        let v = ids.iter().map(|&id| {
            let (r, c) = store.value(id).shape();
            Tensor::zeros(r, c)
        });
        Ok(Adam { cfg, m: m.collect(), v: v.collect(), ids, step: 0 })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update from the gradients currently held in the store. Moment
    /// buffers persist across calls.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (k, &id) in self.ids.iter().enumerate() {
            let n = store.value(id).len();
            for i in 0..n {
                let p = store.value(id).data()[i];
                let g = store.grad(id).data()[i] + self.cfg.weight_decay * p;
                let m = self.cfg.beta1 * self.m[k].data()[i] + (1.0 - self.cfg.beta1) * g;
                let v = self.cfg.beta2 * self.v[k].data()[i] + (1.0 - self.cfg.beta2) * g * g;
                self.m[k].data_mut()[i] = m;
                self.v[k].data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                store.value_mut(id).data_mut()[i] = p - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// One sampled coordinate of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdCoord {
    pub id: ParamId,
    pub index: usize,
}

/// Plans `samples` coordinates spanning every entry in `ids` round-robin;
/// the coordinate inside each entry advances by a fixed stride so repeated
/// visits hit different positions.
pub fn plan_coords(store: &ParameterStore, ids: &[ParamId], samples: usize) -> Vec<FdCoord> {
    let mut coords = Vec::with_capacity(samples);
    if ids.is_empty() {
        return coords;
    }
    let mut cursor = vec![0usize; ids.len()];
    let mut k = 0;
    while coords.len() < samples {
        let id = ids[k % ids.len()];
        let n = store.value(id).len();
        let slot = k % ids.len();
        let idx = (cursor[slot].wrapping_mul(131).wrapping_add(17)) % n;
        cursor[slot] += 1;
        coords.push(FdCoord { id, index: idx });
        k += 1;
    }
    coords
}

/// Maximum relative error between an analytic gradient and central finite
/// differences over the given coordinates.
///
/// `target` evaluates the loss for the current store contents and also
/// returns the analytic gradient contributions (only the first call uses
/// them). Relative error is `|a - n| / (|a| + |n| + 1e-12)`.
pub fn finite_difference_check(
    store: &mut ParameterStore,
    target: &mut dyn FnMut(&ParameterStore) -> Result<(f64, Vec<(ParamId, Tensor)>)>,
    coords: &[FdCoord],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::Config(format!("fd step must lie in (0, 1e-3], got {step}")));
    }
    let (loss0, grad_list) = target(store)?;
    if !loss0.is_finite() {
        return Err(Error::Numerical(format!("loss is not finite: {loss0}")));
    }
    let mut analytic: Vec<Tensor> =
        store.ids().map(|id| Tensor::zeros(store.value(id).rows(), store.value(id).cols())).collect();
    for (id, g) in grad_list {
        analytic[id.index()].add_assign(&g);
    }

    let mut max_rel = 0.0f64;
    for c in coords {
        let orig = store.value(c.id).data()[c.index];
        store.value_mut(c.id).data_mut()[c.index] = orig + step;
        let (lp, _) = target(store)?;
        store.value_mut(c.id).data_mut()[c.index] = orig - step;
        let (lm, _) = target(store)?;
        store.value_mut(c.id).data_mut()[c.index] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::Numerical("perturbed loss is not finite".into()));
        }
        let numeric = (lp - lm) / (2.0 * step);
        let ana = analytic[c.id.index()].data()[c.index];
        let rel = (ana - numeric).abs() / (ana.abs() + numeric.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn defaults_match_selected_hyperparameters() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr, 5e-3);
        assert_eq!(cfg.weight_decay, 5e-4);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = AdamConfig::default();
        cfg.lr = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = AdamConfig::default();
        cfg.eps = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::row_from(vec![1.0, -2.0, 3.0])).unwrap();
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, vec![id], &store).unwrap();
        let before = store.value(id).clone();
        store.zero_grads();
        adam.step(&mut store);
        adam.step(&mut store);
        assert!(store.value(id).bit_eq(&before));
    }

    #[test]
    fn single_step_matches_hand_rolled_recurrence() {
        // One scalar parameter, g = 1, defaults beta1 = 0.9, beta2 = 0.999.
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::scalar(0.5)).unwrap();
        let cfg = AdamConfig { lr: 1e-2, weight_decay: 0.0, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg.clone(), vec![id], &store).unwrap();
        store.accumulate_grad(id, &Tensor::scalar(1.0));
        adam.step(&mut store);

        let g = 1.0;
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.999) * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(1));
        let v_hat = v / (1.0 - 0.999f64.powi(1));
        let expected = 0.5 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((store.value(id).scalar_value() - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_adds_coupled_l2_term() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::scalar(2.0)).unwrap();
        let cfg = AdamConfig { lr: 1e-3, weight_decay: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg.clone(), vec![id], &store).unwrap();
        store.zero_grads();
        adam.step(&mut store);
        // Effective gradient is wd * p = 0.2; bias-corrected Adam moves by lr
        // in the gradient direction on the first step.
        let g = 0.1 * 2.0;
        let m_hat = g;
        let v_hat = g * g;
        let expected = 2.0 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((store.value(id).scalar_value() - expected).abs() < 1e-12);
    }

    /// Quadratic loss 0.5 * sum(w^2): analytic gradient w, checked to be
    /// far below the 1e-7 bar.
    #[test]
    fn fd_check_quadratic_is_tight() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::row_from(vec![0.3, -1.2, 2.0, 0.7])).unwrap();
        let mut target = |s: &ParameterStore| {
            let mut g = Graph::new();
            let w = g.param_leaf(id, s.value(id).clone(), true);
            let sq = g.mul(w, w);
            let sum = g.sum_all(sq);
            let loss = g.scale(sum, 0.5);
            let grads = g.backward(loss)?;
            Ok((g.value(loss).scalar_value(), grads.into_param_grads()))
        };
        let coords = plan_coords(&store, &[id], 8);
        let err = finite_difference_check(&mut store, &mut target, &coords, 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn fd_check_constant_loss_is_exactly_zero() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::row_from(vec![1.0, 2.0])).unwrap();
        let mut target = |_s: &ParameterStore| Ok((3.25, Vec::new()));
        let coords = plan_coords(&store, &[id], 4);
        let err = finite_difference_check(&mut store, &mut target, &coords, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_check_surfaces_non_finite_loss() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut target = |_s: &ParameterStore| Ok((f64::NAN, Vec::new()));
        let coords = plan_coords(&store, &[id], 1);
        let res = finite_difference_check(&mut store, &mut target, &coords, 1e-5);
        assert!(matches!(res, Err(Error::Numerical(_))));
    }

    #[test]
    fn linear_map_gradient_matches_fd_closely() {
        // loss = 0.5 * ||W x - y||^2 on a 3x3 case; bar is 1e-6.
        let mut store = ParameterStore::new();
        let id = store
            .add("w", Tensor::from_vec(3, 3, vec![0.2, -0.5, 1.0, 0.7, 0.1, -0.3, 0.4, 0.9, -0.8]).unwrap())
            .unwrap();
        let x = Tensor::row_from(vec![0.5, -1.0, 2.0]);
        let y = Tensor::row_from(vec![0.1, 0.2, -0.4]);
        let mut target = move |s: &ParameterStore| {
            let mut g = Graph::new();
            let w = g.param_leaf(id, s.value(id).clone(), true);
            let xc = g.constant(x.clone());
            let yc = g.constant(y.clone());
            let wx = g.matmul_nt(xc, w);
            let d = g.sub(wx, yc);
            let sq = g.mul(d, d);
            let sum = g.sum_all(sq);
            let loss = g.scale(sum, 0.5);
            let grads = g.backward(loss)?;
            Ok((g.value(loss).scalar_value(), grads.into_param_grads()))
        };
        let coords: Vec<FdCoord> = (0..9).map(|i| FdCoord { id, index: i }).collect();
        let err = finite_difference_check(&mut store, &mut target, &coords, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn sum_loss_gives_all_ones_gradient_and_unused_param_zero() {
        let mut store = ParameterStore::new();
        let used = store.add("used", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let unused = store.add("unused", Tensor::row_from(vec![5.0, 6.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param_leaf(used, store.value(used).clone(), true);
        let loss = g.sum_all(w);
        let grads = g.backward(loss).unwrap();
        store.zero_grads();
        for (pid, gt) in grads.into_param_grads() {
            store.accumulate_grad(pid, &gt);
        }
        assert!(store.grad(used).data().iter().all(|v| *v == 1.0));
        assert!(store.grad(unused).data().iter().all(|v| *v == 0.0));
    }
}
