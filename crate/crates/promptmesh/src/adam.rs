//! AdamW with decoupled weight decay and per-parameter learning rates.

use crate::archive::Archive;
use crate::error::Result;
use crate::nn::ParamStore;
use crate::scalar::{s, Scalar};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

pub struct AdamW<S: Scalar> {
    cfg: AdamConfig,
    m: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>, cfg: AdamConfig) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Array2::zeros(p.dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` pairs with parameter id `i`; `None` means no
    /// gradient reached that parameter this step (its moments still decay).
    /// `lr_of` resolves the learning rate from the parameter name, enabling
    /// the per-module rates used in training. Weight decay applies only to
    /// `.w` matrices, not biases, norms, or learned tokens.
    pub fn update(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Option<Array2<S>>],
        lr_of: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let b1 = s::<S>(self.cfg.beta1);
        let b2 = s::<S>(self.cfg.beta2);
        let eps = s::<S>(self.cfg.eps);
        let bc1 = s::<S>(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = s::<S>(1.0 - self.cfg.beta2.powi(self.step as i32));
        for id in 0..store.len() {
            let name = store.name(id).to_owned();
            let lr = s::<S>(lr_of(&name));
            let zero;
            let grad = match &grads[id] {
                Some(gv) => gv,
                None => {
                    zero = Array2::zeros(store.value(id).dim());
                    &zero
                }
            };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|mm, &gg| {
                *mm = b1 * *mm + (S::one() - b1) * gg;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|vv, &gg| {
                *vv = b2 * *vv + (S::one() - b2) * gg * gg;
            });
            let decay = if name.ends_with(".w") {
                s::<S>(self.cfg.weight_decay)
            } else {
                S::zero()
            };
            let mut p = store.value(id).to_owned();
            ndarray::Zip::from(&mut p)
                .and(&*m)
                .and(&*v)
                .for_each(|pp, &mm, &vv| {
                    let mhat = mm / bc1;
                    let vhat = vv / bc2;
                    *pp = *pp - lr * (mhat / (vhat.sqrt() + eps) + decay * *pp);
                });
            store.set(id, p);
        }
    }

    pub fn write_archive(&self, arc: &mut Archive, store: &ParamStore<S>) {
        for (id, (name, _)) in store.iter().enumerate() {
            arc.set_arr2(format!("opt/m/{name}"), &self.m[id]);
            arc.set_arr2(format!("opt/v/{name}"), &self.v[id]);
        }
        arc.set_i64("opt/step", self.step as i64);
    }

    pub fn read_archive(&mut self, arc: &Archive, store: &ParamStore<S>) -> Result<()> {
        for (id, (name, _)) in store.iter().enumerate() {
            self.m[id] = arc.get_arr2::<S>(&format!("opt/m/{name}"))?;
            self.v[id] = arc.get_arr2::<S>(&format!("opt/v/{name}"))?;
        }
        self.step = arc.get_i64("opt/step")? as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// AdamW on a convex quadratic reaches the minimum.
    #[test]
    fn converges_on_quadratic() {
        let mut ps = ParamStore::<f64>::new(0);
        let id = ps.register("x.w", array![[4.0, -3.0]]);
        let mut opt = AdamW::new(
            &ps,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        for _ in 0..2000 {
            let p = ps.value(id).to_owned();
            let grad = p.mapv(|x| 2.0 * (x - 1.0)); // d/dx (x-1)^2
            opt.update(&mut ps, &[Some(grad)], |_| 0.05);
        }
        let p = ps.value(id);
        assert!((p[(0, 0)] - 1.0).abs() < 1e-3);
        assert!((p[(0, 1)] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn state_round_trips_through_archive() {
        let mut ps = ParamStore::<f32>::new(1);
        let id = ps.register("a.w", array![[1.0f32, 2.0]]);
        let mut opt = AdamW::new(&ps, AdamConfig::default());
        opt.update(&mut ps, &[Some(array![[0.1f32, -0.2]])], |_| 1e-2);
        let mut arc = Archive::new();
        opt.write_archive(&mut arc, &ps);
        let mut opt2 = AdamW::new(&ps, AdamConfig::default());
        opt2.read_archive(&arc, &ps).unwrap();
        assert_eq!(opt2.step, 1);
        assert_eq!(opt.m[id], opt2.m[id]);
        assert_eq!(opt.v[id], opt2.v[id]);
    }
}
