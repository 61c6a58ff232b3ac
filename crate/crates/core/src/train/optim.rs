//! Decoupled-weight-decay adaptive-moment optimizer and EMA weight tracking.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD};

use crate::model::UDiT;
use crate::nn::{Gradients, Real};
use crate::train::checkpoint::NamedTensor;

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One optimizer step over every parameter with a gradient entry.
    pub fn update(&mut self, model: &mut UDiT<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.weight_decay);
        let eps = T::from_f64(ADAM_EPS);

        let m = &mut self.m;
        let v = &mut self.v;
        model.for_each_param_mut(&mut |name, mut w| {
            let Some(g) = grads.get(name) else { return };
            let m_t = m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v_t = v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m_t.zip_mut_with(g, |mv, gv| *mv = b1 * *mv + (one - b1) * *gv);
            v_t.zip_mut_with(g, |vv, gv| *vv = b2 * *vv + (one - b2) * *gv * *gv);
            for ((wv, mv), vv) in w.iter_mut().zip(m_t.iter()).zip(v_t.iter()) {
                let mhat = *mv / bias1;
                let vhat = *vv / bias2;
                *wv = *wv - lr * (mhat / (vhat.sqrt() + eps) + wd * *wv);
            }
        });
    }

    /// Serialize moment tensors (f32) plus the step counter.
    pub fn state_tensors(&self) -> (u64, Vec<NamedTensor>) {
        let mut tensors = Vec::new();
        for (name, arr) in &self.m {
            tensors.push(NamedTensor::from_view(&format!("{name}.m"), arr.view()));
        }
        for (name, arr) in &self.v {
            tensors.push(NamedTensor::from_view(&format!("{name}.v"), arr.view()));
        }
        (self.step, tensors)
    }

    /// Restore moments saved by [`AdamW::state_tensors`].
    pub fn restore(&mut self, step: u64, tensors: &[NamedTensor]) -> crate::Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for t in tensors {
            let (base, kind) = t
                .name
                .rsplit_once('.')
                .ok_or_else(|| crate::Error::Format(format!("optimizer tensor `{}`", t.name)))?;
            let arr = t.to_array::<T>();
            match kind {
                "m" => self.m.insert(base.to_string(), arr),
                "v" => self.v.insert(base.to_string(), arr),
                _ => {
                    return Err(crate::Error::Format(format!(
                        "optimizer tensor `{}` is neither .m nor .v",
                        t.name
                    )))
                }
            };
        }
        Ok(())
    }
}

/// Exponential moving average of model weights.
#[derive(Debug, Clone)]
pub struct Ema<T: Real> {
    pub decay: f64,
    shadow: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> Ema<T> {
    pub fn new(decay: f64) -> Self {
        Ema {
            decay,
            shadow: BTreeMap::new(),
        }
    }

    /// Fold one observation of a named tensor into the average.
    /// First observation initializes the shadow to the value itself.
    pub fn observe(&mut self, name: &str, value: ArrayViewD<'_, T>) {
        let d = T::from_f64(self.decay);
        let one = T::one();
        match self.shadow.get_mut(name) {
            Some(s) => s.zip_mut_with(&value, |sv, wv| *sv = d * *sv + (one - d) * *wv),
            None => {
                self.shadow.insert(name.to_string(), value.to_owned());
            }
        }
    }

    pub fn update_model(&mut self, model: &UDiT<T>) {
        model.for_each_param(&mut |name, view| self.observe(name, view));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.shadow.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.shadow.is_empty()
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        self.shadow
            .iter()
            .map(|(name, arr)| NamedTensor::from_view(name, arr.view()))
            .collect()
    }

    pub fn restore(&mut self, tensors: &[NamedTensor]) {
        self.shadow.clear();
        for t in tensors {
            self.shadow.insert(t.name.clone(), t.to_array::<T>());
        }
    }

    /// Overwrite model weights with the averaged ones.
    pub fn apply_to(&self, model: &mut UDiT<T>) -> crate::Result<()> {
        let mut missing = None;
        let shadow = &self.shadow;
        model.for_each_param_mut(&mut |name, mut w| match shadow.get(name) {
            Some(s) => w.zip_mut_with(s, |wv, sv| *wv = *sv),
            None => missing = Some(name.to_string()),
        });
        match missing {
            Some(name) => Err(crate::Error::Format(format!(
                "EMA table is missing parameter `{name}`"
            ))),
            None => Ok(()),
        }
    }
}
