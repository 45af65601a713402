//! Learnable state and the Adam optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fields::UVField;
use crate::geom::VertexOffsets;
use crate::shade::LightProbeSphere;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    VertexOffsets,
    OffsetField,
    ColorField,
    AlbedoField,
    RoughnessField,
    Probes,
}

impl ParamId {
    pub const ALL: [ParamId; 6] = [
        ParamId::VertexOffsets,
        ParamId::OffsetField,
        ParamId::ColorField,
        ParamId::AlbedoField,
        ParamId::RoughnessField,
        ParamId::Probes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::VertexOffsets => "vertex_offsets",
            ParamId::OffsetField => "offset_field",
            ParamId::ColorField => "color_field",
            ParamId::AlbedoField => "albedo_field",
            ParamId::RoughnessField => "roughness_field",
            ParamId::Probes => "probes",
        }
    }
}

/// Everything the optimizer can change.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub vertex_offsets: VertexOffsets,
    /// One channel, clamped to `±max_offset`.
    pub offset_field: UVField,
    pub color_field: UVField,
    pub albedo_field: UVField,
    pub roughness_field: UVField,
    pub probes: LightProbeSphere,
    pub max_offset: f64,
}

impl ModelState {
    pub fn values(&self, id: ParamId) -> &[f64] {
        match id {
            ParamId::VertexOffsets => &self.vertex_offsets.0,
            ParamId::OffsetField => &self.offset_field.data,
            ParamId::ColorField => &self.color_field.data,
            ParamId::AlbedoField => &self.albedo_field.data,
            ParamId::RoughnessField => &self.roughness_field.data,
            ParamId::Probes => &self.probes.radiance,
        }
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        match id {
            ParamId::VertexOffsets => &mut self.vertex_offsets.0,
            ParamId::OffsetField => &mut self.offset_field.data,
            ParamId::ColorField => &mut self.color_field.data,
            ParamId::AlbedoField => &mut self.albedo_field.data,
            ParamId::RoughnessField => &mut self.roughness_field.data,
            ParamId::Probes => &mut self.probes.radiance,
        }
    }

    /// Bring one parameter back into its feasible set.
    pub fn project(&mut self, id: ParamId) {
        match id {
            ParamId::VertexOffsets => self.vertex_offsets.clamp(self.max_offset),
            ParamId::OffsetField => self.offset_field.project(),
            ParamId::ColorField => self.color_field.project(),
            ParamId::AlbedoField => self.albedo_field.project(),
            ParamId::RoughnessField => self.roughness_field.project(),
            ParamId::Probes => self.probes.project(),
        }
    }
}

/// Gradient buffers keyed by parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads(pub BTreeMap<ParamId, Vec<f64>>);

impl Grads {
    pub fn new() -> Self {
        Grads::default()
    }

    /// Accumulate `g` into the buffer for `id`.
    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        match self.0.get_mut(&id) {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.0.insert(id, g.to_vec());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(&id).map(|v| v.as_slice())
    }

    /// Largest absolute component over all buffers.
    pub fn max_abs(&self) -> f64 {
        self.0.values().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub lr: f64,
    pub frozen: bool,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Model state plus per-parameter optimizer state and freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub state: ModelState,
    pub adam: AdamConfig,
    slots: BTreeMap<ParamId, AdamSlot>,
}

impl ParamSet {
    /// Every parameter starts trainable with learning rate `lr(id)`.
    pub fn new(state: ModelState, lr: impl Fn(ParamId) -> f64) -> Self {
        let slots = ParamId::ALL
            .iter()
            .map(|&id| {
                let n = state.values(id).len();
                (
                    id,
                    AdamSlot {
                        lr: lr(id),
                        frozen: false,
                        step: 0,
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        ParamSet {
            state,
            adam: AdamConfig::default(),
            slots,
        }
    }

    pub fn slot(&self, id: ParamId) -> &AdamSlot {
        &self.slots[&id]
    }

    pub fn set_lr(&mut self, id: ParamId, lr: f64) {
        self.slots.get_mut(&id).expect("all ids present").lr = lr;
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.slots.get_mut(&id).expect("all ids present").frozen = frozen;
    }

    /// Freeze everything except `trainable`.
    pub fn train_only(&mut self, trainable: &[ParamId]) {
        for id in ParamId::ALL {
            self.set_frozen(id, !trainable.contains(&id));
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.slots[&id].frozen
    }

    /// One Adam step on every unfrozen parameter that has a gradient buffer,
    /// followed by its projection. Frozen parameters are left untouched.
    pub fn adam_step(&mut self, grads: &Grads) -> Result<()> {
        for (&id, g) in &grads.0 {
            let n = self.state.values(id).len();
            if g.len() != n {
                return Err(Error::arg(format!("{} gradient has {} entries, parameter has {n}", id.name(), g.len())));
            }
        }
        let cfg = self.adam;
        for (&id, g) in &grads.0 {
            let slot = self.slots.get_mut(&id).expect("all ids present");
            if slot.frozen {
                continue;
            }
            slot.step += 1;
            let t = slot.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let values = self.state.values_mut(id);
            for i in 0..values.len() {
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = slot.m[i] / c1;
                let vh = slot.v[i] / c2;
                values[i] -= slot.lr * mh / (vh.sqrt() + cfg.eps);
            }
            self.state.project(id);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;

    fn state() -> ModelState {
        ModelState {
            vertex_offsets: VertexOffsets::zeros(3),
            offset_field: UVField::new(2, 2, &[0.0], Some((-0.1, 0.1)), 0).unwrap(),
            color_field: UVField::new(2, 2, &[0.5; 3], Some((0.0, 1.0)), 0).unwrap(),
            albedo_field: UVField::new(2, 2, &[0.5; 3], Some((0.0, 1.0)), 0).unwrap(),
            roughness_field: UVField::new(2, 2, &[0.5], Some((0.01, 1.0)), 0).unwrap(),
            probes: LightProbeSphere::uniform(2, 4, Vec3::repeat(0.01)).unwrap(),
            max_offset: 0.05,
        }
    }

    #[test]
    fn zero_grads_leave_values_and_count_steps() {
        let mut ps = ParamSet::new(state(), |_| 0.1);
        let before = ps.state.clone();
        let mut g = Grads::new();
        g.add(ParamId::ColorField, &[0.0; 12]);
        ps.adam_step(&g).unwrap();
        assert_eq!(ps.state, before);
        assert_eq!(ps.slot(ParamId::ColorField).step, 1);
        assert_eq!(ps.slot(ParamId::AlbedoField).step, 0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamSet::new(state(), |_| 0.1);
        let mut g = Grads::new();
        let mut one = vec![0.0; 3];
        one[0] = 1.0;
        g.add(ParamId::VertexOffsets, &one);
        ps.set_lr(ParamId::VertexOffsets, 0.01);
        ps.adam_step(&g).unwrap();
        let want = -0.01 / (1.0 + 1e-8);
        assert!((ps.state.vertex_offsets.0[0] - want).abs() < 1e-15);
        assert_eq!(ps.state.vertex_offsets.0[1], 0.0);
    }

    #[test]
    fn projections_hold_exactly() {
        let mut ps = ParamSet::new(state(), |_| 1.0);
        let mut g = Grads::new();
        g.add(ParamId::Probes, &[1.0; 24]);
        g.add(ParamId::OffsetField, &[-1.0; 4]);
        g.add(ParamId::VertexOffsets, &[1.0, -1.0, 0.0]);
        ps.adam_step(&g).unwrap();
        assert!(ps.state.probes.radiance.iter().all(|&v| v == 0.0));
        assert!(ps.state.offset_field.data.iter().all(|&v| v == 0.1));
        assert_eq!(ps.state.vertex_offsets.0, vec![-0.05, 0.05, 0.0]);
    }

    #[test]
    fn frozen_is_bitwise_unchanged() {
        let mut ps = ParamSet::new(state(), |_| 0.1);
        ps.train_only(&[ParamId::AlbedoField]);
        let before = ps.state.clone();
        let mut g = Grads::new();
        g.add(ParamId::ColorField, &[1.0; 12]);
        g.add(ParamId::AlbedoField, &[1.0; 12]);
        ps.adam_step(&g).unwrap();
        assert_eq!(ps.state.color_field, before.color_field);
        assert_ne!(ps.state.albedo_field, before.albedo_field);
        assert_eq!(ps.slot(ParamId::ColorField).step, 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = ParamSet::new(state(), |_| 0.1);
        let mut g = Grads::new();
        g.add(ParamId::Probes, &[1.0; 5]);
        assert!(ps.adam_step(&g).is_err());
    }
}
