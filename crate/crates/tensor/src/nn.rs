//! Parameterized layers. A layer only holds [`ParamId`]s; values live in a
//! [`ParamStore`] so that frozen and trainable copies can share code.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Which store a forward pass reads from and whether its parameters train.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Bind { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Bind {
            store,
            trainable: false,
        }
    }

    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(self.store, id, self.trainable)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = cin * kernel.pow(3);
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel, kernel], fan_in, 3f32.sqrt(), rng);
        let bias = store.add_const(format!("{name}.bias"), &[cout], 0.0);
        Conv3d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    /// Zero weights and bias (used for residual outputs that should start as identity).
    pub fn zeroed(self, store: &mut ParamStore) -> Self {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
        self
    }

    pub fn forward(&self, g: &mut Graph, p: Bind, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        g.conv3d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, outp: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[outp, inp], inp, 3f32.sqrt(), rng);
        let bias = store.add_const(format!("{name}.bias"), &[outp], 0.0);
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: Bind, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels);
        let gamma = store.add_const(format!("{name}.gamma"), &[channels], 1.0);
        let beta = store.add_const(format!("{name}.beta"), &[channels], 0.0);
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, p: Bind, x: Var) -> Result<Var> {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}
