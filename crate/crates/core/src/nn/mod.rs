//! A small reverse-mode layer library. Every layer's `forward` returns its
//! output together with a trace value, and `backward` consumes that trace,
//! so one network can be applied several times in a single step (the
//! generator's forward and cycle passes) with gradients accumulated into a
//! shared [`Gradients`] buffer.

pub mod conv;
pub mod layers;
pub mod norm;
pub mod optim;
pub mod params;

#[cfg(test)]
pub(crate) mod testing;

use std::sync::atomic::{AtomicU64, Ordering};

pub use conv::{
    ConditionedConv2d, ConditionedTrace, Conv2d, ConvGeometry, ConvTrace, ConvTranspose2d,
};
pub use layers::{global_avg_pool, global_avg_pool_backward, Activation, Linear};
pub use norm::{BatchNorm2d, InstanceNorm2d, NormTrace};
pub use optim::{Adam, AdamConfig, Sgd};
pub use params::{Gradients, Init, ParamId, ParamKind, ParamStore};

/// Counts forward passes. Cloning a model starts a fresh count.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        Self::default()
    }
}
