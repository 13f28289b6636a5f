//! The dense error regressor: two untied UNet encoders (MRI, iUS), channel
//! concatenation, Swin-UNETR, output activation.

mod config;
mod params;
mod swin;
mod swin_unetr;
mod unet;

use crate::autograd::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::NetError;

pub use config::{ModelConfig, OutputActivation, MLP_RATIO, SWIN_STAGES};
pub use params::{Bound, Init, ParamSpec, ParamStore};
pub use swin::{effective_window, merge_index, relative_position_index, BlockPlan};
pub use swin_unetr::ENCODER_PREFIX;

pub const ENCODER_MRI: &str = "encoder_mri";
pub const ENCODER_IUS: &str = "encoder_ius";

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorNet {
    cfg: ModelConfig,
}

impl ErrorNet {
    pub fn new(cfg: ModelConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        Ok(ErrorNet { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Every parameter in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut r = params::Registry::default();
        let c = self.cfg.unet_feature_channels;
        unet::register(&mut r, ENCODER_MRI, c, self.cfg.unet_levels);
        unet::register(&mut r, ENCODER_IUS, c, self.cfg.unet_levels);
        swin_unetr::register(&mut r, &self.cfg);
        r.specs
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        ParamStore::initialize(&self.param_specs(), seed)
    }

    /// Key set and shapes of `params` must match this model exactly.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<(), NetError> {
        let specs = self.param_specs();
        for s in &specs {
            match params.get(&s.name) {
                None => return Err(NetError::KeyMismatch(format!("missing parameter {}", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(NetError::ShapeMismatch { name: s.name.clone(), expected: s.shape.clone(), found: t.shape().to_vec() })
                }
                _ => {}
            }
        }
        if params.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = params.names().iter().find(|n| !known.contains(n.as_str())).cloned().unwrap_or_default();
            return Err(NetError::KeyMismatch(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    fn check_input(&self, what: &str, shape: &[usize]) -> Result<(), NetError> {
        let p = self.cfg.patch_size;
        let ok = matches!(shape, [a, b, c] if [*a, *b, *c] == [p; 3]) || matches!(shape, [1, a, b, c] if [*a, *b, *c] == [p; 3]);
        if ok {
            Ok(())
        } else {
            Err(NetError::Shape(format!("{what} patch has shape {shape:?}, expected [{p}, {p}, {p}]")))
        }
    }

    /// Predicted error map `[1, P, P, P]` for one MRI/iUS patch pair.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, mri: &Var<T>, ius: &Var<T>) -> Result<Var<T>, NetError> {
        self.check_input("MRI", mri.shape())?;
        self.check_input("iUS", ius.shape())?;
        let n = self.cfg.patch_size;
        let vol = |v: &Var<T>| if v.shape().len() == 3 { tape.reshape(v, vec![1, n, n, n]) } else { v.clone() };
        let levels = self.cfg.unet_levels;
        let fm = unet::forward(tape, p, ENCODER_MRI, levels, &vol(mri));
        let fi = unet::forward(tape, p, ENCODER_IUS, levels, &vol(ius));
        let fused = tape.concat0(&[&fm, &fi]);
        let logits = swin_unetr::forward(tape, p, &self.cfg, &fused);
        Ok(match self.cfg.output_activation {
            OutputActivation::Softplus => tape.softplus(&logits),
            OutputActivation::Linear => logits,
        })
    }

    /// Inference on flat `P³` arrays (x fastest); returns a flat `P³` map.
    pub fn predict(&self, params: &ParamStore<f32>, mri: &[f32], ius: &[f32]) -> Result<Vec<f32>, NetError> {
        let n = self.cfg.patch_size;
        let len = n * n * n;
        if mri.len() != len || ius.len() != len {
            return Err(NetError::Shape(format!("patches hold {} and {} values, expected {len}", mri.len(), ius.len())));
        }
        let tape = Tape::no_grad();
        let bound = params.bind(&tape);
        let m = tape.constant(Tensor::new(vec![1, n, n, n], mri.to_vec()));
        let i = tape.constant(Tensor::new(vec![1, n, n, n], ius.to_vec()));
        Ok(self.forward(&tape, &bound, &m, &i)?.into_tensor().into_data())
    }
}
