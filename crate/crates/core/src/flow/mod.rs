//! Invertible transforms with exact log-determinants.

mod coupling;
mod fractal;
mod mask;
mod mix;
mod squeeze;
mod subnet;

pub use coupling::{AffineCoupling, MaskKind, DEFAULT_CLAMP};
pub use fractal::{validate_schedule, FractalBlock, FractalLevel, LevelSpec};
pub use mask::{default_mask, make_channel_mask, make_checkerboard_mask, Parity};
pub use mix::{Mix1x1, MAX_CONDITION};
pub use squeeze::Squeeze;
pub use subnet::{ConvNet, Mlp, Subnet, SubnetKind};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Result of a forward pass: output, per-sample log-det `[N]`, and any
/// internal states the transform exposes (fractal levels).
pub struct FlowOutput<'t, T: Real> {
    pub y: Var<'t, T>,
    pub logdet: Var<'t, T>,
    pub states: Vec<Var<'t, T>>,
}

impl<'t, T: Real> FlowOutput<'t, T> {
    pub fn single(y: Var<'t, T>, logdet: Var<'t, T>) -> Self {
        FlowOutput {
            y,
            logdet,
            states: Vec::new(),
        }
    }
}

pub trait FlowTransform<T: Real> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<FlowOutput<'t, T>>;
    fn inverse<'t>(&self, tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>>;
    /// Per-sample output shape for a per-sample input shape.
    fn out_shape(&self, input: [usize; 3]) -> Result<[usize; 3]>;
    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

// Layers live in a short vector built once, so variant size does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Layer<T: Real> {
    Coupling(AffineCoupling<T>),
    Squeeze(Squeeze),
    Mix(Mix1x1<T>),
    Fractal(FractalBlock<T>),
}

impl<T: Real> Layer<T> {
    fn inner(&self) -> &dyn FlowTransform<T> {
        match self {
            Layer::Coupling(l) => l,
            Layer::Squeeze(l) => l,
            Layer::Mix(l) => l,
            Layer::Fractal(l) => l,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn FlowTransform<T> {
        match self {
            Layer::Coupling(l) => l,
            Layer::Squeeze(l) => l,
            Layer::Mix(l) => l,
            Layer::Fractal(l) => l,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Coupling(_) => "coupling",
            Layer::Squeeze(_) => "squeeze",
            Layer::Mix(_) => "mix",
            Layer::Fractal(_) => "fractal",
        }
    }
}

impl<T: Real> FlowTransform<T> for Layer<T> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<FlowOutput<'t, T>> {
        self.inner().forward(tape, x)
    }

    fn inverse<'t>(&self, tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        self.inner().inverse(tape, y)
    }

    fn out_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.inner().out_shape(input)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.inner().named_params(prefix)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.inner_mut().params_mut()
    }
}

/// Output of a whole sequence. `intermediates` starts with the input and is
/// always in the input layout (squeezes are undone), so consecutive entries
/// can be compared directly.
pub struct SequenceOutput<'t, T: Real> {
    pub z: Var<'t, T>,
    pub logdet: Var<'t, T>,
    pub intermediates: Vec<Var<'t, T>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub record: bool,
    /// Treat every 1×1 mixing layer as the identity. Only meaningful for
    /// visualizing the coupling steps; densities are wrong in this mode.
    pub skip_mix: bool,
}

#[derive(Clone, Debug)]
pub struct FlowSequence<T: Real> {
    layers: Vec<Layer<T>>,
    input_shape: [usize; 3],
    output_shape: [usize; 3],
    record: bool,
}

impl<T: Real> FlowSequence<T> {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer<T>>, record: bool) -> Result<Self> {
        let mut shape = input_shape;
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .out_shape(shape)
                .map_err(|e| Error::config(format!("model.layers[{i}]"), format!("{} layer: {e}", layer.name())))?;
        }
        Ok(FlowSequence {
            layers,
            input_shape,
            output_shape: shape,
            record,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    pub fn records_intermediates(&self) -> bool {
        self.record
    }

    pub fn set_record(&mut self, record: bool) {
        self.record = record;
    }

    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        opts: ForwardOptions,
    ) -> Result<SequenceOutput<'t, T>> {
        let n = x.shape()[0];
        let mut logdet = tape.constant(Tensor::zeros(&[n]));
        let mut intermediates = Vec::new();
        if opts.record {
            intermediates.push(x);
        }
        let mut squeezes = 0usize;
        let mut cur = x;
        for layer in &self.layers {
            if opts.skip_mix && matches!(layer, Layer::Mix(_)) {
                continue;
            }
            let out = layer.forward(tape, cur)?;
            logdet = logdet.add(out.logdet)?;
            cur = out.y;
            match layer {
                Layer::Squeeze(_) => squeezes += 1,
                _ if opts.record => {
                    let states = if out.states.is_empty() { vec![cur] } else { out.states };
                    for s in states {
                        intermediates.push(canonical(s, squeezes)?);
                    }
                }
                _ => {}
            }
        }
        Ok(SequenceOutput {
            z: cur,
            logdet,
            intermediates,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<SequenceOutput<'t, T>> {
        self.forward_with(
            tape,
            x,
            ForwardOptions {
                record: self.record,
                skip_mix: false,
            },
        )
    }

    pub fn inverse<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut cur = z;
        for layer in self.layers.iter().rev() {
            cur = layer.inverse(tape, cur)?;
        }
        Ok(cur)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named_params(&format!("{prefix}.{i}.{}", l.name())))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

fn canonical<'t, T: Real>(mut v: Var<'t, T>, squeezes: usize) -> Result<Var<'t, T>> {
    for _ in 0..squeezes {
        v = Squeeze.undo(v)?;
    }
    Ok(v)
}
