use rand::Rng;

use super::coupling::{AffineCoupling, MaskKind};
use super::mask::Parity;
use super::subnet::SubnetKind;
use super::{FlowOutput, FlowTransform};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// One resolution level of a fractal block.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSpec {
    pub block: usize,
    pub steps: usize,
    pub subnet: SubnetKind,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct FractalLevel<T: Real> {
    block: usize,
    steps: Vec<AffineCoupling<T>>,
}

impl<T: Real> FractalLevel<T> {
    pub fn block(&self) -> usize {
        self.block
    }

    pub fn steps(&self) -> &[AffineCoupling<T>] {
        &self.steps
    }
}

/// Multi-resolution coupling block. At each level the image is cut into
/// non-overlapping `b×b` tiles and every tile goes through the same stack of
/// couplings, so levels are block-diagonal and parameters are shared across
/// tiles.
#[derive(Clone, Debug)]
pub struct FractalBlock<T: Real> {
    shape: [usize; 3],
    levels: Vec<FractalLevel<T>>,
}

/// Checks a descending block schedule against a `C×H×W` input. The first
/// entry must equal `min(H, W)` and divide both sides; each later entry must
/// divide its predecessor.
pub fn validate_schedule(schedule: &[usize], [_, h, w]: [usize; 3]) -> Result<()> {
    let field = "model.fractal_schedule";
    let first = *schedule
        .first()
        .ok_or_else(|| Error::config(field, "schedule is empty"))?;
    if first != h.min(w) || h % first != 0 || w % first != 0 {
        return Err(Error::config(
            field,
            format!("first block size {first} must equal min(H, W) and divide {h}×{w}"),
        ));
    }
    for pair in schedule.windows(2) {
        if pair[1] == 0 || pair[1] >= pair[0] || pair[0] % pair[1] != 0 {
            return Err(Error::config(
                field,
                format!("block size {} does not strictly divide {}", pair[1], pair[0]),
            ));
        }
    }
    Ok(())
}

impl<T: Real> FractalBlock<T> {
    pub fn new<R: Rng + ?Sized>(shape: [usize; 3], levels: &[LevelSpec], clamp: f64, rng: &mut R) -> Result<Self> {
        let schedule: Vec<usize> = levels.iter().map(|l| l.block).collect();
        validate_schedule(&schedule, shape)?;
        let c = shape[0];
        let mut built = Vec::with_capacity(levels.len());
        for spec in levels {
            let b = spec.block;
            let kind = if b == 1 && c >= 2 {
                MaskKind::Channel
            } else {
                MaskKind::Checkerboard
            };
            let steps = (0..spec.steps)
                .map(|i| {
                    AffineCoupling::with_mask_kind(
                        [c, b, b],
                        kind,
                        Parity::alternating(i),
                        spec.subnet,
                        spec.width,
                        clamp,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            built.push(FractalLevel { block: b, steps });
        }
        Ok(FractalBlock { shape, levels: built })
    }

    /// Same subnet, width and step count at every level.
    pub fn uniform<R: Rng + ?Sized>(
        shape: [usize; 3],
        schedule: &[usize],
        steps: usize,
        subnet: SubnetKind,
        width: usize,
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let specs: Vec<LevelSpec> = schedule
            .iter()
            .map(|&block| LevelSpec {
                block,
                steps,
                subnet,
                width,
            })
            .collect();
        Self::new(shape, &specs, clamp, rng)
    }

    pub fn levels(&self) -> &[FractalLevel<T>] {
        &self.levels
    }

    pub fn schedule(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.block).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.shape {
            return Err(Error::shape(format!(
                "fractal block expects N×{:?}, got {shape:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// `N×C×H×W → (N·nh·nw)×C×b×b`, tiles in row-major order per sample.
    fn tile<'t>(&self, x: Var<'t, T>, b: usize) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (n, c, nh, nw) = (s[0], s[1], s[2] / b, s[3] / b);
        if nh * nw == 1 {
            return Ok(x);
        }
        x.reshape(&[n, c, nh, b, nw, b])?
            .transpose(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[n * nh * nw, c, b, b])
    }

    fn untile<'t>(&self, t: Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
        let [c, h, w] = self.shape;
        let b = t.shape()[2];
        let (nh, nw) = (h / b, w / b);
        if nh * nw == 1 {
            return Ok(t);
        }
        t.reshape(&[n, nh, nw, c, b, b])?
            .transpose(&[0, 3, 1, 4, 2, 5])?
            .reshape(&[n, c, h, w])
    }
}

impl<T: Real> FlowTransform<T> for FractalBlock<T> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<FlowOutput<'t, T>> {
        let s = x.shape();
        self.check_input(&s)?;
        let n = s[0];
        let mut logdet = tape.constant(Tensor::zeros(&[n]));
        let mut states = Vec::with_capacity(self.levels.len());
        let mut cur = x;
        for level in &self.levels {
            let mut tiles = self.tile(cur, level.block)?;
            let tiles_per_sample = tiles.shape()[0] / n;
            for step in &level.steps {
                let out = step.forward(tape, tiles)?;
                tiles = out.y;
                let ld = out.logdet.reshape(&[n, tiles_per_sample])?.sum(&[1])?.reshape(&[n])?;
                logdet = logdet.add(ld)?;
            }
            cur = self.untile(tiles, n)?;
            states.push(cur);
        }
        Ok(FlowOutput { y: cur, logdet, states })
    }

    fn inverse<'t>(&self, tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = y.shape();
        self.check_input(&s)?;
        let n = s[0];
        let mut cur = y;
        for level in self.levels.iter().rev() {
            let mut tiles = self.tile(cur, level.block)?;
            for step in level.steps.iter().rev() {
                tiles = step.inverse(tape, tiles)?;
            }
            cur = self.untile(tiles, n)?;
        }
        Ok(cur)
    }

    fn out_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if input != self.shape {
            return Err(Error::config(
                "model.fractal_schedule",
                format!("fractal block built for {:?} given {input:?}", self.shape),
            ));
        }
        Ok(input)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (li, level) in self.levels.iter().enumerate() {
            for (si, step) in level.steps.iter().enumerate() {
                out.extend(step.named_params(&format!("{prefix}.level{li}.step{si}")));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.levels
            .iter_mut()
            .flat_map(|l| l.steps.iter_mut())
            .flat_map(|s| s.params_mut())
            .collect()
    }
}
