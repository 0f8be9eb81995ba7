use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::VideoShape;

/// Which auxiliary tensor, if any, is concatenated channel-wise to the
/// noisy input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CondMode {
    None,
    FirstFrame,
    Edge,
}

impl fmt::Display for CondMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CondMode::None => "none",
            CondMode::FirstFrame => "first_frame",
            CondMode::Edge => "edge",
        })
    }
}

impl FromStr for CondMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CondMode::None),
            "first_frame" => Ok(CondMode::FirstFrame),
            "edge" => Ok(CondMode::Edge),
            _ => Err(Error::invalid(format!("unknown conditioning mode '{s}'"))),
        }
    }
}

/// Everything needed to rebuild a denoiser network from a flat parameter blob.
///
/// Two families share this descriptor:
///
/// * residual MLP (`energy = false`): `width`-wide hidden state, `blocks`
///   residual blocks, each with its own projection of the time features;
/// * energy network (`energy = true`, `blocks = 0`):
///   `E(x) = ½κ(t)‖x‖² + Σ_j v_j·softplus(z_j)` with
///   `z = x·W + b + time + label (+ aux)`; its ε-prediction is `∇ₓE`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureDescriptor {
    pub shape: VideoShape,
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub vocab: usize,
    pub cond_mode: CondMode,
    pub energy: bool,
    /// Typical scale of clean data. When set, the MLP sees `x` rescaled to
    /// unit variance and predicts a residual on top of the Gaussian-optimal
    /// ε, scaled down with the noise level. Without it the low-noise end of
    /// the schedule is learned poorly.
    pub data_std: Option<f64>,
}

/// One named tensor in the parameter blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter blob layout, in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    slots: Vec<TensorSlot>,
    total: usize,
}

impl Layout {
    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> &TensorSlot {
        self.slots
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no tensor '{name}' in layout"))
    }
}

impl ArchitectureDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.time_dim == 0 {
            return Err(Error::invalid("width and time_dim must be positive"));
        }
        if self.vocab == 0 {
            return Err(Error::invalid("vocabulary size must be at least 1"));
        }
        if self.energy && self.blocks != 0 {
            return Err(Error::invalid("energy networks have no residual blocks"));
        }
        if let Some(sd) = self.data_std {
            if self.energy {
                return Err(Error::invalid("energy networks take no data_std"));
            }
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::invalid(format!("data_std must be positive, got {sd}")));
            }
        }
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        self.shape.numel()
    }

    /// Length of the auxiliary tensor after expansion to clip size.
    pub fn aux_dim(&self) -> usize {
        match self.cond_mode {
            CondMode::None => 0,
            CondMode::FirstFrame | CondMode::Edge => self.shape.numel(),
        }
    }

    /// Input width of the MLP: noisy clip plus channel-concatenated aux.
    pub fn input_dim(&self) -> usize {
        self.data_dim() + self.aux_dim()
    }

    /// The layout, in storage order:
    ///
    /// MLP: `in.w, in.b, time.w, label.emb, [b{k}.time.w, b{k}.w1, b{k}.b1,
    /// b{k}.w2, b{k}.b2]*, out.w, out.b`.
    ///
    /// Energy: `x.w, [cond.w], b, time.w, label.emb, v, kappa.w, kappa.b`.
    ///
    /// Weight matrices are stored row-major as `fan_in × fan_out`.
    pub fn layout(&self) -> Layout {
        let (d, w, dt, v) = (self.data_dim(), self.width, self.time_dim, self.vocab + 1);
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        if self.energy {
            shapes.push(("x.w".into(), d, w));
            if self.aux_dim() > 0 {
                shapes.push(("cond.w".into(), self.aux_dim(), w));
            }
            shapes.push(("b".into(), 1, w));
            shapes.push(("time.w".into(), dt, w));
            shapes.push(("label.emb".into(), v, w));
            shapes.push(("v".into(), 1, w));
            shapes.push(("kappa.w".into(), dt, 1));
            shapes.push(("kappa.b".into(), 1, 1));
        } else {
            shapes.push(("in.w".into(), self.input_dim(), w));
            shapes.push(("in.b".into(), 1, w));
            shapes.push(("time.w".into(), dt, w));
            shapes.push(("label.emb".into(), v, w));
            for k in 0..self.blocks {
                shapes.push((format!("b{k}.time.w"), dt, w));
                shapes.push((format!("b{k}.w1"), w, w));
                shapes.push((format!("b{k}.b1"), 1, w));
                shapes.push((format!("b{k}.w2"), w, w));
                shapes.push((format!("b{k}.b2"), 1, w));
            }
            shapes.push(("out.w".into(), w, d));
            shapes.push(("out.b".into(), 1, d));
        }
        let mut offset = 0;
        let slots = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let s = TensorSlot {
                    name,
                    rows,
                    cols,
                    offset,
                };
                offset += rows * cols;
                s
            })
            .collect();
        Layout { slots, total: offset }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, a, w, dt, v) = (
            self.data_dim(),
            self.aux_dim(),
            self.width,
            self.time_dim,
            self.vocab + 1,
        );
        if self.energy {
            d * w + a * w + w + dt * w + v * w + w + dt + 1
        } else {
            (d + a) * w + w + dt * w + v * w + self.blocks * (dt * w + 2 * w * w + 2 * w) + w * d + d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(width: usize, blocks: usize, mode: CondMode) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            shape: VideoShape::new(2, 4, 4, 1).unwrap(),
            width,
            blocks,
            time_dim: 8,
            vocab: 3,
            cond_mode: mode,
            energy: false,
            data_std: None,
        }
    }

    #[test]
    fn param_count_matches_layout() {
        for mode in [CondMode::None, CondMode::FirstFrame, CondMode::Edge] {
            for blocks in 0..3 {
                let d = mlp(5, blocks, mode);
                assert_eq!(d.layout().total(), d.param_count());
                let e = ArchitectureDescriptor {
                    energy: true,
                    blocks: 0,
                    ..d.clone()
                };
                assert_eq!(e.layout().total(), e.param_count());
            }
        }
    }

    #[test]
    fn validation() {
        assert!(mlp(0, 1, CondMode::None).validate().is_err());
        let mut d = mlp(4, 1, CondMode::None);
        d.vocab = 0;
        assert!(d.validate().is_err());
        let e = ArchitectureDescriptor {
            energy: true,
            ..mlp(4, 1, CondMode::None)
        };
        assert!(e.validate().is_err());
    }

    #[test]
    fn mode_roundtrip() {
        for m in [CondMode::None, CondMode::FirstFrame, CondMode::Edge] {
            assert_eq!(m.to_string().parse::<CondMode>().unwrap(), m);
        }
    }
}
