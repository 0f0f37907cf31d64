//! Reverse-mode differentiation over a chain of flow blocks.

use std::fmt;

use crate::error::{Error, Result};
use crate::flow::{FlowBlock, Phase};
use crate::pyramid::PyramidStack;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TapeMode {
    /// Keep every block's local cache from the forward sweep.
    Standard,
    /// Keep only the output; rebuild each block input by inversion during backward.
    Reversible,
}

impl TapeMode {
    pub fn name(self) -> &'static str {
        match self {
            TapeMode::Standard => "standard",
            TapeMode::Reversible => "reversible",
        }
    }
}

impl fmt::Display for TapeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named parameter gradients in block order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet<T> {
    entries: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<T>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, g)) => *g = grad,
            None => self.entries.push((name, grad)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<T>)> {
        self.entries.iter_mut().map(|(n, g)| (n.as_str(), g))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Euclidean norm over all entries, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for (_, g) in &mut self.entries {
            for v in g.iter_mut() {
                *v *= k;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

/// High-water activation accounting for one forward/backward cycle.
///
/// A buffer is one retained activation set: a full pyramid snapshot or one
/// block's local cache. Parameters and gradients are not counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryReport {
    pub mode: TapeMode,
    pub block_count: usize,
    pub peak_buffers: usize,
    pub bytes: usize,
}

impl MemoryReport {
    pub const CSV_HEADER: &'static str = "mode,depth,peak_buffers,bytes";

    pub fn csv_line(&self, depth: usize) -> String {
        format!("{},{},{},{}", self.mode, depth, self.peak_buffers, self.bytes)
    }
}

/// Gradients of a scalar loss w.r.t. block parameters and the chain input.
#[derive(Clone, Debug)]
pub struct TapeGradients<T> {
    /// Named `block{i}.<param>`.
    pub params: GradientSet<T>,
    pub input: PyramidStack<T>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Meter {
    buffers: usize,
    bytes: usize,
    peak_buffers: usize,
    peak_bytes: usize,
}

impl Meter {
    fn hold(&mut self, bytes: usize) {
        self.buffers += 1;
        self.bytes += bytes;
        self.peak_buffers = self.peak_buffers.max(self.buffers);
        self.peak_bytes = self.peak_bytes.max(self.bytes);
    }

    fn release(&mut self, bytes: usize) {
        self.buffers -= 1;
        self.bytes -= bytes;
    }
}

enum Stored<T, C> {
    Empty,
    Standard { caches: Vec<C>, output: PyramidStack<T> },
    Reversible { output: PyramidStack<T> },
}

/// Forward/backward driver over a borrowed block chain.
///
/// Running statistics produced in training are committed to the blocks
/// during [`BlockTape::forward`] only; backward recomputation never touches them.
pub struct BlockTape<'a, T: Scalar, B: FlowBlock<T>> {
    blocks: &'a mut [B],
    mode: TapeMode,
    phase: Phase,
    stored: Stored<T, B::Cache>,
    meter: Meter,
}

impl<'a, T: Scalar, B: FlowBlock<T>> BlockTape<'a, T, B> {
    pub fn new(blocks: &'a mut [B], mode: TapeMode) -> Self {
        Self {
            blocks,
            mode,
            phase: Phase::Train,
            stored: Stored::Empty,
            meter: Meter::default(),
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn blocks(&self) -> &[B] {
        self.blocks
    }

    /// Apply every block in order; returns the output and the summed logdet.
    pub fn forward(&mut self, x: &PyramidStack<T>, phase: Phase) -> Result<(PyramidStack<T>, T)> {
        self.phase = phase;
        self.stored = Stored::Empty;
        self.meter = Meter::default();
        let keep = self.mode == TapeMode::Standard;
        let mut caches = Vec::new();
        let mut current = x.clone();
        let mut logdet = T::zero();
        self.meter.hold(current.bytes());
        for block in self.blocks.iter_mut() {
            let step = block.forward(&current, phase, keep)?;
            if let Some(stat) = &step.stat {
                block.commit_stat(stat)?;
            }
            logdet += step.logdet;
            // the output replaces the input snapshot
            self.meter.release(current.bytes());
            self.meter.hold(step.output.bytes());
            current = step.output;
            if let Some(cache) = step.cache {
                self.meter.hold(B::cache_bytes(&cache));
                caches.push(cache);
            }
        }
        self.stored = match self.mode {
            TapeMode::Standard => Stored::Standard {
                caches,
                output: current.clone(),
            },
            TapeMode::Reversible => Stored::Reversible {
                output: current.clone(),
            },
        };
        Ok((current, logdet))
    }

    /// Gradients for `loss_grad` w.r.t. the last forward output. Consumes the stored activations.
    pub fn backward(&mut self, loss_grad: &PyramidStack<T>) -> Result<TapeGradients<T>> {
        let stored = std::mem::replace(&mut self.stored, Stored::Empty);
        let mut grad = loss_grad.clone();
        let mut per_block: Vec<Vec<Vec<T>>> = Vec::with_capacity(self.blocks.len());
        match stored {
            Stored::Empty => {
                return Err(Error::State("backward called before forward".into()));
            }
            Stored::Standard { mut caches, output } => {
                output.check_same_shape(&grad)?;
                for block in self.blocks.iter().rev() {
                    let cache = caches.pop().ok_or_else(|| Error::State("tape cache underflow".into()))?;
                    per_block.push(block.backward(&cache, &mut grad)?);
                    self.meter.release(B::cache_bytes(&cache));
                }
                self.meter.release(output.bytes());
            }
            Stored::Reversible { output } => {
                output.check_same_shape(&grad)?;
                let mut z = output;
                for block in self.blocks.iter().rev() {
                    let x = block.inverse(&z, self.phase)?;
                    self.meter.hold(x.bytes());
                    let step = block.forward(&x, self.phase, true)?;
                    let cache = step
                        .cache
                        .ok_or_else(|| Error::State("block returned no cache".into()))?;
                    self.meter.hold(B::cache_bytes(&cache));
                    per_block.push(block.backward(&cache, &mut grad)?);
                    self.meter.release(B::cache_bytes(&cache));
                    self.meter.release(z.bytes());
                    z = x;
                }
                self.meter.release(z.bytes());
            }
        }
        per_block.reverse();
        let mut params = GradientSet::new();
        for (i, (block, grads)) in self.blocks.iter().zip(per_block).enumerate() {
            for (name, g) in block.param_names().into_iter().zip(grads) {
                params.insert(format!("block{i}.{name}"), g);
            }
        }
        Ok(TapeGradients { params, input: grad })
    }

    pub fn peak_memory_report(&self) -> MemoryReport {
        MemoryReport {
            mode: self.mode,
            block_count: self.blocks.len(),
            peak_buffers: self.meter.peak_buffers,
            bytes: self.meter.peak_bytes,
        }
    }
}
