//! Inverted dropout with counter-based, reproducible masks.
//!
//! A mask is a pure function of `(seed, step, site, element)`: the step is a
//! sequence number the model advances once per unrolled timestep, and the
//! site identifies which non-recurrent connection is being dropped. Masks at
//! one site therefore never depend on whether another site drew a mask.
//!
//! The generator hashes the key with the SplitMix64 finalizer and keeps the
//! top 53 bits as a uniform draw in `[0, 1)`.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout operator state for one training or evaluation context.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f64,
    mode: Mode,
    seed: u64,
    step: u64,
    draws: u64,
    trace: MaskTrace,
}

/// Number of mask applications per `(step, site)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskTrace {
    counts: BTreeMap<(u64, usize), u32>,
}

impl MaskTrace {
    pub fn count(&self, step: u64, site: usize) -> u32 {
        self.counts.get(&(step, site)).copied().unwrap_or(0)
    }

    /// Applications at `step` summed over all sites.
    pub fn count_at_step(&self, step: u64) -> u32 {
        self.counts.range((step, 0)..=(step, usize::MAX)).map(|(_, c)| c).sum()
    }

    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    fn record(&mut self, step: u64, site: usize) {
        *self.counts.entry((step, site)).or_default() += 1;
    }

    pub fn clear(&mut self) {
        self.counts.clear();
    }
}

impl Dropout {
    /// A dropout operator in training mode with drop probability `p`.
    pub fn train(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Dropout {
            p,
            mode: Mode::Train,
            seed,
            step: 0,
            draws: 0,
            trace: MaskTrace::default(),
        })
    }

    /// The identity operator used at evaluation time.
    pub fn eval() -> Self {
        Dropout {
            p: 0.0,
            mode: Mode::Eval,
            seed: 0,
            step: 0,
            draws: 0,
            trace: MaskTrace::default(),
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Current step counter; together with the seed it determines every mask.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Number of masks drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn trace(&self) -> &MaskTrace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut MaskTrace {
        &mut self.trace
    }

    /// Whether `apply` can change its input.
    pub fn is_active(&self) -> bool {
        self.mode == Mode::Train && self.p > 0.0
    }

    /// Moves to the next timestep. Eval mode never advances.
    pub fn advance(&mut self) {
        if self.mode == Mode::Train {
            self.step += 1;
        }
    }

    /// Draws the mask for `site` at the current step: each entry is 0 with
    /// probability `p` and `1 / (1 - p)` otherwise.
    pub fn draw_mask(&mut self, width: usize, site: usize) -> Result<Vec<f64>> {
        if self.mode == Mode::Eval {
            return Err(Error::Usage("dropout masks cannot be drawn in eval mode".into()));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1)", self.p)));
        }
        if width == 0 {
            return Err(Error::Usage("mask width must be positive".into()));
        }
        self.draws += 1;
        Ok(mask_values(self.seed, self.step, site, width, self.p))
    }

    /// Applies dropout to `x` for connection `site` at the current step.
    ///
    /// In eval mode, or with `p == 0`, this returns `x` itself and records
    /// nothing on the tape.
    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var, site: usize) -> Result<Var> {
        if !self.is_active() {
            return Ok(x);
        }
        let mask = self.draw_mask(tape.value(x).len(), site)?;
        self.trace.record(self.step, site);
        tape.mask(x, Rc::from(mask))
    }
}

/// Mask entries for a `(seed, step, site)` key.
pub fn mask_values(seed: u64, step: u64, site: usize, width: usize, p: f64) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; width];
    }
    let keep = 1.0 / (1.0 - p);
    let key = mix(mix(mix(seed) ^ step) ^ (site as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    (0..width as u64)
        .map(|i| if unit(mix(key.wrapping_add(i))) < p { 0.0 } else { keep })
        .collect()
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_probability_mask_is_all_ones() {
        let mut d = Dropout::train(0.0, 9).unwrap();
        assert!(d.draw_mask(17, 0).unwrap().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn half_probability_drops_about_half() {
        let mut d = Dropout::train(0.5, 1234).unwrap();
        let m = d.draw_mask(1_000_000, 0).unwrap();
        let zeros = m.iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((0.498..=0.502).contains(&zeros), "{zeros}");
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn masks_are_reproducible_and_site_separated() {
        let mut a = Dropout::train(0.3, 77).unwrap();
        let mut b = Dropout::train(0.3, 77).unwrap();
        assert_eq!(a.draw_mask(64, 1).unwrap(), b.draw_mask(64, 1).unwrap());
        // Drawing an extra mask at another site does not perturb site 1.
        let _ = a.draw_mask(64, 0).unwrap();
        assert_eq!(a.draw_mask(64, 1).unwrap(), b.draw_mask(64, 1).unwrap());
        a.advance();
        assert_ne!(a.draw_mask(64, 1).unwrap(), b.draw_mask(64, 1).unwrap());
        assert_ne!(b.draw_mask(64, 1).unwrap(), b.draw_mask(64, 2).unwrap());
    }

    #[test]
    fn invalid_probability_and_eval_draw_are_rejected() {
        assert!(matches!(Dropout::train(1.0, 0), Err(Error::Config(_))));
        assert!(matches!(Dropout::train(-0.1, 0), Err(Error::Config(_))));
        let mut e = Dropout::eval();
        assert!(matches!(e.draw_mask(4, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn eval_apply_is_identity_and_draws_nothing() {
        let x = Tensor::vector(vec![1.5, -2.0, 3.25]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let mut d = Dropout::eval();
        let y = d.apply(&mut tape, v, 0).unwrap();
        assert_eq!(y, v);
        d.advance();
        assert_eq!((d.draws(), d.step(), d.trace().total()), (0, 0, 0));
    }

    #[test]
    fn mask_gradient_equals_mask() {
        let x = Tensor::vector(vec![0.5; 32]).with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let mut d = Dropout::train(0.5, 5).unwrap();
        let y = d.apply(&mut tape, v, 2).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let expected = mask_values(5, 0, 2, 32, 0.5);
        assert_eq!(tape.grad(v).unwrap(), expected.as_slice());
        assert_eq!(d.trace().count(0, 2), 1);
    }

    #[test]
    fn inverted_scaling_preserves_expectation() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let draws = 100_000u64;
        let mut sums = [0.0; 4];
        for step in 0..draws {
            let m = mask_values(42, step, 0, 4, 0.5);
            for i in 0..4 {
                sums[i] += x[i] * m[i];
            }
        }
        for i in 0..4 {
            let mean = sums[i] / draws as f64;
            assert!((mean - x[i]).abs() <= 0.01 * x[i].abs(), "{mean} vs {}", x[i]);
        }
    }
}
