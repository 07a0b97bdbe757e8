//! Two-class cross-entropy, soft Dice, and their weighted sum.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Weights of the two loss terms and the Dice smoothing constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub dice_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            dice_smoothing: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if !ok(self.dice_smoothing) {
            return Err(Error::Config(format!(
                "dice smoothing must be non-negative, got {}",
                self.dice_smoothing
            )));
        }
        Ok(())
    }
}

/// Rejects masks with entries other than 0 and 1.
pub fn check_mask(y: &[u8]) -> Result<()> {
    match y.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Input(format!("mask value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// `[K, H, W]` logits as `[H·W, K]` rows, one per pixel in row-major order.
pub fn pixel_logits(logits: Var<'_>) -> Result<Var<'_>> {
    let shape = logits.shape();
    let &[k, h, w] = shape.as_slice() else {
        return Err(Error::Input(format!("logits {shape:?} are not [K, H, W]")));
    };
    logits.reshape(&[k, h * w])?.transpose()
}

/// Mean over pixels of `−log softmax(logits)[y]`, with `logits: [P, 2]`.
pub fn ce_loss<'t>(logits: Var<'t>, y: &[u8]) -> Result<Var<'t>> {
    check_mask(y)?;
    let targets: Vec<usize> = y.iter().map(|&v| v as usize).collect();
    logits.cross_entropy(&targets)
}

/// Class-1 probability per pixel, `[P, 2] → [P]`.
pub fn change_probability(logits: Var<'_>) -> Result<Var<'_>> {
    let p = logits.shape()[0];
    logits.softmax()?.narrow(1, 1, 1)?.reshape(&[p])
}

/// Soft Dice `1 − (2Σyp + ε)/(Σy + Σp + ε)`, summed over every pixel given.
pub fn dice_loss<'t>(prob: Var<'t>, y: &[u8], eps: f64) -> Result<Var<'t>> {
    check_mask(y)?;
    if prob.numel() != y.len() {
        return Err(Error::Input(format!(
            "{} probabilities for {} mask pixels",
            prob.numel(),
            y.len()
        )));
    }
    let pv = prob.value();
    if let Some(bad) = pv.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("probability {bad} outside [0, 1]")));
    }
    let positives = y.iter().filter(|&&v| v == 1).count() as f64;
    if positives + pv.data().iter().sum::<f64>() + eps == 0.0 {
        return Err(Error::Input("dice is 0/0 on empty masks without smoothing".into()));
    }
    let mask = prob.tape.constant(Tensor::new(pv.shape().to_vec(), y.iter().map(|&v| v as f64).collect())?);
    let overlap = prob.mul(mask)?.sum()?.scale(2.0)?.add_scalar(eps)?;
    let size = prob.sum()?.add_scalar(positives + eps)?;
    overlap.div(size)?.scale(-1.0)?.add_scalar(1.0)
}

/// The weighted loss and its two terms, for logging.
#[derive(Clone, Copy)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub ce: Var<'t>,
    pub dice: Var<'t>,
}

/// `λ1·CE + λ2·Dice` over `[P, 2]` pixel logits.
pub fn total_loss<'t>(logits: Var<'t>, y: &[u8], cfg: &LossConfig) -> Result<LossTerms<'t>> {
    cfg.validate()?;
    let ce = ce_loss(logits, y)?;
    let dice = dice_loss(change_probability(logits)?, y, cfg.dice_smoothing)?;
    let total = ce.scale(cfg.lambda1)?.add(dice.scale(cfg.lambda2)?)?;
    Ok(LossTerms { total, ce, dice })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: Var<'_>) -> f64 {
        v.value().data()[0]
    }

    fn logits_for(y: &[u8], margin: f64) -> Tensor {
        Tensor::from_fn([y.len(), 2], |i| {
            let (p, k) = (i / 2, i % 2);
            if k == y[p] as usize { margin } else { -margin }
        })
    }

    #[test]
    fn saturated_logits_give_vanishing_ce() {
        let y = [0, 1, 1, 0, 1];
        let tape = Tape::new();
        let ce = ce_loss(tape.constant(logits_for(&y, 20.0)), &y).unwrap();
        assert!(scalar(ce) <= 1e-8, "{}", scalar(ce));
    }

    #[test]
    fn zero_logits_give_ln2() {
        let tape = Tape::new();
        let ce = ce_loss(tape.constant(Tensor::zeros([6, 2])), &[0, 1, 0, 1, 1, 1]).unwrap();
        assert!((scalar(ce) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_is_shift_invariant_per_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([8, 2], -2.0, 2.0, &mut rng);
        let shifted = Tensor::from_fn([8, 2], |i| x.data()[i] + 0.7 * (i / 2) as f64);
        let y = [1, 0, 0, 1, 1, 0, 1, 0];
        let tape = Tape::new();
        let a = scalar(ce_loss(tape.constant(x), &y).unwrap());
        let b = scalar(ce_loss(tape.constant(shifted), &y).unwrap());
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn non_binary_mask_is_input_error() {
        let tape = Tape::new();
        let err = ce_loss(tape.constant(Tensor::zeros([2, 2])), &[0, 2]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn dice_examples() {
        let tape = Tape::new();
        let y = [1, 0, 1, 1, 0];
        let exact = dice_loss(tape.constant(Tensor::new([5], vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap()), &y, 1.0)
            .unwrap();
        assert!(scalar(exact) <= 1.0 / 7.0 + 1e-15);
        assert!(scalar(exact).abs() < 1e-15);

        let empty = dice_loss(tape.constant(Tensor::zeros([4])), &[0; 4], 1.0).unwrap();
        assert_eq!(scalar(empty), 0.0);

        let half = dice_loss(tape.constant(Tensor::full([2], 0.5)), &[1, 0], 0.0).unwrap();
        assert!((scalar(half) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dice_rejects_out_of_range_probability() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new([2], vec![0.5, 1.5]).unwrap());
        assert!(matches!(dice_loss(p, &[0, 1], 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn total_loss_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform([10, 2], -1.0, 1.0, &mut rng);
        let y: Vec<u8> = (0..10).map(|_| rng.gen_range(0..2)).collect();
        let tape = Tape::new();
        let lx = tape.constant(x);
        let only_ce = LossConfig {
            lambda1: 0.7,
            lambda2: 0.0,
            ..LossConfig::default()
        };
        let t = total_loss(lx, &y, &only_ce).unwrap();
        assert_eq!(scalar(t.total), 0.7 * scalar(t.ce));

        let base = total_loss(lx, &y, &LossConfig::default()).unwrap();
        let doubled = LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            ..LossConfig::default()
        };
        let d = total_loss(lx, &y, &doubled).unwrap();
        assert!((scalar(d.total) - 2.0 * scalar(base.total)).abs() < 1e-15);
        assert!(scalar(base.total) >= 0.0);

        let perfect = total_loss(tape.constant(logits_for(&y, 40.0)), &y, &LossConfig::default()).unwrap();
        assert!(scalar(perfect.total) <= 1e-8);

        let bad = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossConfig::default()
        };
        assert!(total_loss(lx, &y, &bad).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform([12, 2], -2.0, 2.0, &mut rng);
        let y: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
        let ce = grad_check(|_, v| ce_loss(v[0], &y), &[x.clone()], 1e-6).unwrap();
        assert!(ce.max_rel_error <= 1e-6, "{ce:?}");
        let dice = grad_check(
            |_, v| dice_loss(change_probability(v[0])?, &y, 1.0),
            &[x.clone()],
            1e-6,
        )
        .unwrap();
        assert!(dice.max_rel_error <= 1e-6, "{dice:?}");
        let p = Tensor::uniform([12], 0.05, 0.95, &mut rng);
        let direct = grad_check(|_, v| dice_loss(v[0], &y, 1.0), &[p], 1e-6).unwrap();
        assert!(direct.max_rel_error <= 1e-6, "{direct:?}");
    }
}
