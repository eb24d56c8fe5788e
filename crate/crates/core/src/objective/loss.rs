use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Label-smoothed, temperature-scaled cross-entropy on the refined features
/// and/or the backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub smoothing: f64,
    /// Weight of the auxiliary (backbone) term.
    pub aux_weight: f64,
    pub use_mpn_loss: bool,
    pub use_aux_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            smoothing: 0.1,
            aux_weight: 1.0,
            use_mpn_loss: true,
            use_aux_loss: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("loss.temperature", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("loss.smoothing", "must be in [0, 1)"));
        }
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return Err(Error::config("loss.aux_weight", "must be non-negative"));
        }
        if !self.use_mpn_loss && !self.use_aux_loss {
            return Err(Error::config(
                "loss.mpn",
                "at least one of loss.mpn and loss.aux must be on",
            ));
        }
        Ok(())
    }
}

pub fn smoothed_ce(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    temperature: f64,
    smoothing: f64,
) -> Result<Var> {
    g.smoothed_ce(logits, labels, temperature, smoothing)
}

/// The total loss node plus the individual terms for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub mpn: Option<Var>,
    pub aux: Option<Var>,
}

/// `[mpn]·CE(mpn_logits) + λ·[aux]·CE(backbone_logits)`.
///
/// A logit tensor is only required when its term is switched on; an
/// auxiliary term with `λ = 0` is dropped entirely.
pub fn combined_loss(
    g: &mut Graph,
    cfg: &LossConfig,
    mpn_logits: Option<Var>,
    backbone_logits: Option<Var>,
    labels: &[usize],
) -> Result<LossTerms> {
    cfg.validate()?;
    let mpn = if cfg.use_mpn_loss {
        let z =
            mpn_logits.ok_or_else(|| Error::Param("MPN loss enabled but no MPN logits".into()))?;
        Some(g.smoothed_ce(z, labels, cfg.temperature, cfg.smoothing)?)
    } else {
        None
    };
    let aux = if cfg.use_aux_loss && cfg.aux_weight > 0.0 {
        let z = backbone_logits
            .ok_or_else(|| Error::Param("auxiliary loss enabled but no backbone logits".into()))?;
        Some(g.smoothed_ce(z, labels, cfg.temperature, cfg.smoothing)?)
    } else {
        None
    };
    let total = match (mpn, aux) {
        (Some(m), Some(a)) => {
            let weighted = g.scale(a, cfg.aux_weight);
            g.add(m, weighted)?
        }
        (Some(m), None) => m,
        (None, Some(a)) => g.scale(a, cfg.aux_weight),
        (None, None) => {
            return Err(Error::config("loss.aux_weight", "no active loss term"));
        }
    };
    Ok(LossTerms { total, mpn, aux })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn ce(row: &[f64], label: usize, t: f64, eps: f64) -> f64 {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_rows(&[row]));
        let l = smoothed_ce(&mut g, z, &[label], t, eps).unwrap();
        g.value(l).item()
    }

    #[test]
    fn zero_logits_give_log_classes() {
        for c in [2usize, 3, 7, 40] {
            for (t, eps) in [(1.0, 0.0), (0.1, 0.1), (0.05, 0.5)] {
                let mut g = Graph::new();
                let z = g.leaf(Tensor::zeros(&[4, c]));
                let l = smoothed_ce(&mut g, z, &[0, 1, 1, 0], t, eps).unwrap();
                assert!((g.value(l).item() - (c as f64).ln()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn confident_row() {
        let want = (1.0 + (-10f64).exp()).ln();
        let got = ce(&[10.0, 0.0], 0, 1.0, 0.0);
        assert!((got - want).abs() < 1e-15);
        assert!((got - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn lower_temperature_sharpens() {
        let row = [2.0, 0.5, -1.0];
        let losses: Vec<f64> = [1.0, 0.5, 0.1]
            .iter()
            .map(|&t| ce(&row, 0, t, 0.0))
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    }

    #[test]
    fn loss_is_non_negative() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let row: Vec<f64> = (0..5).map(|_| rng.uniform(-20.0, 20.0)).collect();
            assert!(
                ce(
                    &row,
                    rng.below(5),
                    rng.uniform(0.05, 2.0),
                    rng.uniform(0.0, 0.9)
                ) >= 0.0
            );
        }
    }

    #[test]
    fn term_selection() {
        let labels = [0, 1, 2];
        let mpn_z = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.5, 0.5, 0.0]]);
        let aux_z = Tensor::from_rows(&[[0.0, 1.0, 0.0], [0.3, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let eval = |cfg: &LossConfig| {
            let mut g = Graph::new();
            let a = g.leaf(mpn_z.clone());
            let b = g.leaf(aux_z.clone());
            let t = combined_loss(&mut g, cfg, Some(a), Some(b), &labels).unwrap();
            g.value(t.total).item()
        };
        let base = LossConfig::default();
        let mpn_only = eval(&LossConfig {
            use_aux_loss: false,
            ..base.clone()
        });
        let zero_aux = eval(&LossConfig {
            aux_weight: 0.0,
            ..base.clone()
        });
        let aux_only = eval(&LossConfig {
            use_mpn_loss: false,
            ..base.clone()
        });
        let both = eval(&base);
        assert_eq!(mpn_only, zero_aux);
        assert!((both - (mpn_only + aux_only)).abs() < 1e-12);

        let mut g = Graph::new();
        let neither = LossConfig {
            use_mpn_loss: false,
            use_aux_loss: false,
            ..base
        };
        assert!(combined_loss(&mut g, &neither, None, None, &labels).is_err());
    }

    #[test]
    fn combined_gradient() {
        let mut rng = Rng::new(2);
        let n = 6 * 4;
        let a = Tensor::new(vec![6, 4], (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let b = Tensor::new(vec![6, 4], (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let cfg = LossConfig::default();
        let r = grad_check(&[a, b], |g, v| {
            Ok(combined_loss(g, &cfg, Some(v[0]), Some(v[1]), &[0, 1, 2, 3, 0, 1])?.total)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{:?}", r.per_param);
    }

    #[test]
    fn validation_names_key() {
        let bad = LossConfig {
            temperature: 0.0,
            ..LossConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("loss.temperature"));
        let bad = LossConfig {
            smoothing: 1.0,
            ..LossConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("loss.smoothing"));
    }
}
