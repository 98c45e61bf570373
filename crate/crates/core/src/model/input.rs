use crate::error::{Error, Result};

/// Deterministic input signal `u_0, u_1, …`.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSignal {
    Zero,
    /// Maximal-length PRBS-7 (`x⁷ + x⁶ + 1`) mapped to `±amplitude`, each
    /// bit held for `hold` steps.
    Prbs { amplitude: f64, hold: usize },
    /// Explicit values, one row per step.
    Sequence(Vec<Vec<f64>>),
}

impl Default for InputSignal {
    fn default() -> Self {
        InputSignal::Prbs {
            amplitude: 0.5,
            hold: 1,
        }
    }
}

impl InputSignal {
    /// Values for `t = 0 .. horizon-1`, each of length `dim`.
    pub fn values(&self, dim: usize, horizon: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            InputSignal::Zero => Ok(vec![vec![0.0; dim]; horizon]),
            InputSignal::Prbs { amplitude, hold } => {
                if *hold == 0 {
                    return Err(Error::Config("PRBS hold must be positive".into()));
                }
                let mut reg: u8 = 0x7f;
                let mut bit = 0;
                Ok((0..horizon)
                    .map(|t| {
                        if t % hold == 0 {
                            bit = (reg >> 6) & 1;
                            let feedback = ((reg >> 6) ^ (reg >> 5)) & 1;
                            reg = ((reg << 1) | feedback) & 0x7f;
                        }
                        let level = if bit == 1 { *amplitude } else { -*amplitude };
                        vec![level; dim]
                    })
                    .collect())
            }
            InputSignal::Sequence(rows) => {
                if rows.len() < horizon {
                    return Err(Error::Config(format!(
                        "input sequence has {} steps, horizon needs {horizon}",
                        rows.len()
                    )));
                }
                if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
                    return Err(Error::Config(format!(
                        "input row {bad} has length {}, expected {dim}",
                        rows[bad].len()
                    )));
                }
                Ok(rows[..horizon].to_vec())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prbs_has_period_127_and_is_balanced() {
        let sig = InputSignal::Prbs { amplitude: 0.5, hold: 1 };
        let v = sig.values(1, 254).unwrap();
        assert_eq!(v[..127], v[127..]);
        let highs = v[..127].iter().filter(|r| r[0] > 0.0).count();
        // A maximal-length 7-bit LFSR emits 64 ones and 63 zeros per period.
        assert_eq!(highs, 64);
        assert!(v.iter().all(|r| r[0].abs() == 0.5));
    }

    #[test]
    fn prbs_hold_repeats_levels() {
        let sig = InputSignal::Prbs { amplitude: 1.0, hold: 3 };
        let v = sig.values(1, 12).unwrap();
        for chunk in v.chunks(3) {
            assert!(chunk.iter().all(|r| r == &chunk[0]));
        }
    }

    #[test]
    fn short_sequence_rejected() {
        let sig = InputSignal::Sequence(vec![vec![0.0]; 3]);
        assert!(sig.values(1, 4).is_err());
        assert_eq!(sig.values(1, 2).unwrap().len(), 2);
    }
}
