use crate::error::{Error, Result};

/// Saved forward state of one operation. Each record supports exactly one
/// backward call; a second call reports a usage error.
#[derive(Debug)]
pub struct GradTape<S> {
    op: &'static str,
    record: Option<S>,
}

impl<S> GradTape<S> {
    pub(crate) fn record(op: &'static str, saved: S) -> Self {
        GradTape {
            op,
            record: Some(saved),
        }
    }

    pub(crate) fn take(&mut self) -> Result<S> {
        self.record.take().ok_or_else(|| {
            Error::Usage(format!(
                "backward called twice on the same `{}` forward record",
                self.op
            ))
        })
    }

    pub(crate) fn peek(&self) -> Result<&S> {
        self.record.as_ref().ok_or_else(|| {
            Error::Usage(format!("`{}` forward record already consumed", self.op))
        })
    }

    pub fn op(&self) -> &'static str {
        self.op
    }

    pub fn is_consumed(&self) -> bool {
        self.record.is_none()
    }
}

#[derive(Debug)]
pub struct ReluRecord {
    mask: Vec<bool>,
}

/// Element-wise `max(x, 0)`.
pub fn relu(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_taped(values: &[f64]) -> (Vec<f64>, GradTape<ReluRecord>) {
    let mask: Vec<bool> = values.iter().map(|&v| v > 0.0).collect();
    (relu(values), GradTape::record("relu", ReluRecord { mask }))
}

impl GradTape<ReluRecord> {
    /// Subgradient at zero is zero.
    pub fn backward(&mut self, upstream: &[f64]) -> Result<Vec<f64>> {
        let rec = self.take()?;
        if upstream.len() != rec.mask.len() {
            return Err(Error::Shape(format!(
                "relu backward: {} upstream values for {} inputs",
                upstream.len(),
                rec.mask.len()
            )));
        }
        Ok(upstream
            .iter()
            .zip(&rec.mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_backward_masks_and_is_single_use() {
        let (y, mut tape) = relu_taped(&[-1.0, 0.0, 2.0]);
        assert_eq!(y, vec![0.0, 0.0, 2.0]);
        assert_eq!(tape.backward(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(tape.backward(&[1.0; 3]), Err(Error::Usage(_))));
    }
}
