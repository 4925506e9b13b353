use super::Matrix;
use crate::error::{shape_err, Result};

/// A fixed, ordered collection of named parameter matrices.
///
/// Gradients of a parameter set are stored in a value of the same type, so
/// visiting two instances yields matching tensors in matching order.
pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix));

    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m| out.push((name, m)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, m| out.push(m));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let need = self.num_params();
        if values.len() != need {
            return Err(shape_err!("{} values for {need} parameters", values.len()));
        }
        let mut offset = 0;
        self.visit_mut("", &mut |_, m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Zeroes every tensor in place.
    fn zero(&mut self) {
        self.visit_mut("", &mut |_, m| m.as_mut_slice().iter_mut().for_each(|v| *v = 0.0));
    }
}

/// Joins a visitor prefix and a field name.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
