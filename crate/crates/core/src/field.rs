use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::Result;

/// A (conditional) velocity field `u_t(x | y)` evaluated on batches.
pub trait VelocityField: Sync {
    /// Data dimension `d`.
    fn dim(&self) -> usize;

    /// Condition dimension `k`.
    fn cond_dim(&self) -> usize;

    /// Evaluates the field at time `t` for every row of `x` (`n x d`).
    /// `cond` holds one condition per row (`n x k`); `None` selects the null
    /// condition for the whole batch.
    fn velocity(&self, t: f64, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>>;

    fn velocity_at(&self, t: f64, x: ArrayView1<f64>, cond: Option<ArrayView1<f64>>) -> Result<Array1<f64>> {
        let xb = x.insert_axis(ndarray::Axis(0));
        let cb = cond.map(|c| c.insert_axis(ndarray::Axis(0)));
        let out = self.velocity(t, xb, cb)?;
        Ok(out.row(0).to_owned())
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }
    fn velocity(&self, t: f64, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        (**self).velocity(t, x, cond)
    }
}
