//! Uniform time grids, piecewise-linear controls and sampled paths.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform partition `t_j = j T / n` of `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::Domain("grid needs at least one step".into()));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        if j == self.n_steps {
            self.horizon
        } else {
            j as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|j| self.node(j)).collect()
    }
}

/// Element of the Cameron–Martin space with piecewise-constant derivative.
///
/// `dot[j * dim + c]` is the slope of component `c` on `[t_j, t_{j+1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub grid: TimeGrid,
    pub dim: usize,
    pub dot: Vec<f64>,
}

impl Control {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Control { grid, dim, dot: vec![0.0; grid.n_steps * dim] }
    }

    pub fn new(grid: TimeGrid, dim: usize, dot: Vec<f64>) -> Result<Self> {
        if dim == 0 || dot.len() != grid.n_steps * dim {
            return Err(Error::Dimension(format!(
                "control needs {} slopes for dim {dim}, got {}",
                grid.n_steps * dim,
                dot.len()
            )));
        }
        Ok(Control { grid, dim, dot })
    }

    /// Constant slope in every component.
    pub fn constant(grid: TimeGrid, slope: &[f64]) -> Self {
        let dim = slope.len();
        let dot = (0..grid.n_steps).flat_map(|_| slope.iter().copied()).collect();
        Control { grid, dim, dot }
    }

    #[inline]
    pub fn slope(&self, j: usize, c: usize) -> f64 {
        self.dot[j * self.dim + c]
    }

    pub fn scaled(&self, a: f64) -> Self {
        Control { grid: self.grid, dim: self.dim, dot: self.dot.iter().map(|v| a * v).collect() }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|c| format!("dot{c}")));
        wr.write_record(&header)?;
        for j in 0..self.grid.n_steps {
            let mut row = vec![self.grid.node(j).to_string()];
            row.extend((0..self.dim).map(|c| self.slope(j, c).to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `½ Σ_j ||ḟ_j||² Δ`.
pub fn energy(c: &Control) -> f64 {
    0.5 * c.dot.iter().map(|v| v * v).sum::<f64>() * c.grid.dt()
}

/// Path sampled at every grid node; `values[j * dim + c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathFn {
    pub grid: TimeGrid,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl PathFn {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != (grid.n_steps + 1) * dim {
            return Err(Error::Dimension(format!(
                "path needs {} values for dim {dim}, got {}",
                (grid.n_steps + 1) * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("path has non-finite entries".into()));
        }
        Ok(PathFn { grid, dim, values })
    }

    /// Samples `t ↦ g(t)` (one component per returned entry) at every node.
    pub fn from_fn<F: Fn(f64) -> Vec<f64>>(grid: TimeGrid, dim: usize, g: F) -> Result<Self> {
        let values = grid.nodes().into_iter().flat_map(&g).collect();
        PathFn::new(grid, dim, values)
    }

    #[inline]
    pub fn at(&self, j: usize, c: usize) -> f64 {
        self.values[j * self.dim + c]
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        (0..=self.grid.n_steps).map(|j| self.at(j, c)).collect()
    }

    pub fn terminal(&self) -> &[f64] {
        let n = self.grid.n_steps;
        &self.values[n * self.dim..]
    }

    pub fn sup_distance(&self, other: &PathFn) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|c| format!("x{c}")));
        wr.write_record(&header)?;
        for j in 0..=self.grid.n_steps {
            let mut row = vec![self.grid.node(j).to_string()];
            row.extend((0..self.dim).map(|c| self.at(j, c).to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a path from CSV with the node time in column 0.
    pub fn read_csv<R: std::io::Read>(r: R, horizon: f64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Domain(format!("bad CSV value {v:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.len() < 2 || rows[0].len() < 2 {
            return Err(Error::Dimension("path CSV needs a time column and at least two rows".into()));
        }
        let dim = rows[0].len() - 1;
        let grid = TimeGrid::new(horizon, rows.len() - 1)?;
        for (j, row) in rows.iter().enumerate() {
            if row.len() != dim + 1 || (row[0] - grid.node(j)).abs() > 1e-9 * horizon.max(1.0) {
                return Err(Error::Dimension(format!("row {j} does not lie on the uniform grid")));
            }
        }
        PathFn::new(grid, dim, rows.iter().flat_map(|r| r[1..].to_vec()).collect())
    }
}

/// Nodal values `f(t_j) = Σ_{k<j} ḟ_k Δ`.
pub fn integrate(c: &Control) -> PathFn {
    let n = c.grid.n_steps;
    let dt = c.grid.dt();
    let mut values = vec![0.0; (n + 1) * c.dim];
    for j in 0..n {
        for k in 0..c.dim {
            values[(j + 1) * c.dim + k] = values[j * c.dim + k] + c.slope(j, k) * dt;
        }
    }
    PathFn { grid: c.grid, dim: c.dim, values }
}

/// Control whose integral interpolates the nodal path (`p(0)` must be 0).
pub fn differentiate(p: &PathFn) -> Control {
    let n = p.grid.n_steps;
    let dt = p.grid.dt();
    let mut dot = vec![0.0; n * p.dim];
    for j in 0..n {
        for k in 0..p.dim {
            dot[j * p.dim + k] = (p.at(j + 1, k) - p.at(j, k)) / dt;
        }
    }
    Control { grid: p.grid, dim: p.dim, dot }
}

/// Reflection at zero: `Γf(t) = f(t) - min_{s<=t}(f(s) ∧ 0)`, applied at the nodes.
pub fn skorokhod_map(p: &PathFn) -> Result<PathFn> {
    if p.dim != 1 {
        return Err(Error::UnsupportedDomain(format!(
            "reflection is implemented on the half-line only, got dimension {}",
            p.dim
        )));
    }
    Ok(PathFn { grid: p.grid, dim: 1, values: reflect_values(&p.values).0 })
}

/// Reflected values and, per node, the index attaining the running minimum
/// when that minimum is negative.
pub(crate) fn reflect_values(v: &[f64]) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut out = Vec::with_capacity(v.len());
    let mut arg = Vec::with_capacity(v.len());
    let mut best: Option<usize> = None;
    for (j, &x) in v.iter().enumerate() {
        if x < 0.0 && best.is_none_or(|b| x < v[b]) {
            best = Some(j);
        }
        match best {
            Some(b) => out.push(x - v[b]),
            None => out.push(x),
        }
        arg.push(best);
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(t: f64, n: usize) -> TimeGrid {
        TimeGrid::new(t, n).unwrap()
    }

    #[test]
    fn grid_nodes() {
        let g = grid(2.0, 4);
        assert_eq!(g.nodes(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy(&Control::zeros(grid(1.0, 10), 1)), 0.0);
        assert!((energy(&Control::constant(grid(1.0, 10), &[2.0])) - 2.0).abs() < 1e-14);
        assert!((energy(&Control::constant(grid(0.5, 7), &[1.0, 1.0])) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn integrate_examples() {
        let p = integrate(&Control::constant(grid(1.0, 10), &[1.0]));
        for j in 0..=10 {
            assert!((p.at(j, 0) - j as f64 / 10.0).abs() < 1e-15);
        }
        let z = integrate(&Control::zeros(grid(1.0, 5), 2));
        assert!(z.values.iter().all(|v| *v == 0.0));
        let c = Control::new(grid(1.0, 4), 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(integrate(&c).terminal(), &[1.5]);
    }

    #[test]
    fn skorokhod_examples() {
        let g = grid(1.0, 10);
        let up = PathFn::from_fn(g, 1, |t| vec![t]).unwrap();
        assert_eq!(skorokhod_map(&up).unwrap(), up);
        let down = PathFn::from_fn(g, 1, |t| vec![-t]).unwrap();
        assert!(skorokhod_map(&down).unwrap().values.iter().all(|v| v.abs() < 1e-15));
        let p = PathFn::new(grid(1.0, 2), 1, vec![0.0, -1.0, 0.5]).unwrap();
        assert_eq!(skorokhod_map(&p).unwrap().values, vec![0.0, 0.0, 1.5]);
        let two = PathFn::new(grid(1.0, 2), 2, vec![0.0; 6]).unwrap();
        assert!(matches!(skorokhod_map(&two), Err(Error::UnsupportedDomain(_))));
    }

    #[test]
    fn csv_round_trip() {
        let g = grid(1.0, 4);
        let p = PathFn::from_fn(g, 2, |t| vec![t, t * t]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = PathFn::read_csv(buf.as_slice(), 1.0).unwrap();
        assert!(p.sup_distance(&q) < 1e-15);
        let c = differentiate(&p);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,dot0,dot1"));
    }

    proptest! {
        #[test]
        fn reflection_nonnegative_and_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 2..60)) {
            let g = grid(1.0, v.len() - 1);
            let p = PathFn::new(g, 1, v).unwrap();
            let r = skorokhod_map(&p).unwrap();
            prop_assert!(r.values.iter().all(|x| *x >= 0.0));
            prop_assert_eq!(&skorokhod_map(&r).unwrap(), &r);
            let comp: Vec<f64> = r.values.iter().zip(&p.values).map(|(a, b)| a - b).collect();
            prop_assert!(comp.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }

        #[test]
        fn energy_quadratic(v in proptest::collection::vec(-3.0f64..3.0, 1..40), a in -4.0f64..4.0) {
            let c = Control::new(grid(1.3, v.len()), 1, v).unwrap();
            let lhs = energy(&c.scaled(a));
            prop_assert!((lhs - a * a * energy(&c)).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn integrate_telescopes(v in proptest::collection::vec(-3.0f64..3.0, 1..40)) {
            let c = Control::new(grid(1.0, v.len()), 1, v.clone()).unwrap();
            let s: f64 = v.iter().sum::<f64>() * c.grid.dt();
            prop_assert!((integrate(&c).terminal()[0] - s).abs() < 1e-12);
        }
    }
}
