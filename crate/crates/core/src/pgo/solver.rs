//! Normal-equation solver for a chain of keyframe blocks with a dense border.
//!
//! The system is `[[A, B], [Bᵀ, C]]` where `A` is block tridiagonal with
//! `N × N` blocks (one per keyframe), and `B`/`C` couple a small set of extra
//! variables (base-station positions) to everything. `A` is factored by
//! block Cholesky; the border is eliminated through its Schur complement.

use nalgebra::{Cholesky, Const, DMatrix, Dyn, OMatrix, SMatrix};

type Rows<const N: usize> = OMatrix<f64, Const<N>, Dyn>;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSystem<const N: usize> {
    /// Diagonal blocks `A_kk`.
    pub diag: Vec<SMatrix<f64, N, N>>,
    /// Sub-diagonal blocks `A_{k+1,k}`.
    pub off: Vec<SMatrix<f64, N, N>>,
    /// `B`, `(N·blocks) × extra`.
    pub border: DMatrix<f64>,
    /// `C`, `extra × extra`.
    pub corner: DMatrix<f64>,
}

impl<const N: usize> BlockSystem<N> {
    pub fn zeros(blocks: usize, extra: usize) -> Self {
        Self {
            diag: vec![SMatrix::zeros(); blocks],
            off: vec![SMatrix::zeros(); blocks.saturating_sub(1)],
            border: DMatrix::zeros(N * blocks, extra),
            corner: DMatrix::zeros(extra, extra),
        }
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn extra(&self) -> usize {
        self.corner.nrows()
    }

    pub fn dim(&self) -> usize {
        N * self.blocks() + self.extra()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self
            .diag
            .iter()
            .flat_map(|b| b.diagonal().iter().copied().collect::<Vec<_>>())
            .collect();
        d.extend(self.corner.diagonal().iter());
        d
    }

    /// Adds `values[i]` to the i-th diagonal entry.
    pub fn add_diagonal(&mut self, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            if i < N * self.blocks() {
                self.diag[i / N][(i % N, i % N)] += v;
            } else {
                let j = i - N * self.blocks();
                self.corner[(j, j)] += v;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = N * self.blocks();
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (k, d) in self.diag.iter().enumerate() {
            m.view_mut((k * N, k * N), (N, N)).copy_from(d);
        }
        for (k, o) in self.off.iter().enumerate() {
            m.view_mut(((k + 1) * N, k * N), (N, N)).copy_from(o);
            m.view_mut((k * N, (k + 1) * N), (N, N))
                .copy_from(&o.transpose());
        }
        let e = self.extra();
        m.view_mut((0, n), (n, e)).copy_from(&self.border);
        m.view_mut((n, 0), (e, n)).copy_from(&self.border.transpose());
        m.view_mut((n, n), (e, e)).copy_from(&self.corner);
        m
    }

    /// Factors the system; `None` if it is not positive definite.
    pub fn factor(&self) -> Option<Factorization<N>> {
        let n = self.blocks();
        let mut lower = Vec::with_capacity(n);
        let mut sub = Vec::with_capacity(n.saturating_sub(1));
        let mut d = *self.diag.first()?;
        for k in 0..n {
            let l = Cholesky::new(d)?.unpack();
            if k + 1 < n {
                // L_{k+1,k} = A_{k+1,k}·L_kk⁻ᵀ
                let s = l.solve_lower_triangular(&self.off[k].transpose())?.transpose();
                d = self.diag[k + 1] - s * s.transpose();
                sub.push(s);
            }
            lower.push(l);
        }
        let chain = ChainFactor { lower, sub };
        let border_solved = chain.solve(&self.border)?;
        let schur = if self.extra() > 0 {
            let s = &self.corner - self.border.transpose() * &border_solved;
            Some(Cholesky::new(s)?)
        } else {
            None
        };
        Some(Factorization {
            chain,
            border: self.border.clone(),
            border_solved,
            schur,
        })
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        self.factor()?.solve(rhs)
    }
}

#[derive(Clone, Debug)]
struct ChainFactor<const N: usize> {
    lower: Vec<SMatrix<f64, N, N>>,
    sub: Vec<SMatrix<f64, N, N>>,
}

impl<const N: usize> ChainFactor<N> {
    fn solve(&self, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let n = self.lower.len();
        let mut y: Vec<Rows<N>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut b: Rows<N> = rhs.fixed_rows::<N>(k * N).into_owned();
            if k > 0 {
                b -= self.sub[k - 1] * &y[k - 1];
            }
            if !self.lower[k].solve_lower_triangular_mut(&mut b) {
                return None;
            }
            y.push(b);
        }
        let mut x = DMatrix::zeros(N * n, rhs.ncols());
        for k in (0..n).rev() {
            let mut b = std::mem::replace(&mut y[k], Rows::<N>::zeros(0));
            if k + 1 < n {
                b -= self.sub[k].transpose() * x.fixed_rows::<N>((k + 1) * N);
            }
            if !self.lower[k].tr_solve_lower_triangular_mut(&mut b) {
                return None;
            }
            x.fixed_rows_mut::<N>(k * N).copy_from(&b);
        }
        Some(x)
    }
}

#[derive(Clone, Debug)]
pub struct Factorization<const N: usize> {
    chain: ChainFactor<N>,
    border: DMatrix<f64>,
    /// `A⁻¹B`.
    border_solved: DMatrix<f64>,
    schur: Option<Cholesky<f64, Dyn>>,
}

impl<const N: usize> Factorization<N> {
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let n = self.border.nrows();
        let cols = rhs.ncols();
        let z = self.chain.solve(&rhs.rows(0, n).into_owned())?;
        let Some(schur) = &self.schur else {
            return Some(z);
        };
        let e = self.border.ncols();
        let r2 = rhs.rows(n, e) - self.border.transpose() * &z;
        let x2 = schur.solve(&r2);
        let x1 = z - &self.border_solved * &x2;
        let mut out = DMatrix::zeros(n + e, cols);
        out.rows_mut(0, n).copy_from(&x1);
        out.rows_mut(n, e).copy_from(&x2);
        Some(out)
    }
}
