//! Left-looking sparse LU (Gilbert-Peierls) with threshold partial
//! pivoting and row equilibration.

use super::ordering::minimum_degree;
use super::{SingularReason, SingularityReport, SparseSystem};

const UNSET: usize = usize::MAX;

/// Pivot threshold: the diagonal candidate is kept when it is at least this
/// fraction of the largest candidate in its column.
const PIVOT_THRESHOLD: f64 = 0.1;

/// Reusable factorization context.
///
/// The fill-reducing column ordering is computed once and reused for every
/// later system with the same sparsity pattern; `orderings` counts how many
/// times it had to be recomputed.
#[derive(Debug, Default)]
pub struct LuSolver {
    pattern: Option<(Vec<usize>, Vec<usize>)>,
    col_perm: Vec<usize>,
    pub orderings: usize,
    pub factorizations: usize,
}

/// One-shot solve with a fresh [`LuSolver`].
pub fn factor_solve(sys: &SparseSystem) -> Result<Vec<f64>, SingularityReport> {
    LuSolver::default().factor_solve(sys)
}

struct Factors {
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    up: Vec<usize>,
    ui: Vec<usize>,
    ux: Vec<f64>,
    pinv: Vec<usize>,
}

impl LuSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn factor_solve(&mut self, sys: &SparseSystem) -> Result<Vec<f64>, SingularityReport> {
        let n = sys.n;
        if n == 0 {
            return Ok(Vec::new());
        }

        // Row equilibration.
        let mut row_max = vec![0.0f64; n];
        let mut zero_col = None;
        for j in 0..n {
            let mut col_max = 0.0f64;
            for p in sys.col_ptr[j]..sys.col_ptr[j + 1] {
                let a = sys.values[p].abs();
                row_max[sys.row_idx[p]] = row_max[sys.row_idx[p]].max(a);
                col_max = col_max.max(a);
            }
            if col_max == 0.0 && zero_col.is_none() {
                zero_col = Some(j);
            }
        }
        if let Some(i) = row_max.iter().position(|&m| m == 0.0 || !m.is_finite()) {
            return Err(SingularityReport { index: i, reason: SingularReason::ZeroRow });
        }
        if let Some(j) = zero_col {
            return Err(SingularityReport { index: j, reason: SingularReason::ZeroColumn });
        }
        let scale: Vec<f64> = row_max.iter().map(|m| 1.0 / m).collect();
        let values: Vec<f64> =
            (0..sys.nnz()).map(|p| sys.values[p] * scale[sys.row_idx[p]]).collect();
        let rhs: Vec<f64> = sys.rhs.iter().zip(&scale).map(|(b, s)| b * s).collect();

        let reuse = matches!(&self.pattern, Some((cp, ri)) if sys.same_pattern(cp, ri));
        if !reuse {
            self.col_perm = minimum_degree(n, &sys.col_ptr, &sys.row_idx);
            self.pattern = Some((sys.col_ptr.clone(), sys.row_idx.clone()));
            self.orderings += 1;
        }
        self.factorizations += 1;

        let f = factor(n, &sys.col_ptr, &sys.row_idx, &values, &self.col_perm)?;
        Ok(solve(&f, &self.col_perm, &rhs))
    }
}

fn factor(
    n: usize,
    ap: &[usize],
    ai: &[usize],
    ax: &[f64],
    q: &[usize],
) -> Result<Factors, SingularityReport> {
    let cap = 4 * ai.len() + n;
    let mut f = Factors {
        lp: vec![0; n + 1],
        li: Vec::with_capacity(cap),
        lx: Vec::with_capacity(cap),
        up: vec![0; n + 1],
        ui: Vec::with_capacity(cap),
        ux: Vec::with_capacity(cap),
        pinv: vec![UNSET; n],
    };
    let mut x = vec![0.0; n];
    let mut xi = vec![0usize; 2 * n];
    let mut marked = vec![false; n];

    for k in 0..n {
        f.lp[k] = f.li.len();
        f.up[k] = f.ui.len();
        let col = q[k];

        let top = spsolve(&f, ap, ai, ax, col, &mut xi, &mut x, &mut marked, n);

        let mut ipiv = UNSET;
        let mut best = -1.0;
        for &i in &xi[top..n] {
            if f.pinv[i] == UNSET {
                let a = x[i].abs();
                if a > best {
                    best = a;
                    ipiv = i;
                }
            } else {
                f.ui.push(f.pinv[i]);
                f.ux.push(x[i]);
            }
        }
        if ipiv == UNSET || !(best > 0.0) || !best.is_finite() {
            return Err(SingularityReport { index: col, reason: SingularReason::ZeroPivot });
        }
        if f.pinv[col] == UNSET && x[col].abs() >= best * PIVOT_THRESHOLD {
            ipiv = col;
        }
        let pivot = x[ipiv];
        f.ui.push(k);
        f.ux.push(pivot);
        f.pinv[ipiv] = k;
        f.li.push(ipiv);
        f.lx.push(1.0);
        for &i in &xi[top..n] {
            if f.pinv[i] == UNSET {
                f.li.push(i);
                f.lx.push(x[i] / pivot);
            }
            x[i] = 0.0;
        }
    }
    f.lp[n] = f.li.len();
    f.up[n] = f.ui.len();
    for i in f.li.iter_mut() {
        *i = f.pinv[*i];
    }
    Ok(f)
}

/// Sparse triangular solve `x = L \ A(:, col)` over the partially built
/// factor. Returns `top`; the nonzero pattern is `xi[top..n]` in
/// topological order.
#[allow(clippy::too_many_arguments)]
fn spsolve(
    f: &Factors,
    ap: &[usize],
    ai: &[usize],
    ax: &[f64],
    col: usize,
    xi: &mut [usize],
    x: &mut [f64],
    marked: &mut [bool],
    n: usize,
) -> usize {
    let mut top = n;
    for p in ap[col]..ap[col + 1] {
        let i = ai[p];
        if !marked[i] {
            top = dfs(f, i, top, xi, marked, n);
        }
    }
    for &i in &xi[top..n] {
        marked[i] = false;
    }

    for &i in &xi[top..n] {
        x[i] = 0.0;
    }
    for p in ap[col]..ap[col + 1] {
        x[ai[p]] = ax[p];
    }
    for px in top..n {
        let j = xi[px];
        let jj = f.pinv[j];
        if jj == UNSET {
            continue;
        }
        let xj = x[j];
        // Unit diagonal stored first.
        for p in f.lp[jj] + 1..f.lp[jj + 1] {
            x[f.li[p]] -= f.lx[p] * xj;
        }
    }
    top
}

/// Depth-first search from `start` through the columns of L, pushing
/// finished nodes onto `xi[..top]`. `xi[n..]` is the recursion stack.
fn dfs(f: &Factors, start: usize, mut top: usize, xi: &mut [usize], marked: &mut [bool], n: usize) -> usize {
    let (out, stack) = xi.split_at_mut(n);
    let mut pstack: Vec<usize> = Vec::new();
    let mut head: isize = 0;
    stack[0] = start;
    pstack.push(0);
    while head >= 0 {
        let h = head as usize;
        let j = stack[h];
        let jj = f.pinv[j];
        if !marked[j] {
            marked[j] = true;
            pstack[h] = if jj == UNSET { 0 } else { f.lp[jj] };
        }
        let end = if jj == UNSET { 0 } else { lp_end(f, jj) };
        let mut done = true;
        let mut p = pstack[h];
        while p < end {
            let i = f.li[p];
            p += 1;
            if marked[i] {
                continue;
            }
            pstack[h] = p;
            head += 1;
            let nh = head as usize;
            stack[nh] = i;
            if pstack.len() <= nh {
                pstack.push(0);
            }
            done = false;
            break;
        }
        if done {
            head -= 1;
            top -= 1;
            out[top] = j;
        }
    }
    top
}

/// End of column `jj` of L while the factorization is still in progress.
fn lp_end(f: &Factors, jj: usize) -> usize {
    // Columns before the current one are complete; lp[jj + 1] was written
    // when column jj + 1 started.
    f.lp[jj + 1]
}

fn solve(f: &Factors, q: &[usize], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[f.pinv[i]] = b[i];
    }
    for j in 0..n {
        let yj = y[j];
        for p in f.lp[j] + 1..f.lp[j + 1] {
            y[f.li[p]] -= f.lx[p] * yj;
        }
    }
    for j in (0..n).rev() {
        let last = f.up[j + 1] - 1;
        y[j] /= f.ux[last];
        let yj = y[j];
        for p in f.up[j]..last {
            y[f.ui[p]] -= f.ux[p] * yj;
        }
    }
    let mut x = vec![0.0; n];
    for k in 0..n {
        x[q[k]] = y[k];
    }
    x
}
