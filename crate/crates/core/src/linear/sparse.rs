use super::AssemblyError;

/// Compressed-column matrix with its right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub rhs: Vec<f64>,
}

/// Builds a compressed system from triplets, summing duplicates.
///
/// Duplicates are summed in input order, so assembling the same triplet
/// list twice gives bit-identical values.
pub fn assemble(
    triplets: &[(usize, usize, f64)],
    rhs: &[(usize, f64)],
    n: usize,
) -> Result<SparseSystem, AssemblyError> {
    for &(row, col, _) in triplets {
        if row >= n || col >= n {
            return Err(AssemblyError::OutOfRange { row, col, n });
        }
    }
    let mut b = vec![0.0; n];
    for &(row, v) in rhs {
        if row >= n {
            return Err(AssemblyError::OutOfRange { row, col: 0, n });
        }
        b[row] += v;
    }

    // Counting sort by column, then a stable sort of each column by row.
    let mut count = vec![0usize; n + 1];
    for &(_, col, _) in triplets {
        count[col + 1] += 1;
    }
    for j in 0..n {
        count[j + 1] += count[j];
    }
    let mut next = count.clone();
    let mut order = vec![0usize; triplets.len()];
    for (t, &(_, col, _)) in triplets.iter().enumerate() {
        order[next[col]] = t;
        next[col] += 1;
    }

    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx = Vec::with_capacity(triplets.len());
    let mut values = Vec::with_capacity(triplets.len());
    col_ptr.push(0);
    for j in 0..n {
        let slice = &mut order[count[j]..count[j + 1]];
        slice.sort_by_key(|&t| triplets[t].0);
        for &t in slice.iter() {
            let (row, _, v) = triplets[t];
            if row_idx.len() > col_ptr[j] && *row_idx.last().unwrap() == row {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(row);
                values.push(v);
            }
        }
        col_ptr.push(row_idx.len());
    }
    Ok(SparseSystem { n, col_ptr, row_idx, values, rhs: b })
}

impl SparseSystem {
    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        match self.row_idx[range.clone()].binary_search(&row) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * x[j];
            }
        }
        y
    }

    /// `A x - b`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.mul_vec(x);
        r.iter_mut().zip(&self.rhs).for_each(|(ri, bi)| *ri -= bi);
        r
    }

    pub fn same_pattern(&self, col_ptr: &[usize], row_idx: &[usize]) -> bool {
        self.col_ptr == col_ptr && self.row_idx == row_idx
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                d[self.row_idx[p]][j] = self.values[p];
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let sys = assemble(&[(0, 0, 1.0), (0, 0, 2.0)], &[], 1).unwrap();
        assert_eq!(sys.nnz(), 1);
        assert_eq!(sys.get(0, 0), 3.0);
    }

    #[test]
    fn out_of_range_rejected() {
        assert_eq!(
            assemble(&[(0, 3, 1.0)], &[], 3),
            Err(AssemblyError::OutOfRange { row: 0, col: 3, n: 3 })
        );
        assert!(assemble(&[], &[(5, 1.0)], 3).is_err());
    }

    #[test]
    fn repeated_assembly_is_bit_identical() {
        let trips: Vec<_> = (0..50)
            .map(|k| ((k * 7) % 5, (k * 3) % 5, 0.1 * k as f64 + 1e-17 * k as f64))
            .collect();
        let a = assemble(&trips, &[(1, 0.3), (1, 0.1)], 5).unwrap();
        let b = assemble(&trips, &[(1, 0.3), (1, 0.1)], 5).unwrap();
        assert_eq!(a, b);
        for j in 0..5 {
            let rows = &a.row_idx[a.col_ptr[j]..a.col_ptr[j + 1]];
            assert!(rows.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
