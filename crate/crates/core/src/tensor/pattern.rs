/// Row-compressed list of which keys each query may attend to.
///
/// Keys of every row are sorted ascending. Entry `e` of the flattened
/// pattern belongs to the row `r` with `row_ptr[r] <= e < row_ptr[r + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePattern {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    keys: Vec<usize>,
}

impl SparsePattern {
    /// Builds a pattern from per-row key lists. Keys are sorted and
    /// de-duplicated; keys `>= n_cols` are dropped.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<usize>>) -> Self {
        let n_rows = rows.len();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut keys = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.retain(|&k| k < n_cols);
            r.sort_unstable();
            r.dedup();
            keys.extend_from_slice(&r);
            row_ptr.push(keys.len());
        }
        SparsePattern {
            n_rows,
            n_cols,
            row_ptr,
            keys,
        }
    }

    /// Every query attends to every key.
    pub fn dense(n_rows: usize, n_cols: usize) -> Self {
        let keys = (0..n_rows).flat_map(|_| 0..n_cols).collect();
        let row_ptr = (0..=n_rows).map(|r| r * n_cols).collect();
        SparsePattern {
            n_rows,
            n_cols,
            row_ptr,
            keys,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Total number of (query, key) entries.
    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    pub fn row_keys(&self, r: usize) -> &[usize] {
        &self.keys[self.row_range(r)]
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    /// Flat entry index of `(row, key)`, if present.
    pub fn position(&self, row: usize, key: usize) -> Option<usize> {
        let start = self.row_ptr[row];
        self.row_keys(row)
            .binary_search(&key)
            .ok()
            .map(|off| start + off)
    }
}
