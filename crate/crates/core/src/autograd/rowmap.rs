use ndarray::{Array2, Axis};

/// Sparse linear map over matrix rows: `out[i] = sum_j w_ij * in[j]`.
///
/// Covers gathers, causal time shifts, permutations, masked pooling and
/// tiling of per-record vectors across time steps.
#[derive(Debug, Clone)]
pub struct RowMap {
    in_rows: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    weight: Vec<f64>,
}

impl RowMap {
    /// Each output row copies one input row, or is zero for `None`.
    pub fn gather(in_rows: usize, rows: &[Option<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut src = Vec::with_capacity(rows.len());
        offsets.push(0);
        for r in rows {
            if let Some(j) = r {
                assert!(*j < in_rows, "gather index {j} out of range {in_rows}");
                src.push(*j);
            }
            offsets.push(src.len());
        }
        let weight = vec![1.0; src.len()];
        Self { in_rows, offsets, src, weight }
    }

    /// Build from explicit weighted entries per output row.
    pub fn weighted<I>(in_rows: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = Vec<(usize, f64)>>,
    {
        let mut offsets = vec![0];
        let mut src = Vec::new();
        let mut weight = Vec::new();
        for row in rows {
            for (j, w) in row {
                assert!(j < in_rows, "row map index {j} out of range {in_rows}");
                src.push(j);
                weight.push(w);
            }
            offsets.push(src.len());
        }
        Self { in_rows, offsets, src, weight }
    }

    /// Shift each length-`seq_len` block of rows forward in time by `shift`,
    /// filling the first `shift` rows of each block with zeros.
    pub fn causal_shift(batch: usize, seq_len: usize, shift: usize) -> Self {
        let rows: Vec<Option<usize>> = (0..batch * seq_len)
            .map(|r| {
                let t = r % seq_len;
                (t >= shift).then(|| r - shift)
            })
            .collect();
        Self::gather(batch * seq_len, &rows)
    }

    /// Repeat row `b` of a `batch`-row matrix across `seq_len` consecutive rows.
    pub fn tile(batch: usize, seq_len: usize) -> Self {
        let rows: Vec<Option<usize>> = (0..batch * seq_len).map(|r| Some(r / seq_len)).collect();
        Self::gather(batch, &rows)
    }

    /// Weighted mean over the valid prefix of each length-`seq_len` block.
    pub fn masked_mean(seq_len: usize, lengths: &[usize]) -> Self {
        let in_rows = lengths.len() * seq_len;
        Self::weighted(
            in_rows,
            lengths.iter().enumerate().map(|(b, &len)| {
                let w = if len == 0 { 0.0 } else { 1.0 / len as f64 };
                (0..len.min(seq_len)).map(|t| (b * seq_len + t, w)).collect()
            }),
        )
    }

    /// Select the row at step `lengths[b] - 1` of each block.
    pub fn last_step(seq_len: usize, lengths: &[usize]) -> Self {
        let rows: Vec<Option<usize>> = lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| (len > 0).then(|| b * seq_len + len.min(seq_len) - 1))
            .collect();
        Self::gather(lengths.len() * seq_len, &rows)
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub(crate) fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.in_rows, "row map input rows");
        let mut out = Array2::zeros((self.out_rows(), x.ncols()));
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for e in self.offsets[i]..self.offsets[i + 1] {
                row.scaled_add(self.weight[e], &x.row(self.src[e]));
            }
        }
        out
    }

    pub(crate) fn apply_transpose(&self, g: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.in_rows, g.ncols()));
        for i in 0..self.out_rows() {
            let gi = g.row(i);
            for e in self.offsets[i]..self.offsets[i + 1] {
                out.row_mut(self.src[e]).scaled_add(self.weight[e], &gi);
            }
        }
        out
    }
}
