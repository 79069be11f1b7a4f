/// Square sparse matrix in compressed-sparse-row form.
///
/// Column indices of each row are sorted ascending. `values` is optional:
/// attention ops only need the sparsity pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Option<Vec<f32>>,
}

impl Csr {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn row_values(&self, i: usize) -> Option<&[f32]> {
        self.values
            .as_ref()
            .map(|v| &v[self.offsets[i]..self.offsets[i + 1]])
    }

    /// Identity pattern with unit weights.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
            values: Some(vec![1.0; n]),
        }
    }
}
