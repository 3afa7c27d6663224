use super::{gemm, Real};
use crate::error::{Error, Result};

/// Edges grouped by target, each carrying sparse kernel weights.
///
/// For edge `j -> i` with entries `(p, w)` the message is
/// `sum_p w * (x_j W_p)`, summed over all edges into `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGraph<T> {
    pub num_nodes: usize,
    pub num_kernels: usize,
    pub entries_per_edge: usize,
    /// CSR row pointers by target node.
    pub offsets: Vec<usize>,
    pub sources: Vec<u32>,
    pub kernel_index: Vec<u32>,
    pub kernel_weight: Vec<T>,
}

/// Rows of the expanded operand built per pass; bounds scratch memory.
const CHUNK_VALUES: usize = 1 << 20;

impl<T: Real> SplineGraph<T> {
    /// `kernel_index`/`kernel_weight` hold `entries_per_edge` values per edge,
    /// in the order of `edges`.
    pub fn new(
        num_nodes: usize,
        num_kernels: usize,
        entries_per_edge: usize,
        edges: &[[u32; 2]],
        kernel_index: &[u32],
        kernel_weight: &[T],
    ) -> Result<Self> {
        let s = entries_per_edge;
        if kernel_index.len() != edges.len() * s || kernel_weight.len() != edges.len() * s {
            return Err(Error::Shape {
                context: "SplineGraph::new".into(),
                detail: "kernel entries do not match edge count".into(),
            });
        }
        let mut counts = vec![0usize; num_nodes + 1];
        for (e, &[src, dst]) in edges.iter().enumerate() {
            for &v in &[src, dst] {
                if v as usize >= num_nodes {
                    return Err(Error::Index {
                        context: "spline graph edge",
                        index: v as usize,
                        len: num_nodes,
                    });
                }
            }
            if let Some(&p) = kernel_index[e * s..(e + 1) * s].iter().find(|&&p| p as usize >= num_kernels) {
                return Err(Error::Index {
                    context: "spline kernel index",
                    index: p as usize,
                    len: num_kernels,
                });
            }
            counts[dst as usize + 1] += 1;
        }
        for i in 0..num_nodes {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let ne = edges.len();
        let mut sources = vec![0u32; ne];
        let mut idx = vec![0u32; ne * s];
        let mut wts = vec![T::zero(); ne * s];
        for (e, &[src, dst]) in edges.iter().enumerate() {
            let slot = fill[dst as usize];
            fill[dst as usize] += 1;
            sources[slot] = src;
            idx[slot * s..(slot + 1) * s].copy_from_slice(&kernel_index[e * s..(e + 1) * s]);
            wts[slot * s..(slot + 1) * s].copy_from_slice(&kernel_weight[e * s..(e + 1) * s]);
        }
        Ok(Self {
            num_nodes,
            num_kernels,
            entries_per_edge: s,
            offsets,
            sources,
            kernel_index: idx,
            kernel_weight: wts,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    fn chunk_rows(&self, cin: usize) -> usize {
        (CHUNK_VALUES / (self.num_kernels * cin).max(1)).clamp(1, self.num_nodes.max(1))
    }

    /// Expanded rows `[start, end)`: `a[i, p * cin + c] = sum w * x[src, c]`.
    fn expand(&self, x: &[T], cin: usize, start: usize, end: usize, a: &mut Vec<T>) {
        let width = self.num_kernels * cin;
        a.clear();
        a.resize((end - start) * width, T::zero());
        let s = self.entries_per_edge;
        for i in start..end {
            let row = &mut a[(i - start) * width..(i - start + 1) * width];
            for e in self.offsets[i]..self.offsets[i + 1] {
                let xs = &x[self.sources[e] as usize * cin..][..cin];
                for t in e * s..(e + 1) * s {
                    let w = self.kernel_weight[t];
                    let dst = &mut row[self.kernel_index[t] as usize * cin..][..cin];
                    for (d, &v) in dst.iter_mut().zip(xs) {
                        *d += w * v;
                    }
                }
            }
        }
    }

    /// `x: [N, cin]`, `w: [num_kernels * cin, cout]` -> `[N, cout]`.
    pub fn forward(&self, x: &[T], cin: usize, w: &[T], cout: usize) -> Vec<T> {
        let n = self.num_nodes;
        let width = self.num_kernels * cin;
        let mut out = vec![T::zero(); n * cout];
        let mut a = Vec::new();
        let step = self.chunk_rows(cin);
        let mut start = 0;
        while start < n {
            let end = (start + step).min(n);
            self.expand(x, cin, start, end, &mut a);
            gemm(false, false, end - start, cout, width, &a, w, T::zero(), &mut out[start * cout..end * cout]);
            start = end;
        }
        out
    }

    /// Accumulates into `dx` and `dw`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[T],
        cin: usize,
        w: &[T],
        cout: usize,
        dout: &[T],
        dx: &mut [T],
        dw: &mut [T],
    ) {
        let n = self.num_nodes;
        let width = self.num_kernels * cin;
        let s = self.entries_per_edge;
        let mut a = Vec::new();
        let mut da = Vec::new();
        let step = self.chunk_rows(cin);
        let mut start = 0;
        while start < n {
            let end = (start + step).min(n);
            let rows = end - start;
            let dchunk = &dout[start * cout..end * cout];
            self.expand(x, cin, start, end, &mut a);
            gemm(true, false, width, cout, rows, &a, dchunk, T::one(), dw);
            da.clear();
            da.resize(rows * width, T::zero());
            gemm(false, true, rows, width, cout, dchunk, w, T::zero(), &mut da);
            for i in start..end {
                let row = &da[(i - start) * width..(i - start + 1) * width];
                for e in self.offsets[i]..self.offsets[i + 1] {
                    let dxs = &mut dx[self.sources[e] as usize * cin..][..cin];
                    for t in e * s..(e + 1) * s {
                        let wt = self.kernel_weight[t];
                        let src = &row[self.kernel_index[t] as usize * cin..][..cin];
                        for (d, &v) in dxs.iter_mut().zip(src) {
                            *d += wt * v;
                        }
                    }
                }
            }
            start = end;
        }
    }
}
