//! Two-way delay embedding of a speed matrix into a fourth order tensor.
//!
//! An N x T matrix X is lifted by sliding a tau_s x tau_t window over it:
//! tensor entry (a, b, i, j) holds X[i+a, j+b], giving a
//! tau_s x tau_t x (N-tau_s+1) x (T-tau_t+1) tensor in which every window
//! appears as a patch. The balanced "spatiotemporal" unfolding flattens the
//! two patch axes into rows and the two window axes into columns
//! (column-major within each pair), producing the p x q matrix whose low
//! rank is the completion surrogate. The inverse map averages the multiple
//! copies of each source cell.
//!
//! Fused variants compose embedding with (un)folding without materializing
//! the tensor; at realistic sizes the tensor is an order of magnitude larger
//! than the matrices on either side of it.

use std::io::{Read, Write};

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};

/// Window lengths of the delay embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingSpec {
    pub tau_s: usize,
    pub tau_t: usize,
}

impl EmbeddingSpec {
    pub fn new(tau_s: usize, tau_t: usize) -> Self {
        EmbeddingSpec { tau_s, tau_t }
    }

    /// The window must be non-empty and fit inside the field.
    pub fn validate_for(&self, rows: usize, cols: usize) -> Result<()> {
        if self.tau_s == 0 || self.tau_t == 0 || self.tau_s > rows || self.tau_t > cols {
            return Err(Error::EmbeddingTooLarge {
                tau_s: self.tau_s,
                tau_t: self.tau_t,
                rows,
                cols,
            });
        }
        Ok(())
    }

    /// Number of window placements along each axis.
    pub fn window_counts(&self, rows: usize, cols: usize) -> (usize, usize) {
        (rows - self.tau_s + 1, cols - self.tau_t + 1)
    }

    pub fn tensor_shape(&self, rows: usize, cols: usize) -> (usize, usize, usize, usize) {
        let (n3, n4) = self.window_counts(rows, cols);
        (self.tau_s, self.tau_t, n3, n4)
    }

    /// Rows of the balanced unfolding: one per within-patch offset.
    pub fn patch_len(&self) -> usize {
        self.tau_s * self.tau_t
    }

    /// (p, q) shape of the balanced unfolding.
    pub fn unfolded_shape(&self, rows: usize, cols: usize) -> (usize, usize) {
        let (n3, n4) = self.window_counts(rows, cols);
        (self.patch_len(), n3 * n4)
    }
}

/// A delay-embedded tensor together with the provenance needed to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelTensor {
    pub data: Array4<f64>,
    pub spec: EmbeddingSpec,
    pub source_shape: (usize, usize),
}

impl HankelTensor {
    /// Check that the data dimensions agree with spec and source shape.
    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.source_shape;
        self.spec.validate_for(rows, cols)?;
        let expect = self.spec.tensor_shape(rows, cols);
        if self.data.dim() != expect {
            return Err(Error::InconsistentTensor(format!(
                "data has shape {:?}, spec implies {:?}",
                self.data.dim(),
                expect
            )));
        }
        Ok(())
    }
}

/// How many windows of length `tau` over a `len`-long axis cover index `idx`.
pub fn window_multiplicity(len: usize, tau: usize, idx: usize) -> usize {
    debug_assert!(tau >= 1 && tau <= len && idx < len);
    (idx + 1).min(tau).min(len - tau + 1).min(len - idx)
}

/// Precomputed embedding geometry for one field shape: window counts and the
/// per-axis cover multiplicities used by the inverse map.
#[derive(Debug, Clone)]
pub struct Hankelizer {
    spec: EmbeddingSpec,
    rows: usize,
    cols: usize,
    n3: usize,
    n4: usize,
    row_mult: Vec<f64>,
    col_mult: Vec<f64>,
}

impl Hankelizer {
    pub fn new(spec: EmbeddingSpec, shape: (usize, usize)) -> Result<Self> {
        let (rows, cols) = shape;
        spec.validate_for(rows, cols)?;
        let (n3, n4) = spec.window_counts(rows, cols);
        let row_mult = (0..rows)
            .map(|m| window_multiplicity(rows, spec.tau_s, m) as f64)
            .collect();
        let col_mult = (0..cols)
            .map(|n| window_multiplicity(cols, spec.tau_t, n) as f64)
            .collect();
        Ok(Hankelizer {
            spec,
            rows,
            cols,
            n3,
            n4,
            row_mult,
            col_mult,
        })
    }

    pub fn spec(&self) -> EmbeddingSpec {
        self.spec
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn unfolded_shape(&self) -> (usize, usize) {
        self.spec.unfolded_shape(self.rows, self.cols)
    }

    fn check_source(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim() != (self.rows, self.cols) {
            return Err(Error::ShapeMismatch(format!(
                "expected field {}x{}, got {}x{}",
                self.rows,
                self.cols,
                x.dim().0,
                x.dim().1
            )));
        }
        Ok(())
    }

    fn check_unfolded(&self, m: &Array2<f64>) -> Result<()> {
        if m.dim() != self.unfolded_shape() {
            return Err(Error::FoldShape(format!(
                "expected unfolded matrix {:?}, got {:?}",
                self.unfolded_shape(),
                m.dim()
            )));
        }
        Ok(())
    }

    pub fn hankelize(&self, x: &Array2<f64>) -> Result<HankelTensor> {
        self.check_source(x)?;
        let (ts, tt) = (self.spec.tau_s, self.spec.tau_t);
        let mut data = Array4::<f64>::zeros((ts, tt, self.n3, self.n4));
        for a in 0..ts {
            for b in 0..tt {
                for i in 0..self.n3 {
                    for j in 0..self.n4 {
                        data[[a, b, i, j]] = x[[i + a, j + b]];
                    }
                }
            }
        }
        Ok(HankelTensor {
            data,
            spec: self.spec,
            source_shape: (self.rows, self.cols),
        })
    }

    /// Average the copies of every source cell back into a matrix.
    pub fn inverse_hankelize(&self, t: &HankelTensor) -> Result<Array2<f64>> {
        t.validate()?;
        if t.source_shape != (self.rows, self.cols) || t.spec != self.spec {
            return Err(Error::InconsistentTensor(format!(
                "tensor was embedded as {:?} from {:?}, hankelizer is {:?} over {:?}",
                t.spec,
                t.source_shape,
                self.spec,
                (self.rows, self.cols)
            )));
        }
        let (ts, tt) = (self.spec.tau_s, self.spec.tau_t);
        let mut acc = Array2::<f64>::zeros((self.rows, self.cols));
        for a in 0..ts {
            for b in 0..tt {
                for i in 0..self.n3 {
                    for j in 0..self.n4 {
                        acc[[i + a, j + b]] += t.data[[a, b, i, j]];
                    }
                }
            }
        }
        self.divide_by_multiplicity(&mut acc);
        Ok(acc)
    }

    /// Embed and unfold in one pass: entry (a + tau_s*b, i + n3*j) of the
    /// result is X[i+a, j+b].
    pub fn unfold_hankelized(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_source(x)?;
        let (ts, tt) = (self.spec.tau_s, self.spec.tau_t);
        let (p, q) = self.unfolded_shape();
        let mut out = Array2::<f64>::zeros((p, q));
        for a in 0..ts {
            for b in 0..tt {
                let r = a + ts * b;
                for i in 0..self.n3 {
                    for j in 0..self.n4 {
                        out[[r, i + self.n3 * j]] = x[[i + a, j + b]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Fold and invert in one pass, averaging copies. Accumulation order
    /// matches [`Hankelizer::inverse_hankelize`] exactly, so the fused and
    /// tensor-materializing routes agree bitwise.
    pub fn inverse_from_unfolded(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_unfolded(m)?;
        let (ts, tt) = (self.spec.tau_s, self.spec.tau_t);
        let mut acc = Array2::<f64>::zeros((self.rows, self.cols));
        for a in 0..ts {
            for b in 0..tt {
                let r = a + ts * b;
                for i in 0..self.n3 {
                    for j in 0..self.n4 {
                        acc[[i + a, j + b]] += m[[r, i + self.n3 * j]];
                    }
                }
            }
        }
        self.divide_by_multiplicity(&mut acc);
        Ok(acc)
    }

    fn divide_by_multiplicity(&self, acc: &mut Array2<f64>) {
        for m in 0..self.rows {
            for n in 0..self.cols {
                acc[[m, n]] /= self.row_mult[m] * self.col_mult[n];
            }
        }
    }
}

/// Embed `x` with window `spec`, materializing the tensor.
pub fn hankelize(x: &Array2<f64>, spec: EmbeddingSpec) -> Result<HankelTensor> {
    Hankelizer::new(spec, x.dim())?.hankelize(x)
}

/// Invert a delay embedding by averaging the copies of each source cell.
pub fn inverse_hankelize(t: &HankelTensor) -> Result<Array2<f64>> {
    t.validate()?;
    Hankelizer::new(t.spec, t.source_shape)?.inverse_hankelize(t)
}

/// Balanced unfolding: rows enumerate within-patch offsets (a + tau_s*b),
/// columns enumerate window positions (i + n3*j).
pub fn st_unfold(t: &HankelTensor) -> Result<Array2<f64>> {
    t.validate()?;
    let (ts, tt, n3, n4) = t.data.dim();
    let mut out = Array2::<f64>::zeros((ts * tt, n3 * n4));
    for a in 0..ts {
        for b in 0..tt {
            let r = a + ts * b;
            for i in 0..n3 {
                for j in 0..n4 {
                    out[[r, i + n3 * j]] = t.data[[a, b, i, j]];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`st_unfold`]: rebuild the tensor from its balanced unfolding.
pub fn st_fold(
    m: &Array2<f64>,
    spec: EmbeddingSpec,
    source_shape: (usize, usize),
) -> Result<HankelTensor> {
    let (rows, cols) = source_shape;
    spec.validate_for(rows, cols)?;
    let (n3, n4) = spec.window_counts(rows, cols);
    let (p, q) = (spec.patch_len(), n3 * n4);
    if m.dim() != (p, q) {
        return Err(Error::FoldShape(format!(
            "expected {p}x{q} for spec {spec:?} over {rows}x{cols}, got {}x{}",
            m.dim().0,
            m.dim().1
        )));
    }
    let (ts, tt) = (spec.tau_s, spec.tau_t);
    let mut data = Array4::<f64>::zeros((ts, tt, n3, n4));
    for a in 0..ts {
        for b in 0..tt {
            let r = a + ts * b;
            for i in 0..n3 {
                for j in 0..n4 {
                    data[[a, b, i, j]] = m[[r, i + n3 * j]];
                }
            }
        }
    }
    Ok(HankelTensor {
        data,
        spec,
        source_shape,
    })
}

const DUMP_MAGIC: u64 = 0x5354_4854_444d_5031; // "STHTDMP1"
const DUMP_VERSION: u64 = 1;

/// Debug dump: 8 little-endian u64 header words (magic, version, tau_s,
/// tau_t, rows, cols, p, q) followed by the tensor entries as little-endian
/// f64 in column-major order (first index fastest).
pub fn write_tensor_dump<W: Write>(writer: &mut W, t: &HankelTensor) -> Result<()> {
    t.validate()?;
    let (rows, cols) = t.source_shape;
    let (p, q) = t.spec.unfolded_shape(rows, cols);
    let header = [
        DUMP_MAGIC,
        DUMP_VERSION,
        t.spec.tau_s as u64,
        t.spec.tau_t as u64,
        rows as u64,
        cols as u64,
        p as u64,
        q as u64,
    ];
    for word in header {
        writer.write_all(&word.to_le_bytes())?;
    }
    let (ts, tt, n3, n4) = t.data.dim();
    for j in 0..n4 {
        for i in 0..n3 {
            for b in 0..tt {
                for a in 0..ts {
                    writer.write_all(&t.data[[a, b, i, j]].to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_tensor_dump<R: Read>(reader: &mut R) -> Result<HankelTensor> {
    let mut word = [0u8; 8];
    let mut header = [0u64; 8];
    for h in header.iter_mut() {
        reader.read_exact(&mut word)?;
        *h = u64::from_le_bytes(word);
    }
    if header[0] != DUMP_MAGIC {
        return Err(Error::InconsistentTensor("bad dump magic".to_string()));
    }
    if header[1] != DUMP_VERSION {
        return Err(Error::InconsistentTensor(format!(
            "unsupported dump version {}",
            header[1]
        )));
    }
    let spec = EmbeddingSpec::new(header[2] as usize, header[3] as usize);
    let (rows, cols) = (header[4] as usize, header[5] as usize);
    spec.validate_for(rows, cols)?;
    let (p, q) = spec.unfolded_shape(rows, cols);
    if header[6] as usize != p || header[7] as usize != q {
        return Err(Error::InconsistentTensor(format!(
            "header claims p={} q={}, spec implies p={p} q={q}",
            header[6], header[7]
        )));
    }
    let (ts, tt, n3, n4) = spec.tensor_shape(rows, cols);
    let mut data = Array4::<f64>::zeros((ts, tt, n3, n4));
    for j in 0..n4 {
        for i in 0..n3 {
            for b in 0..tt {
                for a in 0..ts {
                    reader.read_exact(&mut word)?;
                    data[[a, b, i, j]] = f64::from_le_bytes(word);
                }
            }
        }
    }
    Ok(HankelTensor {
        data,
        spec,
        source_shape: (rows, cols),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_field(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..90.0))
    }

    #[test]
    fn unit_window_embedding_is_a_copy() {
        let x = random_field(4, 6, 1);
        let t = hankelize(&x, EmbeddingSpec::new(1, 1)).unwrap();
        assert_eq!(t.data.dim(), (1, 1, 4, 6));
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(t.data[[0, 0, i, j]], x[[i, j]]);
            }
        }
        assert_eq!(inverse_hankelize(&t).unwrap(), x);
    }

    #[test]
    fn two_by_three_example_matches_hand_enumeration() {
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let t = hankelize(&x, EmbeddingSpec::new(2, 2)).unwrap();
        assert_eq!(t.data.dim(), (2, 2, 1, 2));
        // window at j=0 is [[1,2],[4,5]], at j=1 is [[2,3],[5,6]]
        assert_eq!(t.data[[0, 0, 0, 0]], 1.0);
        assert_eq!(t.data[[0, 1, 0, 0]], 2.0);
        assert_eq!(t.data[[1, 0, 0, 0]], 4.0);
        assert_eq!(t.data[[1, 1, 0, 0]], 5.0);
        assert_eq!(t.data[[0, 0, 0, 1]], 2.0);
        assert_eq!(t.data[[0, 1, 0, 1]], 3.0);
        assert_eq!(t.data[[1, 0, 0, 1]], 5.0);
        assert_eq!(t.data[[1, 1, 0, 1]], 6.0);

        let m = st_unfold(&t).unwrap();
        assert_eq!(m.dim(), (4, 2));
        // columns are vectorized patches, patch-row index fastest
        assert_eq!(m.column(0).to_vec(), vec![1.0, 4.0, 2.0, 5.0]);
        assert_eq!(m.column(1).to_vec(), vec![2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn tensor_shape_at_full_scale() {
        let spec = EmbeddingSpec::new(40, 30);
        assert_eq!(spec.tensor_shape(130, 480), (40, 30, 91, 451));
        assert_eq!(spec.unfolded_shape(130, 480), (1200, 41041));
    }

    #[test]
    fn window_too_large_is_rejected() {
        let err = EmbeddingSpec::new(5, 2).validate_for(4, 10).unwrap_err();
        assert!(matches!(err, Error::EmbeddingTooLarge { .. }));
        assert!(EmbeddingSpec::new(0, 2).validate_for(4, 10).is_err());
        // degenerate full-size windows are legal
        assert!(EmbeddingSpec::new(4, 10).validate_for(4, 10).is_ok());
    }

    #[test]
    fn multiplicity_matches_brute_force_count() {
        for len in 1..=10usize {
            for tau in 1..=len {
                let n_win = len - tau + 1;
                for idx in 0..len {
                    let brute = (0..tau)
                        .flat_map(|a| (0..n_win).map(move |i| (a, i)))
                        .filter(|&(a, i)| i + a == idx)
                        .count();
                    assert_eq!(
                        window_multiplicity(len, tau, idx),
                        brute,
                        "len={len} tau={tau} idx={idx}"
                    );
                }
            }
        }
    }

    #[test]
    fn averaging_disagreeing_copies() {
        // In a 1x2 window over 2x3, cell (0,1) is covered twice. Replace its
        // copies by 0 and 4; the inverse must average them to 2.
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let spec = EmbeddingSpec::new(1, 2);
        let mut t = hankelize(&x, spec).unwrap();
        assert_eq!(t.data.dim(), (1, 2, 2, 2));
        t.data[[0, 1, 0, 0]] = 0.0; // copy of (0,1) from window j=0
        t.data[[0, 0, 0, 1]] = 4.0; // copy of (0,1) from window j=1
        let back = inverse_hankelize(&t).unwrap();
        assert_eq!(back[[0, 1]], 2.0);
        assert_eq!(back[[0, 0]], 1.0);
        assert_eq!(back[[1, 2]], 6.0);
    }

    #[test]
    fn inverse_rejects_inconsistent_tensor() {
        let x = random_field(4, 5, 2);
        let mut t = hankelize(&x, EmbeddingSpec::new(2, 2)).unwrap();
        t.source_shape = (5, 5);
        assert!(matches!(
            inverse_hankelize(&t).unwrap_err(),
            Error::InconsistentTensor(_) | Error::EmbeddingTooLarge { .. }
        ));
    }

    #[test]
    fn st_fold_rejects_wrong_shapes() {
        let m = Array2::<f64>::zeros((4, 3));
        assert!(matches!(
            st_fold(&m, EmbeddingSpec::new(2, 2), (3, 4)).unwrap_err(),
            Error::FoldShape(_)
        ));
    }

    #[test]
    fn fused_paths_match_materialized_paths_bitwise() {
        let spec = EmbeddingSpec::new(3, 4);
        let x = random_field(7, 9, 3);
        let h = Hankelizer::new(spec, x.dim()).unwrap();

        let fused = h.unfold_hankelized(&x).unwrap();
        let composed = st_unfold(&hankelize(&x, spec).unwrap()).unwrap();
        assert_eq!(fused, composed);

        let m = random_field(12, 30, 4); // p=12, q=5*6=30
        let direct = h.inverse_from_unfolded(&m).unwrap();
        let via_tensor = inverse_hankelize(&st_fold(&m, spec, x.dim()).unwrap()).unwrap();
        assert_eq!(direct, via_tensor);
    }

    #[test]
    fn dump_round_trips_bit_exactly() {
        let x = random_field(5, 6, 5);
        let t = hankelize(&x, EmbeddingSpec::new(2, 3)).unwrap();
        let mut buf = Vec::new();
        write_tensor_dump(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 8 * 8 + t.data.len() * 8);
        let back = read_tensor_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn dump_rejects_corrupt_header() {
        let x = random_field(3, 3, 6);
        let t = hankelize(&x, EmbeddingSpec::new(2, 2)).unwrap();
        let mut buf = Vec::new();
        write_tensor_dump(&mut buf, &t).unwrap();
        buf[0] ^= 0xff;
        assert!(matches!(
            read_tensor_dump(&mut buf.as_slice()).unwrap_err(),
            Error::InconsistentTensor(_)
        ));
    }

    fn arb_geometry() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
        (1usize..=12, 1usize..=12, 0u64..1000).prop_flat_map(|(rows, cols, seed)| {
            (1usize..=rows, 1usize..=cols).prop_map(move |(ts, tt)| (rows, cols, ts, tt, seed))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_recovers_source((rows, cols, ts, tt, seed) in arb_geometry()) {
            let x = random_field(rows, cols, seed);
            let spec = EmbeddingSpec::new(ts, tt);
            let t = hankelize(&x, spec).unwrap();
            let back = inverse_hankelize(&t).unwrap();
            for (a, b) in x.iter().zip(back.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn unfold_fold_round_trip_is_exact((rows, cols, ts, tt, seed) in arb_geometry()) {
            let x = random_field(rows, cols, seed);
            let spec = EmbeddingSpec::new(ts, tt);
            let t = hankelize(&x, spec).unwrap();
            let folded = st_fold(&st_unfold(&t).unwrap(), spec, (rows, cols)).unwrap();
            prop_assert_eq!(folded, t);
        }

        #[test]
        fn embedding_is_linear((rows, cols, ts, tt, seed) in arb_geometry(),
                               alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let spec = EmbeddingSpec::new(ts, tt);
            let x = random_field(rows, cols, seed);
            let y = random_field(rows, cols, seed.wrapping_add(1));
            let combo = alpha * &x + beta * &y;
            let lhs = hankelize(&combo, spec).unwrap();
            let rhs_x = hankelize(&x, spec).unwrap();
            let rhs_y = hankelize(&y, spec).unwrap();
            let rhs = alpha * &rhs_x.data + beta * &rhs_y.data;
            for (l, r) in lhs.data.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() <= 1e-12 + 1e-12 * r.abs());
            }
        }

        #[test]
        fn inverse_is_adjoint_up_to_multiplicity((rows, cols, ts, tt, seed) in arb_geometry()) {
            // <H(x), g> == <x, A(g)> where A accumulates copies without
            // averaging; the inverse is A followed by multiplicity division.
            let spec = EmbeddingSpec::new(ts, tt);
            let h = Hankelizer::new(spec, (rows, cols)).unwrap();
            let x = random_field(rows, cols, seed);
            let g_src = random_field(rows, cols, seed.wrapping_add(7));
            let g = h.hankelize(&g_src).unwrap();
            let hx = h.hankelize(&x).unwrap();
            let lhs: f64 = hx.data.iter().zip(g.data.iter()).map(|(a, b)| a * b).sum();
            let ag = {
                let mut avg = h.inverse_hankelize(&g).unwrap();
                for m in 0..rows {
                    for n in 0..cols {
                        let mult = window_multiplicity(rows, ts, m)
                            * window_multiplicity(cols, tt, n);
                        avg[[m, n]] *= mult as f64;
                    }
                }
                avg
            };
            let rhs: f64 = x.iter().zip(ag.iter()).map(|(a, b)| a * b).sum();
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * scale);
        }
    }
}
