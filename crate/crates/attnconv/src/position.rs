//! Absolute and relative positional information.

use rand::Rng;

use crate::activation::{activate_row, ActivationVariant};
use crate::conv::SelectionRule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learned `[N×C]` table added once to the patch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsolutePositionTable {
    pub table: Tensor,
}

impl AbsolutePositionTable {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::Config(format!("position table must be [N×C], got {:?}", table.shape())));
        }
        Ok(AbsolutePositionTable { table })
    }

    pub fn zeros(tokens: usize, channels: usize) -> Self {
        AbsolutePositionTable {
            table: Tensor::zeros(&[tokens, channels]),
        }
    }
}

pub fn add_absolute(x: &Tensor, table: &AbsolutePositionTable) -> Result<Tensor> {
    if x.shape() != table.table.shape() {
        return Err(Error::dim("add_absolute", x.shape(), table.table.shape()));
    }
    let data = x.data().iter().zip(table.table.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Bias indexed by the displacement `(Δrow, Δcol)` between a query and a
/// selected key, one row of `(2h−1)(2w−1)` cells per head (or per channel).
///
/// With `class_token` the token sequence is `[cls, grid...]` and three
/// extra cells per row hold the cls→token, token→cls and cls→cls biases.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeBiasTable {
    scope_h: usize,
    scope_w: usize,
    class_token: bool,
    /// `[rows × cells]`
    table: Tensor,
}

impl RelativeBiasTable {
    pub fn cells_for(scope_h: usize, scope_w: usize, class_token: bool) -> usize {
        (2 * scope_h - 1) * (2 * scope_w - 1) + if class_token { 3 } else { 0 }
    }

    pub fn new(table: Tensor, scope_h: usize, scope_w: usize, class_token: bool) -> Result<Self> {
        if scope_h == 0 || scope_w == 0 {
            return Err(Error::Config("relative scope must be positive".into()));
        }
        let cells = Self::cells_for(scope_h, scope_w, class_token);
        if table.rank() != 2 || table.cols() != cells {
            return Err(Error::dim("relative table", table.shape(), &[table.rows(), cells]));
        }
        Ok(RelativeBiasTable {
            scope_h,
            scope_w,
            class_token,
            table,
        })
    }

    pub fn zeros(rows: usize, scope_h: usize, scope_w: usize, class_token: bool) -> Self {
        let cells = Self::cells_for(scope_h, scope_w, class_token);
        Self::new(Tensor::zeros(&[rows, cells]), scope_h, scope_w, class_token).unwrap()
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, scope_h: usize, scope_w: usize, class_token: bool, rng: &mut R) -> Self {
        let cells = Self::cells_for(scope_h, scope_w, class_token);
        Self::new(Tensor::uniform(&[rows, cells], -1.0, 1.0, rng), scope_h, scope_w, class_token).unwrap()
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }

    pub fn cells(&self) -> usize {
        self.table.cols()
    }

    pub fn scope(&self) -> (usize, usize) {
        (self.scope_h, self.scope_w)
    }

    pub fn class_token(&self) -> bool {
        self.class_token
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn into_table(self) -> Tensor {
        self.table
    }

    /// Cell holding displacement `(dr, dc)` = origin − query.
    pub fn cell(&self, dr: isize, dc: isize) -> usize {
        let (h, w) = (self.scope_h as isize, self.scope_w as isize);
        debug_assert!(dr.abs() < h && dc.abs() < w);
        ((dr + h - 1) * (2 * w - 1) + dc + w - 1) as usize
    }

    fn class_cells(&self) -> (usize, usize, usize) {
        let base = (2 * self.scope_h - 1) * (2 * self.scope_w - 1);
        (base, base + 1, base + 2)
    }

    /// Cell indices for the queries and keys of one `h×w` window in
    /// row-major window order: `[n × n]`.
    pub fn window_index(&self) -> Vec<usize> {
        let n = self.scope_h * self.scope_w;
        let mut idx = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dr = (j / self.scope_w) as isize - (i / self.scope_w) as isize;
                let dc = (j % self.scope_w) as isize - (i % self.scope_w) as isize;
                idx.push(self.cell(dr, dc));
            }
        }
        idx
    }
}

/// Cell indices `[N_q × n]` aligned with the kernels `rule` selects on
/// an `h×w` grid (plus the class token when the table carries one).
pub fn relative_index(grid: (usize, usize), rule: &SelectionRule, table: &RelativeBiasTable) -> Result<(usize, usize, Vec<usize>)> {
    let (gh, gw) = grid;
    let n_grid = gh * gw;
    match rule {
        SelectionRule::Global => {
            if table.scope() != grid {
                return Err(Error::Config(format!(
                    "global table scope {:?} does not match grid {grid:?}",
                    table.scope()
                )));
            }
            let off = usize::from(table.class_token);
            let n = n_grid + off;
            let (to_tok, to_cls, self_cls) = table.class_cells();
            let mut idx = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    idx.push(match (i < off, j < off) {
                        (true, true) => self_cls,
                        (true, false) => to_tok,
                        (false, true) => to_cls,
                        (false, false) => {
                            let (qi, kj) = (i - off, j - off);
                            table.cell(
                                (kj / gw) as isize - (qi / gw) as isize,
                                (kj % gw) as isize - (qi % gw) as isize,
                            )
                        }
                    });
                }
            }
            Ok((n, n, idx))
        }
        &SelectionRule::LocalWindow {
            window_h,
            window_w,
            grid_h,
            grid_w,
        } => {
            if (grid_h, grid_w) != grid {
                return Err(Error::Config(format!("rule grid {grid_h}x{grid_w} does not match {gh}x{gw}")));
            }
            if table.scope() != (window_h, window_w) || table.class_token {
                return Err(Error::Config("window table must span one window and carry no class token".into()));
            }
            let n = window_h * window_w;
            let mut idx = Vec::with_capacity(n_grid * n);
            for i in 0..n_grid {
                for j in rule.selected_origins(i, n_grid)? {
                    idx.push(table.cell(
                        (j / gw) as isize - (i / gw) as isize,
                        (j % gw) as isize - (i % gw) as isize,
                    ));
                }
            }
            Ok((n_grid, n, idx))
        }
        _ => Err(Error::Config(
            "relative bias has no positional meaning under soft selection".into(),
        )),
    }
}

/// `p[r][i][j]`: the table cell for the displacement from query `i` to the
/// origin of its `j`-th selected kernel.
pub fn materialize_relative_bias(grid: (usize, usize), rule: &SelectionRule, table: &RelativeBiasTable) -> Result<Tensor> {
    let (nq, n, idx) = relative_index(grid, rule, table)?;
    let rows = table.rows();
    let cells = table.cells();
    let src = table.table.data();
    let mut out = Vec::with_capacity(rows * idx.len());
    for r in 0..rows {
        out.extend(idx.iter().map(|&c| src[r * cells + c]));
    }
    Ok(Tensor::from_parts(vec![rows, nq, n], out))
}

/// Where a logit bias can be applied with identical results.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasSite {
    Logits,
    ValuesDecomposed,
}

/// Linear variants allow moving the bias onto the values:
/// `(q kᵀ·s + p) v = q kᵀ v·s + p v`. Implementations always add `p` to
/// the logits.
pub fn bias_application_site(variant: ActivationVariant) -> BiasSite {
    if variant.is_linear() {
        BiasSite::ValuesDecomposed
    } else {
        BiasSite::Logits
    }
}

/// Per-head `act(q kᵀ·s) v + p v` on already projected `q, k, v: [N×C]`
/// and `p: [H×N×N]`. Valid only where `p` can be pulled out of the
/// activation; independent of the tape.
pub fn decomposed_bias_attention(q: &Tensor, k: &Tensor, v: &Tensor, p: &Tensor, heads: usize, variant: ActivationVariant) -> Result<Tensor> {
    if bias_application_site(variant) != BiasSite::ValuesDecomposed {
        return Err(Error::Config(format!("{variant} is not linear in its logits")));
    }
    let (n, c) = (q.rows(), q.cols());
    if k.shape() != [n, c] || v.shape() != [n, c] || p.shape() != [heads, n, n] || c % heads != 0 {
        return Err(Error::dim("decomposed_bias_attention", p.shape(), &[heads, n, n]));
    }
    let ch = c / heads;
    let mut attn = vec![0.0; n * c];
    let mut pos = vec![0.0; n * c];
    for h in 0..heads {
        let r = h * ch..(h + 1) * ch;
        for i in 0..n {
            let raw: Vec<f64> = (0..n)
                .map(|j| q.row(i)[r.clone()].iter().zip(&k.row(j)[r.clone()]).map(|(a, b)| a * b).sum())
                .collect();
            let a = activate_row(&raw, variant, ch, 1.0, None, None);
            for j in 0..n {
                let pij = p.get(&[h, i, j]);
                for (d, &vv) in v.row(j)[r.clone()].iter().enumerate() {
                    attn[i * c + h * ch + d] += a[j] * vv;
                    pos[i * c + h * ch + d] += pij * vv;
                }
            }
        }
    }
    let out = attn.iter().zip(&pos).map(|(a, b)| a + b).collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn absolute_trivia() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        assert_eq!(add_absolute(&x, &AbsolutePositionTable::zeros(4, 3)).unwrap(), x);
        let t = AbsolutePositionTable::new(x.clone()).unwrap();
        assert_eq!(add_absolute(&Tensor::zeros(&[4, 3]), &t).unwrap(), x);
        assert!(matches!(add_absolute(&x, &AbsolutePositionTable::zeros(5, 3)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn one_by_one_and_one_by_two() {
        let t = RelativeBiasTable::new(Tensor::new(vec![1, 1], vec![0.5]).unwrap(), 1, 1, false).unwrap();
        let p = materialize_relative_bias((1, 1), &SelectionRule::Global, &t).unwrap();
        assert_eq!(p.data(), &[0.5]);

        // cells for Δcol = -1, 0, +1
        let t = RelativeBiasTable::new(Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap(), 1, 2, false).unwrap();
        let p = materialize_relative_bias((1, 2), &SelectionRule::Global, &t).unwrap();
        assert_eq!(p.data(), &[20.0, 30.0, 10.0, 20.0]);
    }

    #[test]
    fn window_blocks_are_identical() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let t = RelativeBiasTable::random(2, 2, 2, false, &mut r);
        let rule = SelectionRule::local(2, 2, 4, 4);
        let p = materialize_relative_bias((4, 4), &rule, &t).unwrap();
        // Brute-force: for each window, its queries in window order.
        let block = |wr: usize, wc: usize| -> Vec<f64> {
            let mut v = Vec::new();
            for h in 0..2 {
                for a in 0..4 {
                    let i = (wr * 2 + a / 2) * 4 + wc * 2 + a % 2;
                    v.extend((0..4).map(|j| p.get(&[h, i, j])));
                }
            }
            v
        };
        let b0 = block(0, 0);
        for (wr, wc) in [(0, 1), (1, 0), (1, 1)] {
            assert_eq!(block(wr, wc), b0);
        }
        let idx = t.window_index();
        for h in 0..2 {
            for a in 0..16 {
                assert_eq!(b0[h * 16 + a], t.table().at(h, idx[a]));
            }
        }
    }

    #[test]
    fn equal_displacements_share_cells() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let t = RelativeBiasTable::random(1, 3, 3, false, &mut r);
        let p = materialize_relative_bias((3, 3), &SelectionRule::Global, &t).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                for i2 in 0..9 {
                    for j2 in 0..9 {
                        let d1 = (j / 3) as i32 - (i / 3) as i32 + 10 * ((j % 3) as i32 - (i % 3) as i32);
                        let d2 = (j2 / 3) as i32 - (i2 / 3) as i32 + 10 * ((j2 % 3) as i32 - (i2 % 3) as i32);
                        if d1 == d2 {
                            assert_eq!(p.get(&[0, i, j]), p.get(&[0, i2, j2]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn class_token_cells() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let t = RelativeBiasTable::random(2, 2, 2, true, &mut r);
        assert_eq!(t.cells(), 12);
        let p = materialize_relative_bias((2, 2), &SelectionRule::Global, &t).unwrap();
        assert_eq!(p.shape(), &[2, 5, 5]);
        assert_eq!(p.get(&[1, 0, 0]), t.table().at(1, 11));
        assert_eq!(p.get(&[1, 0, 3]), t.table().at(1, 9));
        assert_eq!(p.get(&[1, 3, 0]), t.table().at(1, 10));
    }

    #[test]
    fn soft_and_mismatched_rules_rejected() {
        let t = RelativeBiasTable::zeros(1, 2, 2, false);
        let soft = SelectionRule::SoftProjection {
            projection: Tensor::ones(&[2, 4]),
        };
        assert!(matches!(materialize_relative_bias((2, 2), &soft, &t), Err(Error::Config(_))));
        assert!(materialize_relative_bias((3, 3), &SelectionRule::Global, &t).is_err());
    }

    #[test]
    fn sites() {
        assert_eq!(bias_application_site(ActivationVariant::SOFTMAX), BiasSite::Logits);
        assert_eq!(bias_application_site(ActivationVariant::SCALING), BiasSite::ValuesDecomposed);
        assert_eq!(bias_application_site(ActivationVariant::NONE), BiasSite::ValuesDecomposed);
        assert_eq!(bias_application_site(ActivationVariant::SCALING_RELU), BiasSite::Logits);
    }
}
