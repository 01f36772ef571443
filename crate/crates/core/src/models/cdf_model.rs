//! Cumulative-distribution cardinality model for integer-filtered tables.
//!
//! Estimates P(col_1 <= x_1, ..., col_d <= x_d) as a product of per-column
//! conditional spline CDFs whose parameters come from a masked
//! feed-forward net: the head for column i only sees coordinates of
//! columns before it, so the factorization is a valid chain rule over the
//! schema's column order. Range selectivities then follow by signed
//! evaluation at the box corners, which is where estimates can dip below
//! zero — callers decide how to clamp.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::encoding::{encode_interval_bounds, Normalizer};
use crate::error::{Error, Result};
use crate::query::AliasQuery;
use crate::schema::{ColumnKind, Schema, Table};
use crate::util::derive_seed;

use super::spline::{self, DERIV_IDENTITY_RAW, RAW_PER_DIM};
use super::{xavier, Binding, CardModel, ParamSet};

pub const KIND: &str = "spline-cdf";

/// Hidden width of the masked conditioning net.
pub const HIDDEN: usize = 64;

#[derive(Debug)]
pub struct CdfModel {
    table: String,
    dims: usize,
    mask_w1: Vec<f64>,
    mask_w2: Vec<f64>,
    /// One `[HIDDEN, RAW_PER_DIM]` mask per column head.
    mask_heads: Vec<Vec<f64>>,
    params: ParamSet,
}

pub fn build(schema: &Schema, table: &Table, seed: u64) -> Result<Box<dyn CardModel>> {
    Ok(Box::new(CdfModel::new(schema, table, seed)?))
}

/// Degree labels for hidden units, cycling through 1..=d-1 (all 1 when
/// the table has a single filterable column, where conditioning is moot).
fn hidden_degrees(dims: usize) -> Vec<usize> {
    let top = dims.max(2) - 1;
    (0..HIDDEN).map(|h| 1 + h % top).collect()
}

impl CdfModel {
    pub fn new(schema: &Schema, table: &Table, seed: u64) -> Result<CdfModel> {
        let cols = schema.filterable_columns(table);
        if let Some(bad) = cols.iter().find(|c| c.kind != ColumnKind::Int) {
            return Err(Error::Model(format!(
                "{KIND} needs integer columns; {}.{} is {:?}",
                table.name, bad.name, bad.kind
            )));
        }
        let dims = cols.len();
        let mut params = ParamSet::new();
        let mut mask_w1 = Vec::new();
        let mut mask_w2 = Vec::new();
        let mut mask_heads = Vec::new();
        if dims > 0 {
            let degrees = hidden_degrees(dims);
            // input j (0-based) carries degree j+1; a hidden unit may read
            // inputs up to its own degree
            mask_w1 = vec![0.0; dims * HIDDEN];
            for j in 0..dims {
                for h in 0..HIDDEN {
                    if degrees[h] >= j + 1 {
                        mask_w1[j * HIDDEN + h] = 1.0;
                    }
                }
            }
            // degrees may only grow along hidden-to-hidden edges
            mask_w2 = vec![0.0; HIDDEN * HIDDEN];
            for a in 0..HIDDEN {
                for b in 0..HIDDEN {
                    if degrees[b] >= degrees[a] {
                        mask_w2[a * HIDDEN + b] = 1.0;
                    }
                }
            }
            // the head for column i reads hidden units of strictly lower
            // degree, so it never sees coordinate i or later
            for i in 1..=dims {
                let mut m = vec![0.0; HIDDEN * RAW_PER_DIM];
                for h in 0..HIDDEN {
                    if i > degrees[h] {
                        for c in 0..RAW_PER_DIM {
                            m[h * RAW_PER_DIM + c] = 1.0;
                        }
                    }
                }
                mask_heads.push(m);
            }

            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cdf-init"));
            params.insert("net.w1", vec![dims, HIDDEN], xavier(&mut rng, dims, HIDDEN));
            params.insert("net.b1", vec![HIDDEN], vec![0.0; HIDDEN]);
            params.insert(
                "net.w2",
                vec![HIDDEN, HIDDEN],
                xavier(&mut rng, HIDDEN, HIDDEN),
            );
            params.insert("net.b2", vec![HIDDEN], vec![0.0; HIDDEN]);
            // zero head weights + identity-spline biases make the fresh
            // model the exact product of per-column uniform CDFs
            let mut head_bias = vec![0.0; RAW_PER_DIM];
            for slot in head_bias.iter_mut().skip(2 * spline::BINS) {
                *slot = DERIV_IDENTITY_RAW;
            }
            for i in 1..=dims {
                params.insert(
                    &format!("head{i}.w"),
                    vec![HIDDEN, RAW_PER_DIM],
                    vec![0.0; HIDDEN * RAW_PER_DIM],
                );
                params.insert(&format!("head{i}.b"), vec![RAW_PER_DIM], head_bias.clone());
            }
        }
        Ok(CdfModel {
            table: table.name.clone(),
            dims,
            mask_w1,
            mask_w2,
            mask_heads,
            params,
        })
    }

    fn trunk(&self, tape: &Tape, binding: &Binding, z: &[f64]) -> Result<NodeId> {
        if z.len() != self.dims {
            return Err(Error::Model(format!(
                "{KIND} expects {} coordinates, got {}",
                self.dims,
                z.len()
            )));
        }
        let x = tape.constant(vec![self.dims], z.to_vec());
        let m1 = tape.constant(vec![self.dims, HIDDEN], self.mask_w1.clone());
        let a1 = tape.masked_linear(x, binding.node("net.w1")?, binding.node("net.b1")?, m1)?;
        let h1 = tape.softplus(a1);
        let m2 = tape.constant(vec![HIDDEN, HIDDEN], self.mask_w2.clone());
        let a2 = tape.masked_linear(h1, binding.node("net.w2")?, binding.node("net.b2")?, m2)?;
        Ok(tape.softplus(a2))
    }

    fn head(&self, tape: &Tape, binding: &Binding, h2: NodeId, i: usize) -> Result<NodeId> {
        let mask = tape.constant(vec![HIDDEN, RAW_PER_DIM], self.mask_heads[i - 1].clone());
        tape.masked_linear(
            h2,
            binding.node(&format!("head{i}.w"))?,
            binding.node(&format!("head{i}.b"))?,
            mask,
        )
    }

    /// Raw head output for column `i` (1-based) at input point `z`.
    /// Exposed so tests can verify the conditioning structure directly.
    pub fn head_raw(&self, tape: &Tape, binding: &Binding, z: &[f64], i: usize) -> Result<Vec<f64>> {
        let h2 = self.trunk(tape, binding, z)?;
        let raw = self.head(tape, binding, h2, i)?;
        Ok(tape.value(raw))
    }

    /// Joint CDF estimate at a corner point, as a scalar node.
    pub fn cdf_at(&self, tape: &Tape, binding: &Binding, z: &[f64]) -> Result<NodeId> {
        if self.dims == 0 {
            return Ok(tape.scalar_const(1.0));
        }
        let h2 = self.trunk(tape, binding, z)?;
        let mut product: Option<NodeId> = None;
        for i in 1..=self.dims {
            let raw = self.head(tape, binding, h2, i)?;
            let split = spline::split_raw(tape, raw)?;
            let fi = spline::eval_cdf(tape, &split, z[i - 1])?;
            product = Some(match product {
                None => fi,
                Some(p) => tape.mul(p, fi)?,
            });
        }
        Ok(product.expect("dims > 0"))
    }
}

impl CardModel for CdfModel {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn table(&self) -> &str {
        &self.table
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn selectivity(
        &self,
        tape: &Tape,
        binding: &Binding,
        schema: &Schema,
        aq: &AliasQuery<'_>,
        norm: &Normalizer,
    ) -> Result<NodeId> {
        if self.dims == 0 {
            if !aq.predicates.is_empty() {
                return Err(Error::Model(format!(
                    "table {} has no filterable columns but the query filters it",
                    self.table
                )));
            }
            return Ok(tape.scalar_const(1.0));
        }
        let table = schema.table(aq.table)?;
        let bounds = encode_interval_bounds(schema, table, aq, norm)?;
        if bounds.len() != self.dims {
            return Err(Error::Model(format!(
                "{KIND} for {} was built over {} columns but the schema now has {}",
                self.table,
                self.dims,
                bounds.len()
            )));
        }
        // signed sum over the corners of the query box: each column with a
        // lower bound contributes both of its ends, everything else only
        // its upper end
        let two_sided: Vec<usize> = (0..self.dims)
            .filter(|i| bounds[*i].lower.is_some())
            .collect();
        let mut acc = tape.scalar_const(0.0);
        for choice in 0..(1usize << two_sided.len()) {
            let mut z: Vec<f64> = bounds.iter().map(|b| b.upper).collect();
            let mut sign = 1.0;
            for (bit, dim) in two_sided.iter().enumerate() {
                if choice >> bit & 1 == 1 {
                    z[*dim] = bounds[*dim].lower.expect("two-sided");
                    sign = -sign;
                }
            }
            // a zero coordinate pins the whole corner's CDF to zero
            if z.iter().any(|v| *v <= 0.0) {
                continue;
            }
            let f = self.cdf_at(tape, binding, &z)?;
            let signed = tape.mul_scalar(f, sign);
            acc = tape.add(acc, signed)?;
        }
        Ok(acc)
    }
}
