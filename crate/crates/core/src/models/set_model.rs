//! Predicate-set selectivity regressor.
//!
//! The fallback cardinality model for tables whose filters the cumulative
//! model cannot express (categorical equality, text patterns, membership
//! lists, null tests). Each predicate becomes one feature row; rows pass
//! through a shared embedding, mean-pool into an order-invariant summary,
//! and a small head squashes the summary to a selectivity in (0, 1).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::encoding::{FeatureLayout, Normalizer};
use crate::error::Result;
use crate::query::AliasQuery;
use crate::schema::{Schema, Table};
use crate::util::derive_seed;

use super::{xavier, Binding, CardModel, ParamSet};

pub const KIND: &str = "set-regressor";

/// Width of the pooled embedding and the hidden layer.
pub const HIDDEN: usize = 64;

#[derive(Debug)]
pub struct SetModel {
    table: String,
    layout: FeatureLayout,
    params: ParamSet,
}

pub fn build(schema: &Schema, table: &Table, seed: u64) -> Result<Box<dyn CardModel>> {
    Ok(Box::new(SetModel::new(schema, table, seed)))
}

impl SetModel {
    pub fn new(schema: &Schema, table: &Table, seed: u64) -> SetModel {
        let layout = FeatureLayout::new(schema, table);
        let width = layout.width();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "set-init"));
        let mut params = ParamSet::new();
        params.insert("embed.w", vec![width, HIDDEN], xavier(&mut rng, width, HIDDEN));
        params.insert("embed.b", vec![HIDDEN], vec![0.0; HIDDEN]);
        params.insert(
            "hidden.w",
            vec![HIDDEN, HIDDEN],
            xavier(&mut rng, HIDDEN, HIDDEN),
        );
        params.insert("hidden.b", vec![HIDDEN], vec![0.0; HIDDEN]);
        params.insert("out.w", vec![HIDDEN, 1], xavier(&mut rng, HIDDEN, 1));
        params.insert("out.b", vec![1], vec![0.0]);
        SetModel {
            table: table.name.clone(),
            layout,
            params,
        }
    }
}

impl CardModel for SetModel {
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
        _schema: &Schema,
        aq: &AliasQuery<'_>,
        norm: &Normalizer,
    ) -> Result<NodeId> {
        let rows = self.layout.featurize(aq, norm)?;
        let n = rows.len();
        let ew = binding.node("embed.w")?;
        let eb = binding.node("embed.b")?;
        let mut pooled: Option<NodeId> = None;
        for row in rows {
            let x = tape.constant(vec![self.layout.width()], row);
            let lin = tape.matmul(x, ew)?;
            let lin = tape.add(lin, eb)?;
            let emb = tape.softplus(lin);
            pooled = Some(match pooled {
                None => emb,
                Some(acc) => tape.add(acc, emb)?,
            });
        }
        let pooled = tape.mul_scalar(pooled.expect("at least one feature row"), 1.0 / n as f64);
        let h = {
            let lin = tape.matmul(pooled, binding.node("hidden.w")?)?;
            let lin = tape.add(lin, binding.node("hidden.b")?)?;
            tape.softplus(lin)
        };
        let out = {
            let lin = tape.matmul(h, binding.node("out.w")?)?;
            let lin = tape.add(lin, binding.node("out.b")?)?;
            tape.sigmoid(lin)
        };
        Ok(tape.sum(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::oracle::demo_fixture;
    use crate::query::Query;

    fn single(pred: &str) -> Query {
        serde_json::from_str(&format!(
            r#"{{"aliases":{{"B":"B"}},"joins":[],"predicates":[{pred}]}}"#
        ))
        .unwrap()
    }

    fn eval(model: &SetModel, schema: &Schema, norm: &Normalizer, q: &Query) -> f64 {
        let tape = Tape::new();
        let binding = Binding::frozen(&tape, model.params());
        let aq = q.alias_query("B").unwrap();
        let node = model
            .selectivity(&tape, &binding, schema, &aq, norm)
            .unwrap();
        tape.scalar(node).unwrap()
    }

    #[test]
    fn outputs_lie_in_unit_interval_and_react_to_predicates() {
        let (schema, _) = demo_fixture();
        let norm = Normalizer::fit(&schema, &[]).unwrap();
        let model = SetModel::new(&schema, schema.table("B").unwrap(), 31);

        let none: Query =
            serde_json::from_str(r#"{"aliases":{"B":"B"},"joins":[],"predicates":[]}"#).unwrap();
        let low = single(r#"{"alias":"B","column":"b","op":"le","literals":[2]}"#);
        let high = single(r#"{"alias":"B","column":"b","op":"gt","literals":[3]}"#);

        let mut seen = Vec::new();
        for q in [&none, &low, &high] {
            let s = eval(&model, &schema, &norm, q);
            assert!(s > 0.0 && s < 1.0, "selectivity {s} out of range");
            seen.push(s);
        }
        // different predicates should map to different outputs even untrained
        assert_ne!(seen[0], seen[1]);
        assert_ne!(seen[1], seen[2]);
    }

    #[test]
    fn same_seed_same_model_different_seed_different() {
        let (schema, _) = demo_fixture();
        let t = schema.table("B").unwrap();
        let a = SetModel::new(&schema, t, 1);
        let b = SetModel::new(&schema, t, 1);
        let c = SetModel::new(&schema, t, 2);
        assert_eq!(
            a.params().get("embed.w").unwrap().data,
            b.params().get("embed.w").unwrap().data
        );
        assert_ne!(
            a.params().get("embed.w").unwrap().data,
            c.params().get("embed.w").unwrap().data
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (schema, _) = demo_fixture();
        let norm = Normalizer::fit(&schema, &[]).unwrap();
        let model = SetModel::new(&schema, schema.table("B").unwrap(), 32);
        let q = single(r#"{"alias":"B","column":"b","op":"ge","literals":[2]}"#);

        let tape = Tape::new();
        let binding = Binding::trainable(&tape, model.params());
        let aq = q.alias_query("B").unwrap();
        let node = model
            .selectivity(&tape, &binding, &schema, &aq, &norm)
            .unwrap();
        tape.backward(node).unwrap();
        let grads = binding.gradients(&tape, model.params()).unwrap();

        for name in ["out.w", "hidden.b", "embed.b"] {
            let current = model.params().get(name).unwrap().data.clone();
            let analytic = grads[name].clone();
            let n_check = current.len().min(16);
            let mut f = |v: &[f64]| {
                let mut m2 = SetModel::new(&schema, schema.table("B").unwrap(), 32);
                let mut patched = current.clone();
                patched[..n_check].copy_from_slice(&v[..n_check]);
                m2.params_mut().assign(name, patched).unwrap();
                let t = Tape::new();
                let b = Binding::frozen(&t, m2.params());
                let aq = q.alias_query("B").unwrap();
                let node = m2.selectivity(&t, &b, &schema, &aq, &norm).unwrap();
                t.scalar(node).unwrap()
            };
            let err = finite_diff_check(&mut f, &current[..n_check], &analytic[..n_check], 1e-5);
            assert!(err < 1e-4, "{name}: gradient mismatch {err}");
        }
    }
}
