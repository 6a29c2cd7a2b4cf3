use crate::diffcore::{ParamId, Tape, Var};
use crate::error::{Error, Result};

/// Sum of per-column embedding lookups: row `i` of the result is
/// `Σ_j tables[j][features[i][j]]`.
pub fn embed_features<R: AsRef<[u32]>>(tape: &mut Tape, tables: &[ParamId], features: &[R]) -> Result<Var> {
    if tables.is_empty() {
        return Err(Error::shape("embed_features", "no embedding tables"));
    }
    let mut out = None;
    for (col, &table) in tables.iter().enumerate() {
        let vocab = tape.store().value(table).rows();
        let mut idx = Vec::with_capacity(features.len());
        for row in features {
            let row = row.as_ref();
            if row.len() != tables.len() {
                return Err(Error::shape(
                    "embed_features",
                    format!("{} feature columns for {} tables", row.len(), tables.len()),
                ));
            }
            let v = row[col] as usize;
            if v >= vocab {
                return Err(Error::Index {
                    op: "embed_features",
                    index: v,
                    bound: vocab,
                });
            }
            idx.push(v);
        }
        let looked_up = tape.embedding(table, &idx)?;
        out = Some(match out {
            None => looked_up,
            Some(acc) => tape.add(acc, looked_up)?,
        });
    }
    Ok(out.expect("at least one table"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, GradCheckOptions, Mode, ParamStore, Tensor};

    #[test]
    fn single_lookup() {
        let mut store = ParamStore::new();
        let t = store.add("t", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), true);
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let out = embed_features(&mut tape, &[t], &[[1u32]]).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn sum_of_two_lookups() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2, 2], 1.0), true);
        let b = store.add("b", Tensor::full(&[3, 2], 1.0), true);
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let out = embed_features(&mut tape, &[a, b], &[[0u32, 2]]).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0]);
        assert_eq!(tape.value(out).shape(), &[1, 2]);
    }

    #[test]
    fn out_of_vocab() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2, 2]), true);
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        assert!(embed_features(&mut tape, &[a], &[[2u32]]).is_err());
    }

    #[test]
    fn gradient_counts_occurrences() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[3, 2], 0.3), true);
        let b = store.add("b", Tensor::full(&[2, 2], -0.1), true);
        let feats = [[0u32, 1], [2, 1], [0, 1], [0, 0]];
        let grads = {
            let mut tape = Tape::new(&store, Mode::Eval, 0);
            let out = embed_features(&mut tape, &[a, b], &feats).unwrap();
            let s = tape.sum(out).unwrap();
            tape.backward_scalar(s).unwrap()
        };
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0, 3.0, 3.0]);
        let report = finite_diff_check(&mut store, &GradCheckOptions::default(), |t| {
            let out = embed_features(t, &[a, b], &feats)?;
            t.sum(out)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }
}
