//! Collaborative prompts and the category-part relation matrix.

use gradkit::{Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::scenegen::CategorySpec;

/// One text per vocabulary part, `"<part> of <category>"`, in vocabulary
/// order. Parts the category lacks are included; the relation matrix
/// encodes absence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollaborativePrompt {
    pub category_id: usize,
    pub texts: Vec<String>,
}

fn lookup(category_id: usize, table: &[CategorySpec]) -> Result<&CategorySpec> {
    table
        .iter()
        .find(|c| c.category_id == category_id)
        .ok_or_else(|| Error::Lookup(format!("unknown category {category_id}")))
}

pub fn build_prompts(category_id: usize, table: &[CategorySpec], vocab: &[String]) -> Result<CollaborativePrompt> {
    let spec = lookup(category_id, table)?;
    let category = spec.name.to_lowercase();
    Ok(CollaborativePrompt {
        category_id,
        texts: vocab
            .iter()
            .map(|part| format!("{} of {category}", part.to_lowercase()))
            .collect(),
    })
}

/// The single category-name prompt used by the name-only ablation.
pub fn category_name_prompt(category_id: usize, table: &[CategorySpec]) -> Result<CollaborativePrompt> {
    let spec = lookup(category_id, table)?;
    Ok(CollaborativePrompt {
        category_id,
        texts: vec![spec.name.to_lowercase()],
    })
}

/// `D_CP`: a learnable `C x P` matrix and its frozen binary initialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPartRelation<T> {
    pub matrix: Tensor<T>,
    pub initial_binary: Tensor<T>,
}

pub fn binary_relation<T: Scalar>(table: &[CategorySpec], num_parts: usize) -> Result<Tensor<T>> {
    if table.is_empty() {
        return Err(Error::Usage("category table is empty".into()));
    }
    let mut data = vec![T::zero(); table.len() * num_parts];
    for (row, spec) in table.iter().enumerate() {
        for &p in &spec.parts {
            if p >= num_parts {
                return Err(Error::Lookup(format!("category `{}` uses part {p} of {num_parts}", spec.name)));
            }
            data[row * num_parts + p] = T::one();
        }
    }
    Ok(Tensor::new(vec![table.len(), num_parts], data)?)
}

pub fn init_relation<T: Scalar>(table: &[CategorySpec], num_parts: usize) -> Result<CategoryPartRelation<T>> {
    let initial_binary = binary_relation(table, num_parts)?;
    Ok(CategoryPartRelation {
        matrix: initial_binary.clone().with_requires_grad(true),
        initial_binary,
    })
}

/// Row `c` of a `C x P` relation matrix on the tape, as `1 x P`.
pub fn relation_row<'t, T: Scalar>(matrix: Var<'t, T>, c: usize) -> Result<Var<'t, T>> {
    let rows = matrix.shape()[0];
    if c >= rows {
        return Err(Error::Lookup(format!("relation row {c} of {rows}")));
    }
    Ok(matrix.narrow(0, c, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{default_category_table, default_vocab};
    use gradkit::Tape;

    #[test]
    fn prompt_strings_follow_part_of_category() {
        let vocab = default_vocab();
        let table = default_category_table(&vocab, 4).unwrap();
        let p = build_prompts(0, &table, &vocab).unwrap();
        assert_eq!(
            p.texts,
            vec![
                "shaft of large needle driver",
                "wrist of large needle driver",
                "tip of large needle driver",
                "disc of large needle driver",
                "hook of large needle driver",
            ]
        );
        let q = build_prompts(1, &table, &vocab).unwrap();
        for (a, b) in p.texts.iter().zip(&q.texts) {
            assert_eq!(a.split(" of ").next(), b.split(" of ").next());
        }
        assert!(matches!(build_prompts(9, &table, &vocab), Err(Error::Lookup(_))));
    }

    #[test]
    fn single_part_vocab_gives_one_string() {
        let vocab = vec!["shaft".to_string()];
        let table = vec![CategorySpec {
            category_id: 0,
            name: "Probe".into(),
            parts: vec![0],
            color_seed: 0,
        }];
        assert_eq!(build_prompts(0, &table, &vocab).unwrap().texts, vec!["shaft of probe"]);
    }

    #[test]
    fn binary_rows_match_part_lists() {
        let vocab = default_vocab();
        let table = default_category_table(&vocab, 4).unwrap();
        let rel = init_relation::<f64>(&table, 5).unwrap();
        assert_eq!(&rel.initial_binary.data()[..5], &[1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(&rel.initial_binary.data()[5..10], &[1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(rel.matrix.data(), rel.initial_binary.data());
        for (row, spec) in table.iter().enumerate() {
            let sum: f64 = rel.initial_binary.data()[row * 5..(row + 1) * 5].iter().sum();
            assert_eq!(sum, spec.parts.len() as f64);
        }
    }

    #[test]
    fn row_gradient_touches_only_its_row() {
        let vocab = default_vocab();
        let table = default_category_table(&vocab, 4).unwrap();
        let rel = init_relation::<f64>(&table, 5).unwrap();
        let tape = Tape::new();
        let m = tape.leaf(&rel.matrix);
        let row = relation_row(m, 2).unwrap();
        assert_eq!(row.to_tensor().data(), &rel.initial_binary.data()[10..15]);
        let grads = tape.backward(row.square().sum()).unwrap();
        let g = grads.get(m).unwrap();
        for (i, &v) in g.iter().enumerate() {
            if (10..15).contains(&i) {
                assert_eq!(v, 2.0 * rel.initial_binary.data()[i]);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        assert!(matches!(relation_row(m, 4), Err(Error::Lookup(_))));
    }
}
