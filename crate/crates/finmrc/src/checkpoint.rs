//! Named parameter arrays and the on-disk checkpoint format.
//!
//! Checkpoints are line-oriented text: a version header, a one-line JSON
//! metadata record, then ordered `(name, shape, values)` records. Values are
//! written as f64 bit patterns in hex, so save/load round-trips exactly and
//! identical runs produce byte-identical files.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint header: {0:?}")]
    BadHeader(String),
    #[error("checkpoint line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("duplicate parameter {0:?}")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter arrays; the master copy the
/// optimizer updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: shape/data mismatch"
        );
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, shape, data });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Creates differentiable leaf tensors for every parameter; one bind per
    /// forward/backward pass.
    pub fn bind(&self) -> BoundParams {
        BoundParams {
            tensors: self
                .params
                .iter()
                .map(|p| Tensor::leaf(p.shape.clone(), p.data.clone(), true))
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn serialize(&self, meta_json: &str) -> String {
        debug_assert!(!meta_json.contains('\n'));
        let mut out = String::with_capacity(self.params.iter().map(|p| p.data.len() * 17).sum());
        out.push_str("ndckpt 1\n");
        out.push_str("meta ");
        out.push_str(meta_json);
        out.push('\n');
        for p in &self.params {
            out.push_str("param ");
            out.push_str(&p.name);
            for d in &p.shape {
                out.push(' ');
                out.push_str(&d.to_string());
            }
            out.push('\n');
            let mut first = true;
            for v in &p.data {
                if !first {
                    out.push(' ');
                }
                first = false;
                out.push_str(&format!("{:016x}", v.to_bits()));
            }
            out.push('\n');
        }
        out
    }

    /// Parses a checkpoint, returning the metadata JSON line and the store.
    pub fn deserialize(text: &str) -> Result<(String, ParamStore), CheckpointError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| CheckpointError::BadHeader("empty file".into()))?;
        if header != "ndckpt 1" {
            return Err(CheckpointError::BadHeader(header.to_string()));
        }
        let (_, meta_line) = lines
            .next()
            .ok_or_else(|| CheckpointError::BadHeader("missing meta line".into()))?;
        let meta = meta_line
            .strip_prefix("meta ")
            .ok_or_else(|| CheckpointError::BadHeader(meta_line.to_string()))?
            .to_string();

        let mut store = ParamStore::new();
        while let Some((idx, line)) = lines.next() {
            let rest = line
                .strip_prefix("param ")
                .ok_or_else(|| CheckpointError::Malformed {
                    line: idx + 1,
                    msg: format!("expected param record, got {line:?}"),
                })?;
            let mut fields = rest.split(' ');
            let name = fields
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| CheckpointError::Malformed {
                    line: idx + 1,
                    msg: "missing parameter name".into(),
                })?
                .to_string();
            if store.index.contains_key(&name) {
                return Err(CheckpointError::Duplicate(name));
            }
            let shape: Vec<usize> = fields
                .map(|s| {
                    s.parse::<usize>().map_err(|_| CheckpointError::Malformed {
                        line: idx + 1,
                        msg: format!("bad dimension {s:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            let (vidx, values_line) =
                lines.next().ok_or_else(|| CheckpointError::Malformed {
                    line: idx + 1,
                    msg: format!("missing values for parameter {name:?}"),
                })?;
            let data: Vec<f64> = if values_line.is_empty() {
                Vec::new()
            } else {
                values_line
                    .split(' ')
                    .map(|s| {
                        u64::from_str_radix(s, 16)
                            .map(f64::from_bits)
                            .map_err(|_| CheckpointError::Malformed {
                                line: vidx + 1,
                                msg: format!("bad value {s:?}"),
                            })
                    })
                    .collect::<Result<_, _>>()?
            };
            if shape.iter().product::<usize>() != data.len() {
                return Err(CheckpointError::Malformed {
                    line: vidx + 1,
                    msg: format!(
                        "parameter {name:?}: {} values for shape {shape:?}",
                        data.len()
                    ),
                });
            }
            store.add(name, shape, data);
        }
        Ok((meta, store))
    }
}

/// Leaf tensors bound to a [`ParamStore`] for one forward/backward pass.
pub struct BoundParams {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Builds a binding from externally supplied leaves (used by gradient
    /// checks that re-drive a forward pass from perturbed parameters).
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> BoundParams {
        assert_eq!(names.len(), tensors.len());
        let index = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, i))
            .collect();
        BoundParams { tensors, index }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Gradients aligned with the store's parameter order; zeros where a
    /// parameter was untouched by backward.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.data().len()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_and_stable() {
        let mut store = ParamStore::new();
        store.add("w", vec![2, 2], vec![0.1, -2.5e-7, std::f64::consts::PI, 0.0]);
        store.add("b", vec![2], vec![1.0, -1.0]);
        let text = store.serialize("{\"k\":1}");
        let (meta, back) = ParamStore::deserialize(&text).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back, store);
        // byte-identical reserialization
        assert_eq!(back.serialize("{\"k\":1}"), text);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ParamStore::deserialize("").is_err());
        assert!(ParamStore::deserialize("wrong 2\nmeta {}\n").is_err());
        assert!(ParamStore::deserialize("ndckpt 1\nmeta {}\nparam w 2\nzz zz\n").is_err());
        assert!(ParamStore::deserialize("ndckpt 1\nmeta {}\nparam w 3\n0 0\n").is_err());
    }

    #[test]
    fn bind_exposes_gradients() {
        let mut store = ParamStore::new();
        store.add("w", vec![2], vec![3.0, 4.0]);
        let bound = store.bind();
        let loss = bound.get("w").mul(bound.get("w")).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(bound.grads(), vec![vec![6.0, 8.0]]);
    }
}
