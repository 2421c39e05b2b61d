use serde::{Deserialize, Serialize};

use super::NetError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Example {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }

    pub fn positive(x: Vec<f64>) -> Self {
        Self { x, y: 1.0 }
    }
}

/// Binary classification data with labels in `{-1, +1}` and a common input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Example>", into = "Vec<Example>")]
pub struct Dataset {
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self, NetError> {
        let Some(first) = examples.first() else {
            return Err(NetError::InvalidDataset("dataset is empty".into()));
        };
        let d = first.x.len();
        if d == 0 {
            return Err(NetError::InvalidDataset("examples[0].x: empty input".into()));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.x.len() != d {
                return Err(NetError::InvalidDataset(format!(
                    "examples[{i}].x: dimension {} differs from {d}",
                    ex.x.len()
                )));
            }
            if ex.y != 1.0 && ex.y != -1.0 {
                return Err(NetError::InvalidDataset(format!(
                    "examples[{i}].y: label {} is not -1 or +1",
                    ex.y
                )));
            }
            if ex.x.iter().any(|v| !v.is_finite()) {
                return Err(NetError::InvalidDataset(format!("examples[{i}].x: non-finite entry")));
            }
        }
        Ok(Self { examples })
    }

    /// All labels `+1`.
    pub fn positives(xs: Vec<Vec<f64>>) -> Result<Self, NetError> {
        Self::new(xs.into_iter().map(Example::positive).collect())
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples[0].x.len()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// Rows `y_i x_i`.
    pub fn signed_inputs(&self) -> Vec<Vec<f64>> {
        self.examples
            .iter()
            .map(|e| e.x.iter().map(|v| e.y * v).collect())
            .collect()
    }

    pub fn permuted(&self, order: &[usize]) -> Result<Self, NetError> {
        Self::new(order.iter().map(|&i| self.examples[i].clone()).collect())
    }
}

impl TryFrom<Vec<Example>> for Dataset {
    type Error = NetError;

    fn try_from(examples: Vec<Example>) -> Result<Self, NetError> {
        Self::new(examples)
    }
}

impl From<Dataset> for Vec<Example> {
    fn from(data: Dataset) -> Self {
        data.examples
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_labels_and_dims() {
        assert!(Dataset::new(vec![]).is_err());
        assert!(Dataset::new(vec![Example::new(vec![1.0], 0.5)]).is_err());
        let err = Dataset::new(vec![Example::positive(vec![1.0]), Example::positive(vec![1.0, 2.0])])
            .unwrap_err()
            .to_string();
        assert!(err.contains("examples[1].x"), "{err}");
    }

    #[test]
    fn json_form() {
        let data: Dataset = serde_json::from_str(r#"[{"x":[1,2],"y":1},{"x":[0,1],"y":-1}]"#).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.signed_inputs()[1], vec![-0.0, -1.0]);
        assert!(serde_json::from_str::<Dataset>(r#"[{"x":[1],"y":2}]"#).is_err());
    }
}
