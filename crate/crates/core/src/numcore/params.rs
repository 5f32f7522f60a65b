use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// A named, contiguous region of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceInfo {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl SliceInfo {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Builder that hands out disjoint offsets in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    slices: Vec<SliceInfo>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserve `len` values under `name` and return the starting offset.
    pub fn reserve(&mut self, name: &str, len: usize) -> usize {
        let offset = self.total();
        self.slices.push(SliceInfo {
            name: name.to_string(),
            offset,
            len,
        });
        offset
    }

    pub fn total(&self) -> usize {
        self.slices.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn slices(&self) -> &[SliceInfo] {
        &self.slices
    }

    pub fn get(&self, name: &str) -> Option<&SliceInfo> {
        self.slices.iter().find(|s| s.name == name)
    }

    /// Checks that slices are disjoint, ordered and cover `0..total`.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for s in &self.slices {
            if s.offset != expected {
                return config_err(format!(
                    "slice `{}` starts at {} but previous slices end at {}",
                    s.name, s.offset, expected
                ));
            }
            expected += s.len;
        }
        let mut names: Vec<&str> = self.slices.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return config_err("duplicate slice names in layout");
        }
        Ok(())
    }
}

/// Flat parameter storage partitioned into named sub-network slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.total() {
            return config_err(format!(
                "parameter vector has {} values but layout covers {}",
                values.len(),
                layout.total()
            ));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        self.layout
            .get(name)
            .map(SliceInfo::range)
            .ok_or_else(|| Error::Config(format!("no parameter slice named `{name}`")))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let r = self.range(name)?;
        Ok(&self.values[r])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.range(name)?;
        Ok(&mut self.values[r])
    }
}
