use indexmap::IndexMap;
use ndarray::Array2;

use super::{NnError, Scalar};

/// Named 2-D parameter arrays in insertion order.
///
/// Shapes are fixed once an array is inserted; all updates go through
/// [`Params::update`] or [`Params::get_mut`], which cannot reshape.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    arrays: IndexMap<String, Array2<T>>,
}

/// Network weights in training precision.
pub type ParamSet = Params<f32>;

impl<T> Default for Params<T> {
    fn default() -> Self {
        Self {
            arrays: IndexMap::new(),
        }
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) -> Result<(), NnError> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return Err(NnError::Invalid(format!("duplicate parameter `{name}`")));
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(NnError::Invalid(format!("parameter `{name}` has non-finite values")));
        }
        self.arrays.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.arrays.get(name)
    }

    /// Mutable view of the values. The returned slice cannot change shape.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        self.arrays
            .get_mut(name)
            .and_then(|a| a.as_slice_mut())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// Same names and shapes as `self`, values from `arrays` (in order).
    pub(crate) fn with_arrays(&self, arrays: Vec<Array2<T>>) -> Self {
        debug_assert_eq!(arrays.len(), self.arrays.len());
        Self {
            arrays: self
                .arrays
                .keys()
                .cloned()
                .zip(arrays)
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Params<T>) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(other.arrays.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.dim() == vb.dim())
    }

    /// Applies `f(param, other)` elementwise over two identically laid-out sets.
    pub fn update<F>(&mut self, other: &Params<T>, mut f: F) -> Result<(), NnError>
    where
        F: FnMut(&mut T, T),
    {
        if !self.same_layout(other) {
            return Err(NnError::Shape("parameter sets differ in layout".into()));
        }
        for (a, b) in self.arrays.values_mut().zip(other.arrays.values()) {
            a.zip_mut_with(b, |x, &y| f(x, y));
        }
        Ok(())
    }

    /// Flat copy of all values in iteration order.
    pub fn flatten(&self) -> Vec<T> {
        self.arrays
            .values()
            .flat_map(|a| a.iter().copied())
            .collect()
    }

    /// Sets the `i`-th value in [`Params::flatten`] order.
    pub fn set_flat(&mut self, mut i: usize, value: T) {
        for a in self.arrays.values_mut() {
            if i < a.len() {
                let cols = a.ncols();
                a[[i / cols, i % cols]] = value;
                return;
            }
            i -= a.len();
        }
        panic!("flat index out of range");
    }

    pub fn get_flat(&self, mut i: usize) -> T {
        for a in self.arrays.values() {
            if i < a.len() {
                let cols = a.ncols();
                return a[[i / cols, i % cols]];
            }
            i -= a.len();
        }
        panic!("flat index out of range");
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::from(x).unwrap())))
                .collect(),
        }
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: Params<T>) -> Result<(), NnError> {
        for (k, v) in other.arrays {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Subset of arrays whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites arrays of `self` that also appear in `other`.
    pub fn overwrite_from(&mut self, other: &Params<T>) -> Result<(), NnError> {
        for (k, v) in other.iter() {
            let slot = self
                .arrays
                .get_mut(k)
                .ok_or_else(|| NnError::Invalid(format!("unknown parameter `{k}`")))?;
            if slot.dim() != v.dim() {
                return Err(NnError::Shape(format!(
                    "`{k}`: expected {:?}, got {:?}",
                    slot.dim(),
                    v.dim()
                )));
            }
            slot.assign(v);
        }
        Ok(())
    }
}
