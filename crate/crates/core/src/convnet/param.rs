use crate::tensor::Scalar;

/// A trainable array with its gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(len: usize) -> Self {
        Self::from_value(vec![T::zero(); len])
    }

    pub fn from_value(value: Vec<T>) -> Self {
        let len = value.len();
        Self {
            value,
            grad: vec![T::zero(); len],
            velocity: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Borrowed view of one parameter tensor for optimizers.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: &'a [T],
    pub velocity: &'a mut [T],
}
