use super::Tensor;

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named registry of trainable tensors. Registration order is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    /// Registers a tensor that is stored and serialized but never updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value);
        self.frozen[id.0] = true;
        id
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.frozen[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "parameter shape is fixed");
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Number of scalars in trainable tensors.
    pub fn num_trainable(&self) -> usize {
        self.ids().filter(|&id| self.is_trainable(id)).map(|id| self.get(id).numel()).sum()
    }

    /// Rounds every value to the nearest `f32`, the storage precision.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}
