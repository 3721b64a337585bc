/// Per-pixel real values with validity, e.g. endpoint-error or SSIM maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ScalarField {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// No pixel carries a value.
    pub fn is_empty(&self) -> bool {
        self.valid_count() == 0
    }

    pub fn get(&self, idx: usize) -> Option<f64> {
        self.valid[idx].then(|| self.values[idx])
    }

    /// Mean over valid pixels, `None` when empty.
    pub fn mean(&self) -> Option<f64> {
        let (sum, n) = self
            .values
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}
