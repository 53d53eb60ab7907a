use std::ops::AddAssign;

/// Operation counters collected while an engine runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvStats {
    /// General multiplications: MACs for direct, elementwise transform-domain
    /// products for Winograd, real multiplies (4 per complex product) for FFT.
    pub multiplications: u64,
    /// Winograd tiles per output channel.
    pub tiles: u64,
    pub forward_ffts: u64,
    pub inverse_ffts: u64,
}

impl AddAssign for ConvStats {
    fn add_assign(&mut self, rhs: Self) {
        self.multiplications += rhs.multiplications;
        self.tiles += rhs.tiles;
        self.forward_ffts += rhs.forward_ffts;
        self.inverse_ffts += rhs.inverse_ffts;
    }
}
