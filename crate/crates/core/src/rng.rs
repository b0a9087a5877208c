//! Deterministic random stream for parameter init and synthetic data.
//!
//! A splitmix64 pass expands the user seed into the 256-bit state of
//! xoshiro256++. The stream is pinned by the algorithm itself rather than
//! by a library version or platform, so a seed reproduces the exact same
//! draws everywhere, bit for bit.

/// Seeded generator. Cloning forks the stream at its current position.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    state: [u64; 4],
    spare_normal: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        // splitmix64 seed expansion; guarantees a non-zero xoshiro state.
        let mut sm = seed;
        let mut state = [0u64; 4];
        for slot in &mut state {
            sm = sm.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            *slot = z ^ (z >> 31);
        }
        RngState { seed, state, spare_normal: None }
    }

    /// The seed this stream was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// xoshiro256++ step.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1), using the top 53 bits of the stream.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via the Marsaglia polar method. Pairs are generated
    /// together; the spare is handed out on the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = self.uniform(-1.0, 1.0);
            let v = self.uniform(-1.0, 1.0);
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let scale = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * scale);
                return u * scale;
            }
        }
    }
}
