//! Power normalization and the noisy channel.
//!
//! SNR is signal power over noise power with the signal fixed at unit
//! average power per real symbol. The side-information prefix of a stream
//! bypasses the channel.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::types::SymbolStream;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    Awgn,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64, seed: u64) -> Self {
        Self { kind: ChannelKind::Awgn, snr_db, seed }
    }

    pub fn identity() -> Self {
        Self { kind: ChannelKind::Identity, snr_db: f64::INFINITY, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ChannelKind::Awgn && !self.snr_db.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!("SNR must be finite, got {}", self.snr_db)));
        }
        Ok(())
    }
}

/// `10^(-snr_db / 10)`: noise variance for unit signal power.
pub fn noise_variance(snr_db: f64) -> f64 {
    libm::pow(10.0, -snr_db / 10.0)
}

/// Root-mean-square amplitude of `s` (0 for an empty slice).
pub fn rms<T: Scalar>(s: &[T]) -> T {
    T::of(rms_f64(s))
}

fn rms_f64<T: Scalar>(s: &[T]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let power = s.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / s.len() as f64;
    libm::sqrt(power)
}

/// Scales `s` by `sqrt(k) / ||s||` so its mean power is one, up to the
/// rounding of `T`.
pub fn power_normalize<T: Scalar>(s: &[T]) -> Result<Vec<T>> {
    if s.is_empty() {
        return Err(Error::Degenerate("cannot normalize an empty vector".into()));
    }
    let r = rms_f64(s);
    if r == 0.0 {
        return Err(Error::Degenerate("cannot normalize an all-zero vector".into()));
    }
    Ok(s.iter().map(|v| T::of(v.as_f64() / r)).collect())
}

/// A seeded channel realization; one per transmission.
pub struct Channel {
    config: ChannelConfig,
    rng: ChaCha8Rng,
}

impl Channel {
    pub fn new(config: ChannelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, rng: ChaCha8Rng::seed_from_u64(config.seed) })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    /// Applies `W(s; P)` to a unit-power vector.
    pub fn transmit(&mut self, s_norm: &[f32]) -> Vec<f32> {
        match self.config.kind {
            ChannelKind::Identity => s_norm.to_vec(),
            ChannelKind::Awgn => {
                let std = libm::sqrt(noise_variance(self.config.snr_db));
                s_norm
                    .iter()
                    .map(|&v| {
                        let n: f64 = StandardNormal.sample(&mut self.rng);
                        (v as f64 + std * n) as f32
                    })
                    .collect()
            }
        }
    }

    pub fn noise(&mut self, len: usize) -> Vec<f32> {
        let std = libm::sqrt(noise_variance(self.config.snr_db));
        (0..len)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut self.rng);
                (std * n) as f32
            })
            .collect()
    }
}

/// What happened to a stream on its way through the channel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransportStats {
    /// Vectors whose analog payload was non-empty but all zero; they are sent
    /// as silence because unit power is unattainable.
    pub silent_vectors: Vec<usize>,
}

/// Sends every analog payload through `channel`.
///
/// Each payload is power-normalized, passed through the channel, and scaled
/// back by the receiver using its RMS gain, which `gains[n]` carries over the
/// error-free side path. The side-information prefix is copied unchanged.
pub fn transmit_stream(stream: &SymbolStream, gains: &[f32], channel: &mut Channel) -> Result<(SymbolStream, TransportStats)> {
    if gains.len() != stream.vectors.len() {
        return Err(Error::Framing(alloc::format!("{} gains for {} vectors", gains.len(), stream.vectors.len())));
    }
    let mut received = stream.clone();
    let mut stats = TransportStats::default();
    if channel.config().kind == ChannelKind::Identity {
        return Ok((received, stats));
    }
    for (n, &gain) in gains.iter().enumerate() {
        let payload = received.payload_mut(n);
        if payload.is_empty() {
            continue;
        }
        if gain == 0.0 {
            stats.silent_vectors.push(n);
            // Silence still occupies its channel uses; the receiver zeroes
            // whatever arrives since the gain is zero.
            let _ = channel.noise(payload.len());
            payload.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let normalized: Vec<f32> = payload.iter().map(|&v| v / gain).collect();
        let noisy = channel.transmit(&normalized);
        for (dst, y) in payload.iter_mut().zip(noisy) {
            *dst = y * gain;
        }
    }
    Ok((received, stats))
}
