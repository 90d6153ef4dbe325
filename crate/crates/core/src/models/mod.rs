//! The autoencoder and the classifier.

mod autoencoder;
mod classifier;

pub use autoencoder::{Autoencoder, AutoencoderSpec};
pub use classifier::{argmax_rows, Classifier, ClassifierSpec};

use crate::nn::Scalar;

/// FNV-1a over names, shapes and value bits.
pub(crate) fn fingerprint<T: Scalar>(arrays: &[(String, Vec<usize>, Vec<T>)]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (name, shape, values) in arrays {
        eat(name.as_bytes());
        for &s in shape {
            eat(&(s as u64).to_le_bytes());
        }
        for v in values {
            eat(&v.as_f64().to_bits().to_le_bytes());
        }
    }
    h
}
