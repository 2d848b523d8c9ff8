use sha2::{Digest, Sha256};

/// Hex SHA-256, truncated to 16 characters.
pub fn short_digest(bytes: &[u8]) -> String {
    let full = Sha256::digest(bytes);
    hex::encode(&full[..8])
}
