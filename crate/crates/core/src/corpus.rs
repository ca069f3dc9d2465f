//! The protocols and implementation theories shipped with the crate.

pub const NSPK: &str = include_str!("../protocols/nspk.proto");
pub const WMF: &str = include_str!("../protocols/wmf.proto");
pub const DSSK: &str = include_str!("../protocols/dssk.proto");
pub const WOOLAM_PI1: &str = include_str!("../protocols/woolam_pi1.proto");
pub const WOOLAM_AUTH: &str = include_str!("../protocols/woolam_auth.proto");
pub const KP: &str = include_str!("../protocols/kp.proto");

pub const ALL: [(&str, &str); 6] = [
    ("nspk", NSPK),
    ("wmf", WMF),
    ("dssk", DSSK),
    ("woolam_pi1", WOOLAM_PI1),
    ("woolam_auth", WOOLAM_AUTH),
    ("kp", KP),
];

pub const NONCE_CIPHER: &str = include_str!("../theories/nonce_cipher.thy");
pub const KP_THEORY: &str = include_str!("../theories/kp.thy");
