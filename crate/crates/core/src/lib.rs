pub mod corpus;
pub mod coverage;
pub mod diagnosis;
pub mod frontend;
pub mod keys;
pub mod protocol;
pub mod repair;
pub mod strand;
pub mod term;
pub mod theory;
pub mod verifier;
