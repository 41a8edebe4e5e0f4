pub mod codec;
pub mod domain;
pub mod rng;
pub mod telemetry;
pub mod ledger;
pub mod kernel;
pub mod agents;
pub mod federation;
pub mod simnet;
pub mod scenario;
pub mod certify;
