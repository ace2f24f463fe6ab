pub mod fuzz;
pub mod model;
pub mod oracle;
pub mod presets;
pub mod protocol;
pub mod recovery;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod tmr;
pub mod trace;
