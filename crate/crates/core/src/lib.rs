pub mod mittag;
pub mod quadrature;
pub mod model;
pub mod varmin;
#[doc(hidden)]
pub mod oracle;
pub mod solver;
pub mod scenario;
pub mod cli;
