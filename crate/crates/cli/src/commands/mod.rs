//! One module per subcommand.

pub mod attention;
pub mod campaign;
pub mod evaluate;
pub mod rank;
pub mod registry;
pub mod serve;
pub mod simulate;
