//! Prototype memory: a popularity-partitioned grid of slots, sparse routing
//! into it, and the regularizers that keep routing balanced and ranked.

pub mod bank;
pub mod kmeans;
pub mod losses;
pub mod routing;
pub mod stats;

pub use bank::{init_bank, init_bank_with, quantile_partitions, update_bank, BankInit, MemoryBank};
pub use losses::{dppo_loss, form_pairs, load_balance_loss, zipf_prior, BalanceConfig};
pub use routing::{project_query, route, route_with, top_k_indices, RouteGrads, RoutingResult};
pub use stats::{slot_statistics, SlotStats};
