//! Masked transmission: wire messages, region-overlap aggregation and the bit ledger.

mod account;
mod aggregate;
mod ledger;
mod message;
pub mod wire;

pub use account::{block_costs, format_table, published_constants, BlockSpec, MethodCost};
pub use aggregate::{aggregate, aggregate_decoded, fedavg_baseline_round, layer_values_from_fn, masked_pulls};
pub use ledger::{bits_to_kb, block_comm_bits, comm_cost, message_bits, message_groups, CommLedger, Direction, LedgerEntry};
pub use message::{
    affine_vector, baseline_upload, full_layer_params, masked_sample, masked_upload, DecodedUpdate, DenseUpdate,
    DenseValues, LayerUpdate, LayerValues, MaskedUpdate, Precision, SelectedIndices, TensorPayload,
};
