//! Hierarchical 3D shifted-window transformer encoder.
//!
//! Token sequences are `[h·w·d, F]` with tokens ordered z (slowest), y, x
//! (fastest). Dense maps are channel-major `[C, H, W, D]`; grid axis 0 is H,
//! axis 1 is W, axis 2 is D.

mod encoder;
mod window;

pub use encoder::{
    merge_index, patch_embed, patch_merge, swin_block, swin_block_pair, window_msa, AttnIds, AttnVars, BlockIds,
    Encoder, EncoderConfig, EncoderIds, EncoderPlan, Features, StageIds, StagePlan, WindowAttention, WindowOps,
    MLP_RATIO,
};
pub use window::{
    build_shift_mask, cyclic_shift, grid_to_dense, window_partition, window_reverse, PadRecord, TokenGrid, WindowMask,
    WindowPlan, NEG_LARGE,
};
