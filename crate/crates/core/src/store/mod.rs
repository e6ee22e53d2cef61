//! Sharded key-value store: per-node command execution, the transaction
//! log, the node wire protocol and the pub/sub channel registry.

mod bus;
mod frame;
mod log;
mod shard;

pub use bus::{ChannelRegistry, Fanout, Origin};
pub use frame::{decode_frame, encode_frame, Frame, FrameError, Opcode, MAX_FRAME_LEN};
pub use log::{
    decode_record, encode_record, recover_log, replay_log, Command, LogError, LogRecord,
    Recovered, Replayer,
};
pub use shard::{Reply, Request, Shard, Table};
