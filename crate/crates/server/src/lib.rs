//! Teleoperation shell around the simulation core: the session tick loop,
//! the wire protocol, session logs with replay, the scripted operator and
//! the WebSocket server.

pub mod log;
pub mod protocol;
pub mod replay;
pub mod script;
pub mod serve;
pub mod session;
