use thiserror::Error;

use crate::crypto::NodeId;

#[derive(Debug, Error)]
pub enum Error {
    /// The scenario itself is inconsistent (bad topology, unknown key, scripted correct node...).
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("send on non-edge ({from}, {to})")]
    NotAnEdge { from: NodeId, to: NodeId },
    #[error("only the base station may broadcast (caller {0})")]
    NotBaseStation(NodeId),
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
