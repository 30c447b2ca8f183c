//! Parameter-server state machine: one synchronous barrier per iteration.

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{aggregate, CodecConfig, EncodedGradient};

use super::{ClusterError, Message};

/// What the server must do after accepting a message.
#[derive(Debug, PartialEq)]
pub enum ServerAction {
    /// Nothing to send yet.
    Wait,
    /// Every worker pushed; send this pull to all of them.
    Broadcast(Message),
    /// Every worker has shut down.
    Done,
}

#[derive(Debug)]
pub struct ServerState {
    workers: usize,
    codec: CodecConfig,
    iteration: u64,
    registered: BTreeSet<u16>,
    pending: BTreeMap<u16, EncodedGradient>,
    finished: BTreeSet<u16>,
}

impl ServerState {
    pub fn new(workers: usize, codec: CodecConfig) -> Result<Self, ClusterError> {
        if workers == 0 || workers >= u16::MAX as usize {
            return Err(ClusterError::Config(format!("invalid worker count {workers}")));
        }
        codec.validate()?;
        Ok(Self {
            workers,
            codec,
            iteration: 0,
            registered: BTreeSet::new(),
            pending: BTreeMap::new(),
            finished: BTreeSet::new(),
        })
    }

    /// Iteration currently being collected.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Workers whose push for the current iteration has arrived.
    pub fn pending(&self) -> impl Iterator<Item = u16> + '_ {
        self.pending.keys().copied()
    }

    fn check_worker(&self, id: u16) -> Result<(), ClusterError> {
        if id as usize >= self.workers {
            return Err(ClusterError::Protocol(format!(
                "worker id {id} out of range for {} workers",
                self.workers
            )));
        }
        Ok(())
    }

    pub fn accept(&mut self, msg: Message) -> Result<ServerAction, ClusterError> {
        match msg {
            Message::Register { worker } => {
                self.check_worker(worker)?;
                if !self.registered.insert(worker) {
                    return Err(ClusterError::Protocol(format!("worker {worker} registered twice")));
                }
                Ok(ServerAction::Wait)
            }
            Message::Push(push) => {
                let id = push.worker;
                self.check_worker(id)?;
                if !self.registered.contains(&id) {
                    return Err(ClusterError::Protocol(format!("push from unregistered worker {id}")));
                }
                if push.iteration != self.iteration {
                    return Err(ClusterError::Protocol(format!(
                        "worker {id} pushed iteration {} while server is at {}",
                        push.iteration, self.iteration
                    )));
                }
                if self.pending.contains_key(&id) {
                    return Err(ClusterError::Protocol(format!(
                        "duplicate push from worker {id} for iteration {}",
                        self.iteration
                    )));
                }
                self.pending.insert(id, push);
                if self.pending.len() < self.workers {
                    return Ok(ServerAction::Wait);
                }
                let round: Vec<EncodedGradient> = std::mem::take(&mut self.pending).into_values().collect();
                let blocks = aggregate(&round, self.workers, &self.codec)?;
                let pull = Message::Pull {
                    iteration: self.iteration,
                    blocks,
                };
                self.iteration += 1;
                Ok(ServerAction::Broadcast(pull))
            }
            Message::Shutdown { worker, .. } => {
                self.check_worker(worker)?;
                if !self.pending.is_empty() {
                    return Err(ClusterError::Protocol(format!(
                        "worker {worker} shut down mid-iteration {}",
                        self.iteration
                    )));
                }
                self.finished.insert(worker);
                if self.finished.len() == self.workers {
                    Ok(ServerAction::Done)
                } else {
                    Ok(ServerAction::Wait)
                }
            }
            Message::Pull { .. } => Err(ClusterError::Protocol("server received a pull".into())),
        }
    }
}
