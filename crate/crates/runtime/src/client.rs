//! Blocking client used by the harness and tests.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use crate::error::{Result, RuntimeError};
use crate::link::{self, Conn, Inbound};
use crate::wire::{Message, Mode, Role};

pub struct Client {
    conn: Conn,
    inbox: Receiver<Inbound>,
    pub addr: String,
}

impl Client {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self> {
        let (tx, rx) = mpsc::channel();
        let (conn, _) = link::dial(addr, Role::Client, [0; 8], timeout, tx)?;
        Ok(Self {
            conn,
            inbox: rx,
            addr: addr.to_owned(),
        })
    }

    pub fn send(&self, msg: &Message) -> Result<()> {
        self.conn.send(msg)
    }

    pub fn submit(&self, req_id: u32, count: u16, images: &[f32]) -> Result<()> {
        self.send(&Message::InferReq {
            req_id,
            count,
            images: images.to_vec(),
        })
    }

    /// Next RESULT or ERROR; `Ok(None)` on timeout.
    pub fn recv(&self, timeout: Duration) -> Result<Option<Message>> {
        match self.inbox.recv_timeout(timeout) {
            Ok(Inbound::Frame(_, msg)) => Ok(Some(msg)),
            Ok(Inbound::Closed(_, reason)) => Err(RuntimeError::Closed(reason)),
            Ok(_) => Ok(None),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(RuntimeError::Closed("reader gone".into())),
        }
    }

    /// Submits one batch and waits for its answer.
    pub fn infer(&self, req_id: u32, count: u16, images: &[f32], timeout: Duration) -> Result<Message> {
        self.submit(req_id, count, images)?;
        loop {
            match self.recv(timeout)? {
                Some(m @ Message::Result { req_id: r, .. }) if r == req_id => return Ok(m),
                Some(m @ Message::Error { .. }) => return Ok(m),
                Some(_) => continue,
                None => return Err(RuntimeError::Timeout(format!("no answer for req {req_id}"))),
            }
        }
    }

    pub fn set_mode(&self, mode: Mode) -> Result<()> {
        self.send(&Message::SetMode(mode))
    }

    pub fn close(&self) {
        self.conn.close();
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        self.conn.close();
    }
}
