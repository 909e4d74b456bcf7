//! TCP broker: session table, subscription routing and keep-alive expiry.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::{Buf, BytesMut};
use parking_lot::RwLock;
use rca_core::SharedClock;
use serde::Serialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;

use crate::codec::{self, connack, Packet, Publish, ProtocolError, SUBACK_FAILURE};
use crate::topic::{TopicFilter, TopicName};

pub const MAX_CLIENT_ID_BYTES: usize = 64;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub bind: SocketAddr,
    /// Per-client outbound queue; overflowing it disconnects the client.
    pub outbound_queue: usize,
    pub sweep_interval: Duration,
    /// Time allowed for the first packet on a new connection.
    pub connect_timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 1883)),
            outbound_queue: 1024,
            sweep_interval: Duration::from_millis(250),
            connect_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Default, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "camelCase")]
pub struct BrokerStats {
    pub connections: u64,
    pub published: u64,
    pub delivered: u64,
    pub overflow_disconnects: u64,
    pub expired: u64,
}

#[derive(Default)]
struct Counters {
    connections: AtomicU64,
    published: AtomicU64,
    delivered: AtomicU64,
    overflow_disconnects: AtomicU64,
    expired: AtomicU64,
}

struct Session {
    conn_id: u64,
    tx: mpsc::Sender<Packet>,
    filters: Vec<TopicFilter>,
    keep_alive_secs: u16,
    last_seen: Arc<AtomicU64>,
    close: Arc<Notify>,
}

/// Shared session and subscription table.
pub struct SessionTable {
    sessions: RwLock<HashMap<String, Session>>,
    clock: SharedClock,
    queue_capacity: usize,
    next_conn: AtomicU64,
    counters: Counters,
}

/// Connection-side view of a registered session.
pub struct SessionLink {
    pub client_id: String,
    pub conn_id: u64,
    pub outbound: mpsc::Receiver<Packet>,
    pub close: Arc<Notify>,
    pub last_seen: Arc<AtomicU64>,
    /// True when this connect displaced a live session with the same id.
    pub displaced: bool,
}

impl SessionTable {
    pub fn new(clock: SharedClock, queue_capacity: usize) -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            clock,
            queue_capacity,
            next_conn: AtomicU64::new(1),
            counters: Counters::default(),
        }
    }

    /// Registers a session for `client_id`, taking over any live session
    /// with the same id.
    pub fn connect(&self, client_id: &str, keep_alive_secs: u16) -> SessionLink {
        let (tx, rx) = mpsc::channel(self.queue_capacity);
        let close = Arc::new(Notify::new());
        let conn_id = self.next_conn.fetch_add(1, Ordering::Relaxed);
        let last_seen = Arc::new(AtomicU64::new(self.clock.now_ms()));
        let session = Session {
            conn_id,
            tx,
            filters: Vec::new(),
            keep_alive_secs,
            last_seen: last_seen.clone(),
            close: close.clone(),
        };
        let old = self.sessions.write().insert(client_id.to_string(), session);
        let displaced = old.is_some();
        if let Some(old) = old {
            tracing::info!(client_id, "session takeover");
            old.close.notify_one();
        }
        SessionLink {
            client_id: client_id.to_string(),
            conn_id,
            outbound: rx,
            close,
            last_seen,
            displaced,
        }
    }

    /// Removes the session if it still belongs to `conn_id`.
    pub fn disconnect(&self, client_id: &str, conn_id: u64) {
        let mut sessions = self.sessions.write();
        if sessions.get(client_id).is_some_and(|s| s.conn_id == conn_id) {
            if let Some(s) = sessions.remove(client_id) {
                s.close.notify_one();
            }
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Registers each filter and returns one SUBACK code per entry.
    pub fn subscribe(&self, client_id: &str, conn_id: u64, filters: &[(String, u8)]) -> Vec<u8> {
        let mut sessions = self.sessions.write();
        let session = sessions.get_mut(client_id).filter(|s| s.conn_id == conn_id);
        let Some(session) = session else {
            return vec![SUBACK_FAILURE; filters.len()];
        };
        filters
            .iter()
            .map(|(raw, _)| match TopicFilter::parse(raw) {
                Ok(filter) => {
                    if !session.filters.contains(&filter) {
                        session.filters.push(filter);
                    }
                    0x00
                }
                Err(_) => SUBACK_FAILURE,
            })
            .collect()
    }

    pub fn unsubscribe(&self, client_id: &str, conn_id: u64, filters: &[String]) {
        if let Some(s) = self.sessions.write().get_mut(client_id) {
            if s.conn_id == conn_id {
                s.filters.retain(|f| !filters.iter().any(|raw| raw == f.as_str()));
            }
        }
    }

    /// Delivers a QoS0 message to every session with at least one matching
    /// filter. Returns the number of deliveries.
    pub fn publish(&self, topic: &TopicName, payload: bytes::Bytes) -> usize {
        self.counters.published.fetch_add(1, Ordering::Relaxed);
        let packet = Packet::Publish(Publish::qos0(topic.as_str(), payload));
        let mut delivered = 0;
        let mut overflowed = Vec::new();
        {
            let sessions = self.sessions.read();
            for (client_id, s) in sessions.iter() {
                if !s.filters.iter().any(|f| f.matches(topic)) {
                    continue;
                }
                match s.tx.try_send(packet.clone()) {
                    Ok(()) => delivered += 1,
                    Err(mpsc::error::TrySendError::Full(_)) => {
                        overflowed.push((client_id.clone(), s.conn_id))
                    }
                    Err(mpsc::error::TrySendError::Closed(_)) => {}
                }
            }
        }
        for (client_id, conn_id) in overflowed {
            tracing::warn!(client_id, "outbound queue overflow, disconnecting");
            self.counters.overflow_disconnects.fetch_add(1, Ordering::Relaxed);
            self.disconnect(&client_id, conn_id);
        }
        self.counters.delivered.fetch_add(delivered as u64, Ordering::Relaxed);
        delivered
    }

    /// Closes every session silent for longer than 1.5 x its keep-alive.
    /// Keep-alive 0 disables expiry.
    pub fn expire_idle_sessions(&self, now_ms: u64) -> Vec<String> {
        let mut sessions = self.sessions.write();
        let expired: Vec<String> = sessions
            .iter()
            .filter(|(_, s)| {
                s.keep_alive_secs > 0
                    && now_ms.saturating_sub(s.last_seen.load(Ordering::Relaxed))
                        > u64::from(s.keep_alive_secs) * 1500
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            if let Some(s) = sessions.remove(id) {
                s.close.notify_one();
            }
        }
        self.counters.expired.fetch_add(expired.len() as u64, Ordering::Relaxed);
        expired
    }

    pub fn is_live(&self, client_id: &str) -> bool {
        self.sessions.read().contains_key(client_id)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn subscriptions(&self, client_id: &str) -> Vec<String> {
        self.sessions
            .read()
            .get(client_id)
            .map(|s| s.filters.iter().map(|f| f.as_str().to_string()).collect())
            .unwrap_or_default()
    }

    pub fn stats(&self) -> BrokerStats {
        let c = &self.counters;
        BrokerStats {
            connections: c.connections.load(Ordering::Relaxed),
            published: c.published.load(Ordering::Relaxed),
            delivered: c.delivered.load(Ordering::Relaxed),
            overflow_disconnects: c.overflow_disconnects.load(Ordering::Relaxed),
            expired: c.expired.load(Ordering::Relaxed),
        }
    }
}

/// A listening broker. Dropping it stops the listener and every connection.
pub struct RunningBroker {
    addr: SocketAddr,
    table: Arc<SessionTable>,
    task: JoinHandle<()>,
}

impl RunningBroker {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn table(&self) -> &Arc<SessionTable> {
        &self.table
    }

    pub fn stats(&self) -> BrokerStats {
        self.table.stats()
    }

    /// Waits until the accept loop ends (it only ends on abort).
    pub async fn join(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for RunningBroker {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub async fn start(config: BrokerConfig, clock: SharedClock) -> std::io::Result<RunningBroker> {
    let listener = TcpListener::bind(config.bind).await?;
    let addr = listener.local_addr()?;
    let table = Arc::new(SessionTable::new(clock.clone(), config.outbound_queue));
    let task = tokio::spawn(serve(listener, table.clone(), config, clock));
    tracing::info!(%addr, "broker listening");
    Ok(RunningBroker { addr, table, task })
}

async fn serve(listener: TcpListener, table: Arc<SessionTable>, config: BrokerConfig, clock: SharedClock) {
    let mut connections = tokio::task::JoinSet::new();
    let mut sweep = tokio::time::interval(config.sweep_interval);
    sweep.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    table.counters.connections.fetch_add(1, Ordering::Relaxed);
                    let table = table.clone();
                    let timeout = config.connect_timeout;
                    connections.spawn(async move {
                        if let Err(e) = handle_connection(stream, table, timeout).await {
                            tracing::debug!(%peer, error = %e, "connection closed");
                        }
                    });
                }
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            },
            _ = sweep.tick() => {
                for id in table.expire_idle_sessions(clock.now_ms()) {
                    tracing::info!(client_id = %id, "keep-alive expired");
                }
            }
            Some(_) = connections.join_next(), if !connections.is_empty() => {}
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConnectionError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("protocol violation: {0}")]
    Violation(&'static str),
    #[error("connect timeout")]
    ConnectTimeout,
    #[error("peer closed")]
    Closed,
}

async fn read_packet(
    stream: &mut tokio::net::tcp::OwnedReadHalf,
    buf: &mut BytesMut,
) -> Result<Packet, ConnectionError> {
    loop {
        if let Some((packet, used)) = codec::decode(buf)? {
            buf.advance(used);
            return Ok(packet);
        }
        if stream.read_buf(buf).await? == 0 {
            return Err(ConnectionError::Closed);
        }
    }
}

async fn handle_connection(
    stream: TcpStream,
    table: Arc<SessionTable>,
    connect_timeout: Duration,
) -> Result<(), ConnectionError> {
    let (mut reader, mut writer) = stream.into_split();
    let mut buf = BytesMut::with_capacity(4096);

    let first = match tokio::time::timeout(connect_timeout, read_packet(&mut reader, &mut buf)).await {
        Err(_) => return Err(ConnectionError::ConnectTimeout),
        Ok(r) => r,
    };
    let connect = match first {
        Ok(Packet::Connect(c)) => c,
        Ok(_) => return Err(ConnectionError::Violation("first packet not CONNECT")),
        Err(ConnectionError::Protocol(e)) => {
            let nack = Packet::Connack { session_present: false, code: connack::UNACCEPTABLE_PROTOCOL };
            writer.write_all(&codec::encode(&nack)).await?;
            return Err(e.into());
        }
        Err(e) => return Err(e),
    };
    if connect.protocol_level != 4 {
        let nack = Packet::Connack { session_present: false, code: connack::UNACCEPTABLE_PROTOCOL };
        writer.write_all(&codec::encode(&nack)).await?;
        return Err(ConnectionError::Violation("unsupported protocol level"));
    }
    let client_id = if connect.client_id.is_empty() {
        format!("auto-{}", uuid::Uuid::new_v4().simple())
    } else {
        connect.client_id.clone()
    };
    if client_id.len() > MAX_CLIENT_ID_BYTES {
        let nack = Packet::Connack { session_present: false, code: connack::IDENTIFIER_REJECTED };
        writer.write_all(&codec::encode(&nack)).await?;
        return Err(ConnectionError::Violation("client id too long"));
    }

    let link = table.connect(&client_id, connect.keep_alive);
    let SessionLink { conn_id, mut outbound, close, last_seen, .. } = link;
    let writer_task = tokio::spawn(async move {
        while let Some(packet) = outbound.recv().await {
            if writer.write_all(&codec::encode(&packet)).await.is_err() {
                break;
            }
        }
        let _ = writer.shutdown().await;
    });

    // Responses share the outbound queue so they stay ordered with deliveries.
    let reply_tx = {
        let sessions = table.sessions.read();
        sessions.get(&client_id).map(|s| s.tx.clone())
    };
    let result = match reply_tx {
        None => Err(ConnectionError::Closed),
        Some(reply) => {
            let _ = reply
                .send(Packet::Connack { session_present: false, code: connack::ACCEPTED })
                .await;
            tokio::select! {
                r = session_loop(&mut reader, &mut buf, &table, &client_id, conn_id, &last_seen, &reply) => r,
                _ = close.notified() => Err(ConnectionError::Closed),
            }
        }
    };
    table.disconnect(&client_id, conn_id);
    writer_task.abort();
    result
}

async fn session_loop(
    reader: &mut tokio::net::tcp::OwnedReadHalf,
    buf: &mut BytesMut,
    table: &SessionTable,
    client_id: &str,
    conn_id: u64,
    last_seen: &AtomicU64,
    reply: &mpsc::Sender<Packet>,
) -> Result<(), ConnectionError> {
    loop {
        let packet = read_packet(reader, buf).await?;
        last_seen.store(table.now_ms(), Ordering::Relaxed);
        match packet {
            Packet::Connect(_) => return Err(ConnectionError::Violation("second CONNECT")),
            Packet::Publish(p) => {
                if p.qos != 0 {
                    return Err(ConnectionError::Violation("qos > 0 unsupported"));
                }
                let topic = TopicName::parse(&p.topic)
                    .map_err(|_| ConnectionError::Violation("publish topic"))?;
                table.publish(&topic, p.payload);
            }
            Packet::Subscribe { packet_id, filters } => {
                let codes = table.subscribe(client_id, conn_id, &filters);
                reply
                    .send(Packet::Suback { packet_id, codes })
                    .await
                    .map_err(|_| ConnectionError::Closed)?;
            }
            Packet::Unsubscribe { packet_id, filters } => {
                table.unsubscribe(client_id, conn_id, &filters);
                reply
                    .send(Packet::Unsuback { packet_id })
                    .await
                    .map_err(|_| ConnectionError::Closed)?;
            }
            Packet::Pingreq => {
                reply.send(Packet::Pingresp).await.map_err(|_| ConnectionError::Closed)?;
            }
            Packet::Disconnect => return Ok(()),
            Packet::Connack { .. }
            | Packet::Suback { .. }
            | Packet::Unsuback { .. }
            | Packet::Pingresp => return Err(ConnectionError::Violation("server-only packet")),
        }
    }
}
