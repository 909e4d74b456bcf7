//! Minimal QoS0 client used by the platform's services and the simulator.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU16, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::{Buf, Bytes, BytesMut};
use parking_lot::Mutex;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::codec::{self, connack, Connect, Packet, ProtocolError, Publish};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connect failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("connection refused by broker, return code {0}")]
    Refused(u8),
    #[error("unexpected packet from broker")]
    Unexpected,
    #[error("disconnected")]
    Disconnected,
    #[error("timed out")]
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub payload: Bytes,
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub client_id: String,
    pub keep_alive_secs: u16,
    pub inbound_capacity: usize,
    pub timeout: Duration,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            keep_alive_secs: 30,
            inbound_capacity: 8192,
            timeout: Duration::from_secs(5),
        }
    }
}

struct Inner {
    outbound: mpsc::Sender<Packet>,
    pending: Mutex<HashMap<u16, oneshot::Sender<Packet>>>,
    next_id: AtomicU16,
    connected: Arc<AtomicBool>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    timeout: Duration,
}

impl Drop for Inner {
    fn drop(&mut self) {
        for t in self.tasks.get_mut().drain(..) {
            t.abort();
        }
    }
}

/// Cloneable handle to one broker session. The connection closes when the
/// last clone is dropped.
#[derive(Clone)]
pub struct MqttClient {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for MqttClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MqttClient")
            .field("connected", &self.is_connected())
            .finish()
    }
}

impl MqttClient {
    /// Connects and waits for CONNACK. Incoming PUBLISH packets are delivered
    /// on the returned receiver, which ends when the connection drops.
    pub async fn connect(
        addr: &str,
        options: ClientOptions,
    ) -> Result<(Self, mpsc::Receiver<Message>), ClientError> {
        let stream = tokio::time::timeout(options.timeout, TcpStream::connect(addr))
            .await
            .map_err(|_| ClientError::Timeout)??;
        stream.set_nodelay(true)?;
        let (mut reader, mut writer) = stream.into_split();
        let connect = Packet::Connect(Connect::new(options.client_id.clone(), options.keep_alive_secs));
        writer.write_all(&codec::encode(&connect)).await?;

        let mut buf = BytesMut::with_capacity(8192);
        let ack = tokio::time::timeout(options.timeout, read_packet(&mut reader, &mut buf))
            .await
            .map_err(|_| ClientError::Timeout)??;
        match ack {
            Packet::Connack { code: connack::ACCEPTED, .. } => {}
            Packet::Connack { code, .. } => return Err(ClientError::Refused(code)),
            _ => return Err(ClientError::Unexpected),
        }

        let (out_tx, mut out_rx) = mpsc::channel::<Packet>(4096);
        let (in_tx, in_rx) = mpsc::channel::<Message>(options.inbound_capacity);
        let connected = Arc::new(AtomicBool::new(true));
        let inner = Arc::new(Inner {
            outbound: out_tx.clone(),
            pending: Mutex::new(HashMap::new()),
            next_id: AtomicU16::new(1),
            connected: connected.clone(),
            tasks: Mutex::new(Vec::new()),
            timeout: options.timeout,
        });

        let write_flag = connected.clone();
        let writer_task = tokio::spawn(async move {
            let mut batch = BytesMut::new();
            while let Some(packet) = out_rx.recv().await {
                batch.extend_from_slice(&codec::encode(&packet));
                while let Ok(more) = out_rx.try_recv() {
                    batch.extend_from_slice(&codec::encode(&more));
                    if batch.len() > 64 * 1024 {
                        break;
                    }
                }
                if writer.write_all(&batch).await.is_err() {
                    break;
                }
                batch.clear();
            }
            write_flag.store(false, Ordering::SeqCst);
        });

        let weak = Arc::downgrade(&inner);
        let read_flag = connected.clone();
        let reader_task = tokio::spawn(async move {
            loop {
                let packet = match read_packet(&mut reader, &mut buf).await {
                    Ok(p) => p,
                    Err(_) => break,
                };
                match packet {
                    Packet::Publish(p) => {
                        let msg = Message { topic: p.topic, payload: p.payload };
                        if in_tx.send(msg).await.is_err() {
                            break;
                        }
                    }
                    Packet::Suback { packet_id, .. } | Packet::Unsuback { packet_id } => {
                        let Some(inner) = weak.upgrade() else { break };
                        let waiter = inner.pending.lock().remove(&packet_id);
                        if let Some(w) = waiter {
                            let _ = w.send(packet);
                        }
                    }
                    Packet::Pingresp => {}
                    _ => break,
                }
            }
            read_flag.store(false, Ordering::SeqCst);
        });

        let mut tasks = vec![writer_task, reader_task];
        if options.keep_alive_secs > 0 {
            let interval = Duration::from_millis(u64::from(options.keep_alive_secs) * 500);
            let ping_tx = out_tx;
            tasks.push(tokio::spawn(async move {
                let mut tick = tokio::time::interval(interval);
                tick.tick().await;
                loop {
                    tick.tick().await;
                    if ping_tx.send(Packet::Pingreq).await.is_err() {
                        break;
                    }
                }
            }));
        }
        *inner.tasks.lock() = tasks;
        Ok((Self { inner }, in_rx))
    }

    pub fn is_connected(&self) -> bool {
        self.inner.connected.load(Ordering::SeqCst)
    }

    fn packet_id(&self) -> u16 {
        loop {
            let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
            if id != 0 {
                return id;
            }
        }
    }

    async fn request(&self, build: impl FnOnce(u16) -> Packet) -> Result<Packet, ClientError> {
        let id = self.packet_id();
        let (tx, rx) = oneshot::channel();
        self.inner.pending.lock().insert(id, tx);
        self.send(build(id)).await?;
        match tokio::time::timeout(self.inner.timeout, rx).await {
            Ok(Ok(p)) => Ok(p),
            Ok(Err(_)) => Err(ClientError::Disconnected),
            Err(_) => {
                self.inner.pending.lock().remove(&id);
                Err(ClientError::Timeout)
            }
        }
    }

    async fn send(&self, packet: Packet) -> Result<(), ClientError> {
        if !self.is_connected() {
            return Err(ClientError::Disconnected);
        }
        self.inner
            .outbound
            .send(packet)
            .await
            .map_err(|_| ClientError::Disconnected)
    }

    /// Subscribes at QoS0 and returns the broker's per-filter return codes.
    pub async fn subscribe(&self, filters: &[&str]) -> Result<Vec<u8>, ClientError> {
        let filters: Vec<(String, u8)> = filters.iter().map(|f| (f.to_string(), 0)).collect();
        match self.request(|packet_id| Packet::Subscribe { packet_id, filters }).await? {
            Packet::Suback { codes, .. } => Ok(codes),
            _ => Err(ClientError::Unexpected),
        }
    }

    pub async fn unsubscribe(&self, filters: &[&str]) -> Result<(), ClientError> {
        let filters = filters.iter().map(|f| f.to_string()).collect();
        match self.request(|packet_id| Packet::Unsubscribe { packet_id, filters }).await? {
            Packet::Unsuback { .. } => Ok(()),
            _ => Err(ClientError::Unexpected),
        }
    }

    /// Queues a QoS0 publish. Success means the packet was handed to the
    /// connection, not that anyone received it.
    pub async fn publish(&self, topic: &str, payload: impl Into<Bytes>) -> Result<(), ClientError> {
        self.send(Packet::Publish(Publish::qos0(topic, payload))).await
    }

    pub async fn disconnect(&self) {
        let _ = self.send(Packet::Disconnect).await;
    }
}

async fn read_packet(
    reader: &mut tokio::net::tcp::OwnedReadHalf,
    buf: &mut BytesMut,
) -> Result<Packet, ClientError> {
    loop {
        if let Some((packet, used)) = codec::decode(buf)? {
            buf.advance(used);
            return Ok(packet);
        }
        if reader.read_buf(buf).await? == 0 {
            return Err(ClientError::Disconnected);
        }
    }
}
