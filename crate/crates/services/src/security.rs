//! Identity provider: user store, password login and token issuance.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRef, Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD_NO_PAD;
use base64::Engine;
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use rca_core::journal::Journal;
use rca_core::{Claims, Principal, Role, SharedClock};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::http::{finish_router, json_rejection, serve, ApiError, Auth, Authenticated, PauseSwitch};
use crate::{Cluster, RunningService, ServiceConfig};

pub const SERVICE_NAME: &str = "security";
pub const MIN_PASSWORD_BYTES: usize = 8;
pub const MAX_USERNAME_BYTES: usize = 64;
pub const DEFAULT_ITERATIONS: u32 = 100_000;
const SALT_BYTES: usize = 16;
const HASH_BYTES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SecurityError {
    #[error("forbidden")]
    Forbidden,
    #[error("username already taken")]
    Conflict,
    #[error("password must be at least {MIN_PASSWORD_BYTES} bytes")]
    WeakPassword,
    #[error("invalid username or password")]
    InvalidCredentials,
    #[error("malformed user: {0}")]
    Malformed(&'static str),
    #[error("unknown user")]
    UnknownUser,
    #[error("user store unavailable: {0}")]
    Storage(String),
}

impl From<SecurityError> for ApiError {
    fn from(e: SecurityError) -> Self {
        let (status, code) = match e {
            SecurityError::Forbidden => (StatusCode::FORBIDDEN, "forbidden"),
            SecurityError::Conflict => (StatusCode::CONFLICT, "conflict"),
            SecurityError::WeakPassword => (StatusCode::BAD_REQUEST, "weak-password"),
            SecurityError::InvalidCredentials => (StatusCode::UNAUTHORIZED, "invalid-credentials"),
            SecurityError::Malformed(_) => (StatusCode::BAD_REQUEST, "malformed-user"),
            SecurityError::UnknownUser => (StatusCode::NOT_FOUND, "unknown-user"),
            SecurityError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

/// `pbkdf2-sha256$<iterations>$<salt>$<hash>` with unpadded base64 fields.
pub fn hash_password(password: &str, iterations: u32) -> String {
    let mut salt = [0u8; SALT_BYTES];
    rand::thread_rng().fill_bytes(&mut salt);
    let mut out = [0u8; HASH_BYTES];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, iterations, &mut out);
    format!(
        "pbkdf2-sha256${iterations}${}${}",
        STANDARD_NO_PAD.encode(salt),
        STANDARD_NO_PAD.encode(out)
    )
}

pub fn verify_password(password: &str, encoded: &str) -> bool {
    let mut parts = encoded.split('$');
    let (Some("pbkdf2-sha256"), Some(iter), Some(salt), Some(hash), None) =
        (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return false;
    };
    let (Ok(iterations), Ok(salt), Ok(expected)) =
        (iter.parse::<u32>(), STANDARD_NO_PAD.decode(salt), STANDARD_NO_PAD.decode(hash))
    else {
        return false;
    };
    let mut out = vec![0u8; expected.len()];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, iterations, &mut out);
    out.len() == expected.len() && out.iter().zip(&expected).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "camelCase")]
enum UserEvent {
    #[serde(rename_all = "camelCase")]
    Created { username: String, password_hash: String, roles: BTreeSet<Role>, created_at: u64 },
    #[serde(rename_all = "camelCase")]
    PasswordChanged { username: String, password_hash: String, at: u64 },
}

#[derive(Debug, Clone)]
struct UserRecord {
    password_hash: String,
    roles: BTreeSet<Role>,
    created_at: u64,
    password_changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UserView {
    pub username: String,
    pub roles: BTreeSet<Role>,
    pub created_at: u64,
}

fn valid_username(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= MAX_USERNAME_BYTES
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'@'))
}

/// User records, replayed from an append-only journal. Mutations are
/// serialized by the journal lock; reads share the map.
pub struct UserStore {
    users: RwLock<HashMap<String, UserRecord>>,
    journal: Mutex<Journal<UserEvent>>,
    iterations: u32,
    dummy_hash: String,
}

impl UserStore {
    pub fn open(path: impl Into<PathBuf>, iterations: u32) -> std::io::Result<Self> {
        let (journal, events) = Journal::open(path.into())?;
        let mut users = HashMap::new();
        for event in events {
            match event {
                UserEvent::Created { username, password_hash, roles, created_at } => {
                    users.entry(username).or_insert(UserRecord {
                        password_hash,
                        roles,
                        created_at,
                        password_changed: false,
                    });
                }
                UserEvent::PasswordChanged { username, password_hash, .. } => {
                    if let Some(u) = users.get_mut(&username) {
                        u.password_hash = password_hash;
                        u.password_changed = true;
                    }
                }
            }
        }
        Ok(Self {
            users: RwLock::new(users),
            journal: Mutex::new(journal),
            iterations,
            dummy_hash: hash_password("not-a-real-password", iterations),
        })
    }

    pub fn len(&self) -> usize {
        self.users.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, username: &str) -> Option<UserView> {
        self.users.read().get(username).map(|u| UserView {
            username: username.to_string(),
            roles: u.roles.clone(),
            created_at: u.created_at,
        })
    }

    fn check_new(&self, username: &str, password: &str, roles: &BTreeSet<Role>) -> Result<(), SecurityError> {
        if !valid_username(username) {
            return Err(SecurityError::Malformed("username"));
        }
        if roles.is_empty() {
            return Err(SecurityError::Malformed("at least one role is required"));
        }
        if password.len() < MIN_PASSWORD_BYTES {
            return Err(SecurityError::WeakPassword);
        }
        if self.users.read().contains_key(username) {
            return Err(SecurityError::Conflict);
        }
        Ok(())
    }

    /// Stores a new user. Hashing happens before taking the writer lock.
    pub fn insert(&self, username: &str, password: &str, roles: BTreeSet<Role>, now: u64) -> Result<UserView, SecurityError> {
        self.check_new(username, password, &roles)?;
        let password_hash = hash_password(password, self.iterations);
        let mut journal = self.journal.lock();
        if self.users.read().contains_key(username) {
            return Err(SecurityError::Conflict);
        }
        let event = UserEvent::Created {
            username: username.to_string(),
            password_hash: password_hash.clone(),
            roles: roles.clone(),
            created_at: now,
        };
        journal.append_flush(&event).map_err(|e| SecurityError::Storage(e.to_string()))?;
        self.users.write().insert(
            username.to_string(),
            UserRecord { password_hash, roles: roles.clone(), created_at: now, password_changed: false },
        );
        Ok(UserView { username: username.to_string(), roles, created_at: now })
    }

    pub fn create_user(
        &self,
        actor: &Principal,
        username: &str,
        password: &str,
        roles: BTreeSet<Role>,
        now: u64,
    ) -> Result<UserView, SecurityError> {
        if !actor.is_admin() {
            return Err(SecurityError::Forbidden);
        }
        self.insert(username, password, roles, now)
    }

    pub fn change_password(&self, actor: &Principal, username: &str, password: &str, now: u64) -> Result<(), SecurityError> {
        if !actor.is_admin() && actor.subject != username {
            return Err(SecurityError::Forbidden);
        }
        if password.len() < MIN_PASSWORD_BYTES {
            return Err(SecurityError::WeakPassword);
        }
        if !self.users.read().contains_key(username) {
            return Err(SecurityError::UnknownUser);
        }
        let password_hash = hash_password(password, self.iterations);
        let mut journal = self.journal.lock();
        let event = UserEvent::PasswordChanged {
            username: username.to_string(),
            password_hash: password_hash.clone(),
            at: now,
        };
        journal.append_flush(&event).map_err(|e| SecurityError::Storage(e.to_string()))?;
        if let Some(u) = self.users.write().get_mut(username) {
            u.password_hash = password_hash;
            u.password_changed = true;
        }
        Ok(())
    }

    /// Checks credentials. Unknown users still pay for one hash so the two
    /// failure cases are indistinguishable.
    pub fn authenticate(&self, username: &str, password: &str) -> Result<BTreeSet<Role>, SecurityError> {
        let record = self.users.read().get(username).cloned();
        match record {
            Some(u) if verify_password(password, &u.password_hash) => Ok(u.roles),
            Some(_) => Err(SecurityError::InvalidCredentials),
            None => {
                let _ = verify_password(password, &self.dummy_hash);
                Err(SecurityError::InvalidCredentials)
            }
        }
    }

    pub fn password_changed(&self, username: &str) -> bool {
        self.users.read().get(username).is_some_and(|u| u.password_changed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SecurityConfig {
    #[serde(flatten)]
    pub service: ServiceConfig,
    pub token_lifetime_ms: u64,
    /// Defaults to `<dataDir>/users.jsonl`.
    pub journal: Option<PathBuf>,
    pub admin_username: String,
    pub admin_password: String,
    pub hash_iterations: u32,
}

impl Default for SecurityConfig {
    fn default() -> Self {
        Self {
            service: ServiceConfig::with_port(7001),
            token_lifetime_ms: 3_600_000,
            journal: None,
            admin_username: "admin".into(),
            admin_password: "admin-change-me".into(),
            hash_iterations: DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Clone)]
pub struct SecurityState {
    pub users: Arc<UserStore>,
    pub auth: Auth,
    pub token_lifetime_ms: u64,
}

impl FromRef<SecurityState> for Auth {
    fn from_ref(s: &SecurityState) -> Auth {
        s.auth.clone()
    }
}

impl SecurityState {
    pub fn issue_token(&self, username: &str, password: &str) -> Result<(String, u64), SecurityError> {
        let roles = self.users.authenticate(username, password)?;
        let now = self.auth.clock.now_ms();
        let claims = Claims {
            sub: username.to_string(),
            roles,
            iat: now,
            exp: now + self.token_lifetime_ms.max(1),
            jti: uuid::Uuid::new_v4().simple().to_string(),
        };
        Ok((self.auth.signer.sign(&claims), claims.exp))
    }
}

#[derive(Deserialize)]
struct Credentials {
    username: String,
    password: String,
}

#[derive(Deserialize)]
struct TokenBody {
    token: String,
}

#[derive(Deserialize)]
struct NewUser {
    username: String,
    password: String,
    roles: BTreeSet<Role>,
}

#[derive(Deserialize)]
struct NewPassword {
    password: String,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))
}

async fn issue(State(s): State<SecurityState>, body: Result<Json<Credentials>, JsonRejection>) -> Result<Json<serde_json::Value>, ApiError> {
    let Json(c) = body.map_err(json_rejection)?;
    let (token, expires_at) = blocking(move || s.issue_token(&c.username, &c.password)).await??;
    Ok(Json(serde_json::json!({ "token": token, "expiresAt": expires_at })))
}

async fn validate(State(s): State<SecurityState>, body: Result<Json<TokenBody>, JsonRejection>) -> Result<Json<Principal>, ApiError> {
    let Json(b) = body.map_err(json_rejection)?;
    Ok(Json(s.auth.signer.principal(&b.token, s.auth.clock.now_ms())?))
}

async fn create(
    State(s): State<SecurityState>,
    caller: Authenticated,
    body: Result<Json<NewUser>, JsonRejection>,
) -> Result<(StatusCode, Json<UserView>), ApiError> {
    let Json(u) = body.map_err(json_rejection)?;
    let now = s.auth.clock.now_ms();
    let view = blocking(move || s.users.create_user(&caller.principal, &u.username, &u.password, u.roles, now)).await??;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn change_password(
    State(s): State<SecurityState>,
    caller: Authenticated,
    Path(name): Path<String>,
    body: Result<Json<NewPassword>, JsonRejection>,
) -> Result<StatusCode, ApiError> {
    let Json(p) = body.map_err(json_rejection)?;
    let now = s.auth.clock.now_ms();
    blocking(move || s.users.change_password(&caller.principal, &name, &p.password, now)).await??;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_user(State(s): State<SecurityState>, caller: Authenticated, Path(name): Path<String>) -> Result<Json<UserView>, ApiError> {
    if !caller.principal.is_admin() && caller.principal.subject != name {
        return Err(SecurityError::Forbidden.into());
    }
    s.users.get(&name).map(Json).ok_or_else(|| SecurityError::UnknownUser.into())
}

pub fn router(state: SecurityState) -> Router {
    Router::new()
        .route("/auth/token", post(issue))
        .route("/auth/validate", post(validate))
        .route("/users", post(create))
        .route("/users/{name}", get(get_user))
        .route("/users/{name}/password", put(change_password))
        .with_state(state)
}

/// Opens the store and seeds the bootstrap admin on first start.
pub fn build_state(config: &SecurityConfig, clock: SharedClock) -> std::io::Result<SecurityState> {
    let path = config
        .journal
        .clone()
        .unwrap_or_else(|| config.service.data_dir.join("users.jsonl"));
    let users = UserStore::open(path, config.hash_iterations)?;
    if users.is_empty() {
        users
            .insert(&config.admin_username, &config.admin_password, [Role::Admin].into(), clock.now_ms())
            .map_err(|e| std::io::Error::other(format!("seeding admin: {e}")))?;
        tracing::warn!(user = %config.admin_username, "seeded bootstrap admin; rotate its password");
    } else if !users.password_changed(&config.admin_username) && users.get(&config.admin_username).is_some() {
        tracing::warn!(user = %config.admin_username, "bootstrap admin password has not been rotated");
    }
    Ok(SecurityState {
        users: Arc::new(users),
        auth: Auth::new(&config.service.token_secret, clock),
        token_lifetime_ms: config.token_lifetime_ms,
    })
}

pub async fn start(config: SecurityConfig, clock: SharedClock) -> std::io::Result<RunningService> {
    let state = build_state(&config, clock.clone())?;
    let listener = tokio::net::TcpListener::bind(config.service.bind).await?;
    let addr = listener.local_addr()?;
    let instance_id = config.service.instance_id(SERVICE_NAME, addr);
    let pause = PauseSwitch::default();
    let app = finish_router(router(state), &instance_id, pause.clone());
    let server = serve(listener, app);
    let cluster = Cluster::new(SERVICE_NAME, &config.service, clock);
    let lease = cluster.lease(&config.service, addr, &instance_id);
    tracing::info!(%addr, "security listening");
    Ok(RunningService::new(SERVICE_NAME, instance_id, addr, pause, vec![server, lease]))
}

#[cfg(test)]
mod tests {
    use rca_core::{Clock, ManualClock};

    use super::*;

    fn admin() -> Principal {
        Principal { subject: "admin".into(), roles: [Role::Admin].into(), token_id: "t".into() }
    }

    fn state(dir: &tempfile::TempDir, clock: &ManualClock) -> SecurityState {
        let config = SecurityConfig {
            journal: Some(dir.path().join("users.jsonl")),
            hash_iterations: 1_000,
            ..Default::default()
        };
        build_state(&config, clock.shared()).unwrap()
    }

    #[test]
    fn hash_round_trip_and_format() {
        let h = hash_password("correct horse", 1_000);
        assert!(h.starts_with("pbkdf2-sha256$1000$"));
        assert!(verify_password("correct horse", &h));
        assert!(!verify_password("correct hors", &h));
        assert!(!verify_password("x", "garbage"));
        assert_ne!(h, hash_password("correct horse", 1_000), "salt must differ");
    }

    #[test]
    fn create_and_login() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(1_000);
        let s = state(&dir, &clock);
        s.users.create_user(&admin(), "mia", "password1", [Role::Caregiver].into(), 1).unwrap();
        let (token, exp) = s.issue_token("mia", "password1").unwrap();
        assert_eq!(exp, 1_000 + 3_600_000);
        let p = s.auth.signer.principal(&token, 2_000).unwrap();
        assert_eq!(p.subject, "mia");
        assert_eq!(p.roles, [Role::Caregiver].into());
        clock.set(exp);
        assert_eq!(s.auth.signer.principal(&token, clock.now_ms()), Err(rca_core::TokenError::Expired));
    }

    #[test]
    fn create_user_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = state(&dir, &ManualClock::new(0));
        let carer = Principal { subject: "c".into(), roles: [Role::Caregiver].into(), token_id: "t".into() };
        assert_eq!(
            s.users.create_user(&carer, "x", "password1", [Role::Relative].into(), 0),
            Err(SecurityError::Forbidden)
        );
        assert_eq!(s.users.create_user(&admin(), "admin", "password1", [Role::Relative].into(), 0), Err(SecurityError::Conflict));
        assert_eq!(s.users.create_user(&admin(), "bob", "short", [Role::Relative].into(), 0), Err(SecurityError::WeakPassword));
        assert!(matches!(s.users.create_user(&admin(), "", "password1", [Role::Relative].into(), 0), Err(SecurityError::Malformed(_))));
        assert!(matches!(s.users.create_user(&admin(), "bob", "password1", BTreeSet::new(), 0), Err(SecurityError::Malformed(_))));
    }

    #[test]
    fn unknown_user_and_wrong_password_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let s = state(&dir, &ManualClock::new(0));
        assert_eq!(s.issue_token("admin", "wrong-password"), Err(SecurityError::InvalidCredentials));
        assert_eq!(s.issue_token("ghost", "wrong-password"), Err(SecurityError::InvalidCredentials));
    }

    #[test]
    fn journal_replay_restores_users_and_password_changes() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(0);
        {
            let s = state(&dir, &clock);
            s.users.create_user(&admin(), "mia", "password1", [Role::Caregiver].into(), 5).unwrap();
            let mia = Principal { subject: "mia".into(), roles: [Role::Caregiver].into(), token_id: "t".into() };
            s.users.change_password(&mia, "mia", "password2", 6).unwrap();
            assert_eq!(s.users.change_password(&mia, "admin", "password3", 7), Err(SecurityError::Forbidden));
        }
        let s = state(&dir, &clock);
        assert_eq!(s.users.len(), 2);
        assert!(s.issue_token("mia", "password2").is_ok());
        assert!(s.issue_token("mia", "password1").is_err());
        let raw = std::fs::read_to_string(dir.path().join("users.jsonl")).unwrap();
        assert!(!raw.contains("password2"), "plaintext must never be persisted");
    }
}
