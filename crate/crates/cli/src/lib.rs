//! `rca`: operator command line for the remote care platform.
//!
//! Every operation goes through the API gateway with the caller's own
//! token. Exit codes: 0 success, 1 request rejected (4xx or no session),
//! 2 platform unreachable or failing (5xx), 3 malformed local input.

pub mod client;
pub mod credentials;
pub mod output;

use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rca_core::{AccessItem, AccessMode, Command, DeviceState, Role};
use reqwest::{Method, StatusCode};
use serde_json::json;
use thiserror::Error;

use client::{segment, Gateway};
use credentials::Credentials;
use output::Render;

pub const DEFAULT_GATEWAY: &str = "http://127.0.0.1:8080";

pub const EXIT_OK: i32 = 0;
pub const EXIT_REJECTED: i32 = 1;
pub const EXIT_UNAVAILABLE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("not logged in; run `rca login <username>`")]
    NotLoggedIn,
    #[error("session for {0} has expired; run `rca login {0}`")]
    Expired(String),
    #[error("{code}: {message}")]
    Http { status: StatusCode, code: String, message: String },
    #[error("{0}")]
    Connect(String),
    #[error("{0}")]
    Protocol(String),
    #[error("credentials file {path}: {source}")]
    Credentials { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Credentials { .. } => EXIT_INPUT,
            CliError::NotLoggedIn | CliError::Expired(_) => EXIT_REJECTED,
            CliError::Http { status, .. } if status.is_client_error() => EXIT_REJECTED,
            CliError::Http { .. } | CliError::Connect(_) | CliError::Protocol(_) => EXIT_UNAVAILABLE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rca", version, about = "Operate the remote care platform through its API gateway")]
struct Cli {
    /// Gateway base URL [env: RCA_GATEWAY; default: the one used at login]
    #[arg(long, global = true)]
    gateway: Option<String>,
    /// Print machine-readable JSON instead of tables
    #[arg(long, global = true)]
    json: bool,
    /// Credentials file [env: RCA_CREDENTIALS]
    #[arg(long, global = true)]
    credentials: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Obtain a session token and store it locally
    Login {
        username: String,
        #[command(flatten)]
        password: PasswordArg,
    },
    /// Forget the stored session
    Logout,
    #[command(subcommand)]
    Users(UsersCmd),
    #[command(subcommand)]
    Grants(GrantsCmd),
    #[command(subcommand)]
    Homes(HomesCmd),
    #[command(subcommand)]
    Command(CommandCmd),
    /// Registered service instances and breaker states
    Status,
}

#[derive(Debug, Args)]
struct PasswordArg {
    /// Read the password from the first line of stdin [else RCA_PASSWORD, else prompt]
    #[arg(long)]
    password_stdin: bool,
}

/// Manage user accounts (admin only)
#[derive(Debug, Subcommand)]
enum UsersCmd {
    /// Create a user; the password is read from stdin or a prompt
    Add {
        username: String,
        #[arg(long = "role", required = true, value_parser = parse_role)]
        roles: Vec<Role>,
        #[command(flatten)]
        password: PasswordArg,
    },
    /// Set a user's password
    Passwd {
        username: String,
        #[command(flatten)]
        password: PasswordArg,
    },
}

/// Manage access grants (admin only)
#[derive(Debug, Subcommand)]
enum GrantsCmd {
    /// Grant a right
    Add(GrantArgs),
    /// Revoke a right
    Revoke(GrantArgs),
    /// A user's grants
    List { username: String },
}

#[derive(Debug, Args)]
struct GrantArgs {
    username: String,
    /// `home/<homeId>` or `home/<homeId>/item/<itemId>`
    #[arg(value_parser = parse_access_item)]
    access_item: AccessItem,
    /// Read or Write
    #[arg(value_parser = parse_mode)]
    mode: AccessMode,
}

/// Browse homes and their recorded state
#[derive(Debug, Subcommand)]
enum HomesCmd {
    /// Homes you can read
    List,
    /// Items of a home with their current state
    Show {
        home: String,
    },
    /// Recorded states of one item
    History {
        home: String,
        item: String,
        /// Epoch milliseconds or RFC 3339
        #[arg(long, value_parser = parse_time)]
        from: Option<u64>,
        /// Epoch milliseconds or RFC 3339
        #[arg(long, value_parser = parse_time)]
        to: Option<u64>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

/// Send device commands and read the command log
#[derive(Debug, Subcommand)]
enum CommandCmd {
    /// Dispatch a command to a device item
    Send {
        home: String,
        item: String,
        value: String,
        #[arg(long)]
        label: Option<String>,
    },
    /// Commands recently sent to a home
    Log {
        home: String,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn parse_role(s: &str) -> Result<Role, String> {
    s.parse()
}

fn parse_access_item(s: &str) -> Result<AccessItem, String> {
    AccessItem::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<AccessMode, String> {
    s.parse().map_err(|e: rca_core::DomainError| e.to_string())
}

fn parse_time(s: &str) -> Result<u64, String> {
    if let Ok(ms) = s.parse::<u64>() {
        return Ok(ms);
    }
    let t = chrono::DateTime::parse_from_rfc3339(s).map_err(|_| format!("`{s}` is neither epoch milliseconds nor RFC 3339"))?;
    u64::try_from(t.timestamp_millis()).map_err(|_| format!("`{s}` is before the epoch"))
}

/// Where passwords come from when a command needs one.
pub enum PasswordSource {
    /// Lines of a reader (stdin when it is not a terminal).
    Lines(Box<dyn BufRead + Send>),
    /// Prompt on the controlling terminal without echo.
    Terminal,
}

/// Process environment, injectable for tests.
pub struct Env {
    pub gateway: Option<String>,
    pub credentials: Option<PathBuf>,
    pub password: Option<String>,
    pub input: PasswordSource,
}

impl Env {
    pub fn from_process() -> Self {
        use std::io::IsTerminal;
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let input = if std::io::stdin().is_terminal() {
            PasswordSource::Terminal
        } else {
            PasswordSource::Lines(Box::new(std::io::BufReader::new(std::io::stdin())))
        };
        Self {
            gateway: var("RCA_GATEWAY"),
            credentials: var("RCA_CREDENTIALS").map(PathBuf::from),
            password: var("RCA_PASSWORD"),
            input,
        }
    }

    fn read_password(&mut self, arg: &PasswordArg, prompt: &str) -> Result<String, CliError> {
        let from_input = |input: &mut PasswordSource| -> Result<String, CliError> {
            let line = match input {
                PasswordSource::Terminal => rpassword::prompt_password(prompt),
                PasswordSource::Lines(r) => {
                    let mut line = String::new();
                    r.read_line(&mut line).map(|_| line)
                }
            }
            .map_err(|e| CliError::Input(format!("cannot read password: {e}")))?;
            Ok(line.trim_end_matches(['\r', '\n']).to_string())
        };
        let password = match (&self.password, arg.password_stdin) {
            (Some(p), false) => p.clone(),
            _ => from_input(&mut self.input)?,
        };
        if password.is_empty() {
            return Err(CliError::Input("empty password".into()));
        }
        Ok(password)
    }
}

/// Runs one invocation and returns its exit code.
pub async fn run<I, S>(args: I, mut env: Env, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let help = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let sink: &mut dyn Write = if help { out } else { err };
            let _ = write!(sink, "{}", e.render());
            return if help { EXIT_OK } else { EXIT_INPUT };
        }
    };
    match execute(cli, &mut env).await {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "rca: {e}");
            e.exit_code()
        }
    }
}

fn now_ms() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

struct Ctx {
    gateway: String,
    json: bool,
    path: PathBuf,
    stored: Option<Credentials>,
}

impl Ctx {
    fn emit<T: Render>(&self, view: &T) -> Result<String, CliError> {
        if self.json {
            let mut s = serde_json::to_string_pretty(view).map_err(|e| CliError::Protocol(e.to_string()))?;
            s.push('\n');
            Ok(s)
        } else {
            Ok(view.human())
        }
    }

    /// A client carrying the stored, unexpired session token.
    fn authed(&self) -> Result<Gateway, CliError> {
        let creds = self.stored.as_ref().ok_or(CliError::NotLoggedIn)?;
        if creds.is_expired(now_ms()) {
            return Err(CliError::Expired(creds.username.clone()));
        }
        Gateway::new(&self.gateway, Some(creds.token.clone()))
    }
}

async fn execute(cli: Cli, env: &mut Env) -> Result<String, CliError> {
    let path = cli.credentials.or_else(|| env.credentials.clone()).unwrap_or_else(credentials::default_path);
    let stored = credentials::load(&path);
    let gateway = cli
        .gateway
        .or_else(|| env.gateway.clone())
        .or_else(|| stored.as_ref().map(|c| c.gateway.clone()))
        .unwrap_or_else(|| DEFAULT_GATEWAY.to_string());
    let ctx = Ctx { gateway, json: cli.json, path, stored };
    let result = dispatch(cli.cmd, &ctx, env).await;
    match result {
        Err(e) if client::is_unauthorized(&e) => {
            let CliError::Http { status, code, message } = e else { unreachable!() };
            Err(CliError::Http { status, code, message: format!("{message}; run `rca login` to start a new session") })
        }
        other => other,
    }
}

type NoBody = ();

async fn dispatch(cmd: Cmd, ctx: &Ctx, env: &mut Env) -> Result<String, CliError> {
    match cmd {
        Cmd::Login { username, password } => {
            let password = env.read_password(&password, "Password: ")?;
            let gw = Gateway::new(&ctx.gateway, None)?;
            let issued: serde_json::Value = gw
                .call(Method::POST, "/api/auth/token", &[], Some(&json!({ "username": username, "password": password })))
                .await?;
            let token = issued["token"].as_str().ok_or_else(|| CliError::Protocol("token missing from response".into()))?;
            let expires_at = issued["expiresAt"].as_u64().ok_or_else(|| CliError::Protocol("expiresAt missing from response".into()))?;
            let creds = Credentials { gateway: ctx.gateway.clone(), username: username.clone(), token: token.into(), expires_at };
            credentials::save(&ctx.path, &creds).map_err(|source| CliError::Credentials { path: ctx.path.clone(), source })?;
            ctx.emit(&output::Session { username, expires_at })
        }
        Cmd::Logout => {
            let removed = credentials::remove(&ctx.path).map_err(|source| CliError::Credentials { path: ctx.path.clone(), source })?;
            ctx.emit(&output::LoggedOut { logged_out: removed })
        }
        Cmd::Users(UsersCmd::Add { username, roles, password }) => {
            let gw = ctx.authed()?;
            let password = env.read_password(&password, &format!("Password for {username}: "))?;
            let body = json!({ "username": username, "password": password, "roles": roles });
            let user: output::User = gw.call(Method::POST, "/api/users", &[], Some(&body)).await?;
            ctx.emit(&user)
        }
        Cmd::Users(UsersCmd::Passwd { username, password }) => {
            let gw = ctx.authed()?;
            let password = env.read_password(&password, &format!("New password for {username}: "))?;
            let path = format!("/api/users/{}/password", segment(&username));
            gw.call_empty(Method::PUT, &path, Some(&json!({ "password": password }))).await?;
            ctx.emit(&output::PasswordChanged { username, password_changed: true })
        }
        Cmd::Grants(GrantsCmd::Add(g)) => {
            let gw = ctx.authed()?;
            let body = json!({ "username": g.username, "accessItem": g.access_item, "mode": g.mode });
            let grant: output::Grant = gw.call(Method::POST, "/api/access/grants", &[], Some(&body)).await?;
            ctx.emit(&grant)
        }
        Cmd::Grants(GrantsCmd::Revoke(g)) => {
            let gw = ctx.authed()?;
            let body = json!({ "username": g.username, "accessItem": g.access_item, "mode": g.mode });
            gw.call_empty(Method::DELETE, "/api/access/grants", Some(&body)).await?;
            ctx.emit(&output::Revoked { username: g.username, access_item: g.access_item, mode: g.mode })
        }
        Cmd::Grants(GrantsCmd::List { username }) => {
            let gw = ctx.authed()?;
            let path = format!("/api/access/grants/{}", segment(&username));
            let grants: Vec<output::Grant> = gw.call::<NoBody, _>(Method::GET, &path, &[], None).await?;
            ctx.emit(&grants)
        }
        Cmd::Homes(HomesCmd::List) => {
            let gw = ctx.authed()?;
            let homes: Vec<output::HomeSummary> = gw.call::<NoBody, _>(Method::GET, "/api/history/homes", &[], None).await?;
            ctx.emit(&homes)
        }
        Cmd::Homes(HomesCmd::Show { home }) => {
            let gw = ctx.authed()?;
            let path = format!("/api/history/homes/{}", segment(&home));
            let view: output::Home = gw.call::<NoBody, _>(Method::GET, &path, &[], None).await?;
            ctx.emit(&view)
        }
        Cmd::Homes(HomesCmd::History { home, item, from, to, limit }) => {
            let gw = ctx.authed()?;
            let path = format!("/api/history/homes/{}/items/{}/history", segment(&home), segment(&item));
            let query: Vec<(&str, String)> = [("from", from), ("to", to), ("limit", limit.map(|l| l as u64))]
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k, v.to_string())))
                .collect();
            let states: Vec<DeviceState> = gw.call::<NoBody, _>(Method::GET, &path, &query, None).await?;
            ctx.emit(&states)
        }
        Cmd::Command(CommandCmd::Send { home, item, value, label }) => {
            let gw = ctx.authed()?;
            let path = format!("/api/control/homes/{}/items/{}/command", segment(&home), segment(&item));
            let body = json!({ "value": value, "label": label });
            let dispatched: output::Dispatched = gw.call(Method::POST, &path, &[], Some(&body)).await?;
            ctx.emit(&dispatched)
        }
        Cmd::Command(CommandCmd::Log { home, limit }) => {
            let gw = ctx.authed()?;
            let path = format!("/api/control/homes/{}/commands", segment(&home));
            let query: Vec<(&str, String)> = limit.map(|l| ("limit", l.to_string())).into_iter().collect();
            let log: Vec<Command> = gw.call::<NoBody, _>(Method::GET, &path, &query, None).await?;
            ctx.emit(&log)
        }
        Cmd::Status => {
            let gw = ctx.authed()?;
            let status: output::Status = gw.call::<NoBody, _>(Method::GET, "/api/status", &[], None).await?;
            ctx.emit(&status)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(lines: &str) -> Env {
        Env {
            gateway: None,
            credentials: None,
            password: None,
            input: PasswordSource::Lines(Box::new(std::io::Cursor::new(lines.as_bytes().to_vec()))),
        }
    }

    async fn invoke(args: &[&str], env: Env) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("rca").chain(args.iter().copied()), env, &mut out, &mut err).await;
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[tokio::test]
    async fn malformed_local_input_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let creds = dir.path().join("c.json").display().to_string();
        for args in [
            vec!["grants", "add", "mia", "house/h1", "Read"],
            vec!["grants", "add", "mia", "home/h1", "Execute"],
            vec!["users", "add", "mia", "--role", "superuser"],
            vec!["homes", "history", "h1", "lamp", "--from", "yesterday"],
            vec!["frobnicate"],
        ] {
            let mut full = vec!["--credentials", creds.as_str()];
            full.extend(args.iter().copied());
            let (code, out, err) = invoke(&full, env("")).await;
            assert_eq!(code, EXIT_INPUT, "{args:?}: {err}");
            assert!(out.is_empty());
            assert!(!err.is_empty());
        }
    }

    #[tokio::test]
    async fn help_goes_to_stdout_with_success() {
        let (code, out, _) = invoke(&["--help"], env("")).await;
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("login"));
    }

    #[tokio::test]
    async fn missing_or_expired_session_exits_1_without_network() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let p = path.display().to_string();
        let (code, _, err) = invoke(&["--credentials", &p, "homes", "list"], env("")).await;
        assert_eq!(code, EXIT_REJECTED);
        assert!(err.contains("rca login"), "{err}");

        // The gateway URL is unroutable; an expired session must not try it.
        let stale = Credentials { gateway: "http://127.0.0.1:1".into(), username: "mia".into(), token: "x".into(), expires_at: 1 };
        credentials::save(&path, &stale).unwrap();
        let (code, _, err) = invoke(&["--credentials", &p, "homes", "list"], env("")).await;
        assert_eq!(code, EXIT_REJECTED);
        assert!(err.contains("expired") && err.contains("rca login mia"), "{err}");
    }

    #[tokio::test]
    async fn unreachable_gateway_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json").display().to_string();
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let gw = format!("http://127.0.0.1:{port}");
        let (code, _, err) = invoke(&["--credentials", &p, "--gateway", &gw, "login", "mia"], env("pw\n")).await;
        assert_eq!(code, EXIT_UNAVAILABLE, "{err}");
        assert!(err.contains("cannot reach gateway"), "{err}");
    }

    #[test]
    fn password_precedence() {
        let no_flag = PasswordArg { password_stdin: false };
        let flag = PasswordArg { password_stdin: true };
        let mut e = env("from-stdin\n");
        e.password = Some("from-env".into());
        assert_eq!(e.read_password(&no_flag, "").unwrap(), "from-env");
        assert_eq!(e.read_password(&flag, "").unwrap(), "from-stdin");
        assert!(matches!(e.read_password(&flag, ""), Err(CliError::Input(_))));
    }

    #[test]
    fn times_accept_epoch_ms_and_rfc3339() {
        assert_eq!(parse_time("1500"), Ok(1500));
        assert_eq!(parse_time("1970-01-01T00:00:01.500Z"), Ok(1500));
        assert!(parse_time("1969-12-31T00:00:00Z").is_err());
        assert!(parse_time("soon").is_err());
    }

    #[test]
    fn exit_codes_follow_status_class() {
        let http = |s: u16| CliError::Http { status: StatusCode::from_u16(s).unwrap(), code: "x".into(), message: String::new() };
        assert_eq!(http(403).exit_code(), EXIT_REJECTED);
        assert_eq!(http(404).exit_code(), EXIT_REJECTED);
        assert_eq!(http(502).exit_code(), EXIT_UNAVAILABLE);
        assert_eq!(http(503).exit_code(), EXIT_UNAVAILABLE);
    }
}
