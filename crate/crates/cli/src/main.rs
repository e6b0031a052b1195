//! `hpcwaas` — command-line client for the platform's HTTP API, plus the
//! server launcher. Exit codes: 0 success, 1 API/runtime error, 2 usage
//! error (via clap).

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "hpcwaas", about = "HPC workflow-as-a-service client", version)]
struct Cli {
    /// API base URL.
    #[arg(long, global = true, env = "HPCWAAS_API", default_value = "http://127.0.0.1:8080")]
    api: String,
    /// Access token id for invocations.
    #[arg(long, global = true, env = "HPCWAAS_TOKEN")]
    token: Option<String>,
    /// Output format.
    #[arg(long, global = true, value_parser = ["text", "json"], default_value = "text")]
    output: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Credential and token management (delegates to the secrets vault).
    Creds {
        #[command(subcommand)]
        cmd: CredsCmd,
    },
    /// Artifact catalogs: workflow, software, dataset, model.
    Catalog {
        #[command(subcommand)]
        cmd: CatalogCmd,
    },
    /// Workflow registration (catalog put + endpoint creation).
    Workflow {
        #[command(subcommand)]
        cmd: WorkflowCmd,
    },
    /// Invoke an endpoint.
    Invoke {
        endpoint: String,
        /// Input slot as key=value (value parsed as JSON when possible).
        #[arg(long = "input", value_name = "K=V")]
        inputs: Vec<String>,
        /// Poll status until terminal; exit 0 iff SUCCEEDED.
        #[arg(long)]
        watch: bool,
        /// Watch poll interval in milliseconds.
        #[arg(long, default_value_t = 200)]
        interval_ms: u64,
    },
    /// Show invocation status and history.
    Status { invocation: String },
    /// Request cancellation of an invocation.
    Cancel { invocation: String },
    /// Fetch results of a succeeded invocation.
    Results { invocation: String },
    /// Simulator clock and trace.
    Sim {
        #[command(subcommand)]
        cmd: SimCmd,
    },
    /// Profiling advisor reports.
    Advisor {
        #[command(subcommand)]
        cmd: AdvisorCmd,
    },
    /// Bundled end-to-end fixtures.
    Exemplar {
        #[command(subcommand)]
        cmd: ExemplarCmd,
    },
    /// Run the HTTP API server.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum CredsCmd {
    /// Store a credential for a user at a site.
    Register {
        #[arg(long)]
        user: String,
        #[arg(long)]
        site: String,
        #[arg(long, default_value = "password")]
        kind: String,
        /// Secret material (sent to the vault, never printed).
        #[arg(long, env = "HPCWAAS_MATERIAL")]
        material: String,
    },
    /// Generate a keypair; prints the public part.
    Keygen {
        #[arg(long)]
        user: String,
        #[arg(long)]
        site: String,
    },
    /// Mint a scoped access token.
    Token {
        #[arg(long)]
        user: String,
        /// Comma-separated site scope.
        #[arg(long, value_delimiter = ',')]
        scope: Vec<String>,
        #[arg(long, default_value_t = 3600)]
        ttl_s: u64,
    },
}

#[derive(Subcommand)]
enum CatalogCmd {
    /// Publish a payload file (JSON or YAML) under a name.
    Put { kind: String, name: String, file: String },
    /// Fetch an entry by "name[@version]" or digest reference.
    Get { kind: String, reference: String },
    /// List names in a catalog.
    List { kind: String },
}

#[derive(Subcommand)]
enum WorkflowCmd {
    /// Validate a descriptor file, publish it, and create an endpoint.
    Register { file: String },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Advance the virtual clock by whole seconds.
    Advance { seconds: u64 },
    /// Print the event trace and its hash.
    Trace,
}

#[derive(Subcommand)]
enum AdvisorCmd {
    /// Per-task profile summary for a workflow.
    Report { workflow: String },
}

#[derive(Subcommand)]
enum ExemplarCmd {
    /// Run one of the bundled fixtures server-side.
    Run {
        #[arg(value_parser = ["rom", "esm", "uc"])]
        name: String,
        /// Fixture parameter as key=value.
        #[arg(long = "param", value_name = "K=V")]
        params: Vec<String>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Data directory for catalogs, vault, advisor, stores, and logs.
    #[arg(long, default_value = "hpcwaas-data")]
    root: String,
    /// Federation config JSON (sites, links, seed); default two-site setup.
    #[arg(long)]
    config: Option<String>,
}

// ---------------------------------------------------------------------------
// HTTP helpers

struct Client {
    agent: ureq::Agent,
    base: String,
    json_output: bool,
}

impl Client {
    fn new(cli: &Cli) -> Client {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Client { agent, base: cli.api.trim_end_matches('/').to_string(), json_output: cli.output == "json" }
    }

    fn get(&self, path: &str) -> anyhow::Result<Value> {
        let mut res = self.agent.get(format!("{}{}", self.base, path)).call()?;
        Self::unwrap(res.status().as_u16(), res.body_mut().read_json().unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: Value) -> anyhow::Result<Value> {
        let mut res = self.agent.post(format!("{}{}", self.base, path)).send_json(&body)?;
        Self::unwrap(res.status().as_u16(), res.body_mut().read_json().unwrap_or(Value::Null))
    }

    fn unwrap(status: u16, body: Value) -> anyhow::Result<Value> {
        if status >= 400 {
            anyhow::bail!(
                "{} {}: {}",
                status,
                body["code"].as_str().unwrap_or("ERROR"),
                body["message"].as_str().unwrap_or("request failed")
            );
        }
        Ok(body)
    }

    /// Prints `v` as JSON in json mode, else via the formatter.
    fn emit(&self, v: &Value, text: impl FnOnce(&Value) -> String) {
        if self.json_output {
            out(&serde_json::to_string_pretty(v).expect("encodes"));
        } else {
            out(text(v).trim_end());
        }
    }
}

/// Prints a line, ignoring a closed pipe (e.g. output piped into `head`).
fn out(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

/// key=value pairs -> JSON object; values parse as JSON when they can.
fn kv_object(pairs: &[String]) -> anyhow::Result<BTreeMap<String, Value>> {
    let mut out = BTreeMap::new();
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("expected key=value, got '{p}'"))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        out.insert(k.to_string(), value);
    }
    Ok(out)
}

fn require_token(token: &Option<String>) -> anyhow::Result<String> {
    token
        .clone()
        .ok_or_else(|| anyhow::anyhow!("no token: pass --token or set HPCWAAS_TOKEN"))
}

fn load_payload(file: &str) -> anyhow::Result<Value> {
    let raw = std::fs::read_to_string(file)?;
    if file.ends_with(".yaml") || file.ends_with(".yml") {
        Ok(serde_yaml_to_json(&raw)?)
    } else {
        Ok(serde_json::from_str(&raw)?)
    }
}

fn serde_yaml_to_json(raw: &str) -> anyhow::Result<Value> {
    let v: serde_json::Value = serde_json::to_value(serde_yaml::from_str::<serde_yaml::Value>(raw)?)?;
    Ok(v)
}

// ---------------------------------------------------------------------------
// Commands

fn run(cli: Cli) -> anyhow::Result<i32> {
    let client = Client::new(&cli);
    match &cli.command {
        Command::Creds { cmd } => creds(&client, cmd)?,
        Command::Catalog { cmd } => catalog(&client, cmd)?,
        Command::Workflow { cmd } => workflow(&client, cmd)?,
        Command::Invoke { endpoint, inputs, watch, interval_ms } => {
            return invoke(&client, &cli.token, endpoint, inputs, *watch, *interval_ms);
        }
        Command::Status { invocation } => {
            let st = client.get(&format!("/api/v1/invocations/{invocation}"))?;
            client.emit(&st, format_status);
        }
        Command::Cancel { invocation } => {
            let v = client.post(&format!("/api/v1/invocations/{invocation}/cancel"), json!({}))?;
            client.emit(&v, |_| format!("cancellation requested for {invocation}"));
        }
        Command::Results { invocation } => {
            let v = client.get(&format!("/api/v1/invocations/{invocation}/results"))?;
            client.emit(&v, format_results);
        }
        Command::Sim { cmd } => match cmd {
            SimCmd::Advance { seconds } => {
                let v = client.post("/api/v1/sim/advance", json!({"seconds": seconds}))?;
                client.emit(&v, |v| format!("virtual clock at {} ms", v["now_ms"]));
            }
            SimCmd::Trace => {
                let v = client.get("/api/v1/sim/trace")?;
                client.emit(&v, |v| {
                    let mut out = format!("trace hash: {}\n", v["trace_hash"].as_str().unwrap_or("?"));
                    for e in v["events"].as_array().map(|a| a.as_slice()).unwrap_or(&[]) {
                        out.push_str(&format!("{:>10} {:<18} {}\n", e["t_ms"], e["kind"].as_str().unwrap_or("?"), e["detail"]));
                    }
                    out
                });
            }
        },
        Command::Advisor { cmd } => match cmd {
            AdvisorCmd::Report { workflow } => {
                let v = client.get(&format!("/api/v1/advisor/report/{workflow}"))?;
                client.emit(&v, |v| {
                    let mut out = format!("workflow {}: {} profile records\n", workflow, v["records"]);
                    for t in v["tasks"].as_array().map(|a| a.as_slice()).unwrap_or(&[]) {
                        out.push_str(&format!(
                            "  {}: {} records, mean {:.1}s, {} node-seconds\n",
                            t["task"].as_str().unwrap_or("?"),
                            t["records"],
                            t["mean_duration_s"].as_f64().unwrap_or(0.0),
                            t["total_node_seconds"]
                        ));
                    }
                    out
                });
            }
        },
        Command::Exemplar { cmd } => match cmd {
            ExemplarCmd::Run { name, params } => {
                let body = Value::Object(kv_object(params)?.into_iter().collect());
                let v = client.post(&format!("/api/v1/exemplars/{name}"), body)?;
                if client.json_output {
                    out(&serde_json::to_string_pretty(&v["report"]).expect("encodes"));
                } else {
                    out(v["text"].as_str().unwrap_or("").trim_end());
                }
            }
        },
        Command::Serve(args) => return serve(args),
    }
    Ok(0)
}

fn creds(client: &Client, cmd: &CredsCmd) -> anyhow::Result<()> {
    match cmd {
        CredsCmd::Register { user, site, kind, material } => {
            let v = client.post(
                "/api/v1/credentials",
                json!({"user": user, "site": site, "kind": kind, "material": material}),
            )?;
            client.emit(&v, |v| format!("stored credential {}", v["credential_id"].as_str().unwrap_or("?")));
        }
        CredsCmd::Keygen { user, site } => {
            let v = client.post("/api/v1/credentials/keypair", json!({"user": user, "site": site}))?;
            client.emit(&v, |v| {
                format!(
                    "credential {}\npublic key: {}",
                    v["credential_id"].as_str().unwrap_or("?"),
                    v["public_key"].as_str().unwrap_or("?")
                )
            });
        }
        CredsCmd::Token { user, scope, ttl_s } => {
            let v = client.post(
                "/api/v1/credentials/token",
                json!({"user": user, "scope": scope, "ttl_s": ttl_s}),
            )?;
            client.emit(&v, |v| {
                let scope: Vec<&str> =
                    v["scope"].as_array().map(|a| a.iter().filter_map(Value::as_str).collect()).unwrap_or_default();
                format!(
                    "token {} (scope {}, expires_at {})",
                    v["token_id"].as_str().unwrap_or("?"),
                    scope.join(","),
                    v["expires_at"]
                )
            });
        }
    }
    Ok(())
}

fn catalog(client: &Client, cmd: &CatalogCmd) -> anyhow::Result<()> {
    match cmd {
        CatalogCmd::Put { kind, name, file } => {
            let payload = load_payload(file)?;
            let v = client.post(&format!("/api/v1/catalog/{kind}/{name}"), payload)?;
            client.emit(&v, |v| format!("{}", v["reference"].as_str().unwrap_or("?")));
        }
        CatalogCmd::Get { kind, reference } => {
            let v = client.get(&format!("/api/v1/catalog/{kind}/{reference}"))?;
            client.emit(&v, |v| {
                format!(
                    "{}@{} ({}) digest {}",
                    v["name"].as_str().unwrap_or("?"),
                    v["version"],
                    v["kind"].as_str().unwrap_or("?"),
                    v["digest"].as_str().unwrap_or("?")
                )
            });
        }
        CatalogCmd::List { kind } => {
            let v = client.get(&format!("/api/v1/catalog/{kind}"))?;
            client.emit(&v, |v| {
                v.as_array()
                    .map(|a| a.iter().filter_map(Value::as_str).collect::<Vec<_>>().join("\n"))
                    .unwrap_or_default()
            });
        }
    }
    Ok(())
}

fn workflow(client: &Client, cmd: &WorkflowCmd) -> anyhow::Result<()> {
    let WorkflowCmd::Register { file } = cmd;
    let raw = std::fs::read_to_string(file)?;
    // Validate locally so malformed descriptors fail with a parse error
    // instead of an opaque server rejection.
    let desc = hpcwaas_core::topology::parse_descriptor(&raw)
        .map_err(|e| anyhow::anyhow!("invalid descriptor {file}: {e}"))?;
    let payload = serde_json::to_value(&desc)?;
    let put = client.post(&format!("/api/v1/catalog/workflow/{}", desc.name), payload)?;
    let reference = put["reference"].as_str().unwrap_or_default().to_string();
    let ep = client.post("/api/v1/endpoints", json!({"workflow_ref": reference}))?;
    let combined = json!({
        "reference": reference,
        "endpoint_id": ep["endpoint_id"],
        "digest": put["digest"],
    });
    client.emit(&combined, |v| {
        format!("{}\nendpoint {}", v["reference"].as_str().unwrap_or("?"), v["endpoint_id"].as_str().unwrap_or("?"))
    });
    Ok(())
}

fn format_status(v: &Value) -> String {
    let mut out = format!(
        "{} [{}] workflow {}\n",
        v["invocation_id"].as_str().unwrap_or("?"),
        v["state"].as_str().unwrap_or("?"),
        v["workflow_ref"].as_str().unwrap_or("?")
    );
    for h in v["history"].as_array().map(|a| a.as_slice()).unwrap_or(&[]) {
        out.push_str(&format!(
            "  {:>10} ms  {:<12} {}\n",
            h["at"],
            h["state"].as_str().unwrap_or("?"),
            h["detail"].as_str().unwrap_or("")
        ));
    }
    if let Some(err) = v["error"].as_str() {
        out.push_str(&format!("  error: {err}\n"));
    }
    out
}

fn format_results(v: &Value) -> String {
    let mut out = format!("results for {}\n", v["invocation_id"].as_str().unwrap_or("?"));
    if let Some(obj) = v["outputs"].as_object() {
        for (k, val) in obj {
            out.push_str(&format!("  {k} = {val}\n"));
        }
    }
    if let Some(obj) = v["result_refs"].as_object() {
        for (k, r) in obj {
            out.push_str(&format!("  {k} -> {}\n", r.as_str().unwrap_or("?")));
        }
    }
    out
}

fn invoke(
    client: &Client,
    token: &Option<String>,
    endpoint: &str,
    inputs: &[String],
    watch: bool,
    interval_ms: u64,
) -> anyhow::Result<i32> {
    let token = require_token(token)?;
    let inputs = kv_object(inputs)?;
    let v = client.post(
        &format!("/api/v1/endpoints/{endpoint}/invoke"),
        json!({"inputs": inputs, "token": token}),
    )?;
    let id = v["invocation_id"].as_str().unwrap_or_default().to_string();
    if !watch {
        client.emit(&v, |v| format!("{}", v["invocation_id"].as_str().unwrap_or("?")));
        return Ok(0);
    }
    let mut last = String::new();
    loop {
        let st = client.get(&format!("/api/v1/invocations/{id}"))?;
        let state = st["state"].as_str().unwrap_or("?").to_string();
        if state != last {
            if client.json_output {
                out(&json!({"invocation_id": id, "state": state}).to_string());
            } else {
                out(&format!("{id} {state}"));
            }
            last = state.clone();
        }
        if ["SUCCEEDED", "FAILED", "CANCELLED"].contains(&state.as_str()) {
            return Ok(if state == "SUCCEEDED" { 0 } else { 1 });
        }
        std::thread::sleep(std::time::Duration::from_millis(interval_ms));
    }
}

fn serve(args: &ServeArgs) -> anyhow::Result<i32> {
    use hpcwaas_core::advisor::Advisor;
    use hpcwaas_core::api::ApiServer;
    use hpcwaas_core::catalog::CatalogStore;
    use hpcwaas_core::datastore::ObjectStore;
    use hpcwaas_core::platform::Platform;
    use hpcwaas_core::sim::FederationConfig;
    use hpcwaas_core::vault::Vault;
    use hpcwaas_core::world::{World, WorldHandle};

    let config = match &args.config {
        Some(path) => serde_json::from_str::<FederationConfig>(&std::fs::read_to_string(path)?)?,
        None => FederationConfig::default_two_site(),
    };
    let root = std::path::PathBuf::from(&args.root);
    std::fs::create_dir_all(&root)?;
    let store = Arc::new(ObjectStore::open(&root)?);
    let sites: Vec<String> = config.sites.iter().map(|s| s.name.clone()).collect();
    let vault = Arc::new(Vault::open(&root, &Vault::master_key_from_env(), sites)?);
    let catalogs = Arc::new(CatalogStore::open(&root)?);
    let advisor = Arc::new(Advisor::open(&root)?);
    let world = WorldHandle::new(World::new(&config, &root, store.clone()));
    // Seed a small sample input under every site store so the bundled
    // fixture workflows (which acquire from `<site>-store` `seed/`) can be
    // invoked against a freshly started server.
    for site in &config.sites {
        let seed = root.join("sites").join(&site.name).join("seed");
        std::fs::create_dir_all(&seed)?;
        let sample = seed.join("sample.dat");
        if !sample.exists() {
            std::fs::write(sample, b"sample input payload\n")?;
        }
    }
    let platform = Platform::new(world, vault, catalogs, store, advisor, &root);
    let server = ApiServer::bind(platform, &args.addr)?;
    println!("listening on {}", server.base_url());
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
