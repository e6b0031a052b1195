//! In-process secrets vault: credential storage, key-pair generation,
//! scoped access tokens, and a hash-chained audit log. The file backend is
//! encrypted with a master key taken from the environment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::value::digest_bytes;

pub const MASTER_KEY_ENV: &str = "HPCWAAS_VAULT_KEY";

/// Default token time-to-live: 24 hours.
pub const DEFAULT_TTL_S: u64 = 24 * 3600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CredentialKind {
    Password,
    Keypair,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct CredentialRecord {
    pub credential_id: String,
    pub user: String,
    pub site: String,
    pub kind: CredentialKind,
    /// Secret material; must never appear in logs or API responses.
    pub material: Vec<u8>,
    pub public_part: Option<String>,
    pub stored_at: u64,
}

// Redact the secret from any debug formatting.
impl fmt::Debug for CredentialRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CredentialRecord")
            .field("credential_id", &self.credential_id)
            .field("user", &self.user)
            .field("site", &self.site)
            .field("kind", &self.kind)
            .field("material", &"<redacted>")
            .field("public_part", &self.public_part)
            .finish()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccessToken {
    pub token_id: String,
    pub user: String,
    pub scope: BTreeSet<String>,
    pub expires_at: u64,
    pub revoked: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditEntry {
    pub index: u64,
    pub time: u64,
    pub token_id: String,
    pub site: String,
    pub component: String,
    pub prev_hash: String,
    pub hash: String,
}

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("unknown site '{0}'")]
    UnknownSite(String),
    #[error("missing credential for site '{0}'")]
    MissingCredential(String),
    #[error("token expired")]
    Expired,
    #[error("token revoked")]
    Revoked,
    #[error("site '{0}' out of token scope")]
    OutOfScope(String),
    #[error("unknown token")]
    UnknownToken,
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("vault file corrupt or wrong master key")]
    BadMasterKey,
}

#[derive(Default, Serialize, Deserialize)]
struct VaultState {
    credentials: Vec<CredentialRecord>,
    tokens: BTreeMap<String, AccessToken>,
    next_credential: u64,
}

pub struct Vault {
    sites: BTreeSet<String>,
    master_key: Vec<u8>,
    root: Option<PathBuf>,
    state: Mutex<VaultState>,
    audit: Mutex<Vec<AuditEntry>>,
}

fn wall_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// SHA-256 counter-mode keystream XOR; symmetric.
fn keystream_xor(key: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len());
    let mut counter: u64 = 0;
    while out.len() < data.len() {
        let mut h = Sha256::new();
        h.update(key);
        h.update(counter.to_be_bytes());
        let block = h.finalize();
        for b in block {
            if out.len() >= data.len() {
                break;
            }
            out.push(data[out.len()] ^ b);
        }
        counter += 1;
    }
    out
}

const VAULT_MAGIC: &[u8] = b"HPCWAAS-VAULT-1\n";

impl Vault {
    /// In-memory vault (tests). `sites` are the federation's site names.
    pub fn in_memory(sites: impl IntoIterator<Item = String>) -> Self {
        Vault {
            sites: sites.into_iter().collect(),
            master_key: b"in-memory".to_vec(),
            root: None,
            state: Mutex::new(VaultState::default()),
            audit: Mutex::new(Vec::new()),
        }
    }

    /// File-backed vault under `<root>/vault/`, encrypted with `master_key`.
    pub fn open(root: impl Into<PathBuf>, master_key: &[u8], sites: impl IntoIterator<Item = String>) -> Result<Self, VaultError> {
        let root: PathBuf = root.into();
        let dir = root.join("vault");
        std::fs::create_dir_all(&dir)?;
        let store = dir.join("store.enc");
        let state = if store.exists() {
            let cipher = std::fs::read(&store)?;
            let plain = keystream_xor(master_key, &cipher);
            if !plain.starts_with(VAULT_MAGIC) {
                return Err(VaultError::BadMasterKey);
            }
            serde_json::from_slice(&plain[VAULT_MAGIC.len()..]).map_err(|_| VaultError::BadMasterKey)?
        } else {
            VaultState::default()
        };
        let audit_path = dir.join("audit.log");
        let audit = if audit_path.exists() {
            std::fs::read_to_string(&audit_path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|_| VaultError::BadMasterKey))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        Ok(Vault {
            sites: sites.into_iter().collect(),
            master_key: master_key.to_vec(),
            root: Some(root),
            state: Mutex::new(state),
            audit: Mutex::new(audit),
        })
    }

    /// Reads the master key from `HPCWAAS_VAULT_KEY` (default dev key if unset).
    pub fn master_key_from_env() -> Vec<u8> {
        std::env::var(MASTER_KEY_ENV).map(|s| s.into_bytes()).unwrap_or_else(|_| b"dev-master-key".to_vec())
    }

    fn persist(&self, state: &VaultState) -> Result<(), VaultError> {
        if let Some(root) = &self.root {
            let mut plain = VAULT_MAGIC.to_vec();
            plain.extend_from_slice(&serde_json::to_vec(state).expect("state encodes"));
            std::fs::write(root.join("vault/store.enc"), keystream_xor(&self.master_key, &plain))?;
        }
        Ok(())
    }

    fn check_site(&self, site: &str) -> Result<(), VaultError> {
        if self.sites.contains(site) {
            Ok(())
        } else {
            Err(VaultError::UnknownSite(site.to_string()))
        }
    }

    pub fn store_credential(&self, user: &str, site: &str, kind: CredentialKind, material: Vec<u8>) -> Result<String, VaultError> {
        self.check_site(site)?;
        let mut state = self.state.lock().unwrap();
        state.next_credential += 1;
        let id = format!("cred-{:04}", state.next_credential);
        let public_part = match kind {
            CredentialKind::Keypair => Some(format!("pub-{}", digest_bytes(&material))),
            CredentialKind::Password => None,
        };
        state.credentials.push(CredentialRecord {
            credential_id: id.clone(),
            user: user.to_string(),
            site: site.to_string(),
            kind,
            material,
            public_part,
            stored_at: wall_now(),
        });
        self.persist(&state)?;
        Ok(id)
    }

    /// Generates a key pair; only the public part leaves the vault. The
    /// caller is expected to authorize it on the target site's gateway.
    pub fn generate_keypair(&self, user: &str, site: &str) -> Result<(String, String), VaultError> {
        self.check_site(site)?;
        let mut private = vec![0u8; 32];
        rand::rng().fill_bytes(&mut private);
        let id = self.store_credential(user, site, CredentialKind::Keypair, private)?;
        let state = self.state.lock().unwrap();
        let public = state
            .credentials
            .iter()
            .find(|c| c.credential_id == id)
            .and_then(|c| c.public_part.clone())
            .expect("keypair has public part");
        Ok((id, public))
    }

    pub fn mint_token(&self, user: &str, scope: impl IntoIterator<Item = String>, ttl_s: u64) -> Result<AccessToken, VaultError> {
        let scope: BTreeSet<String> = scope.into_iter().collect();
        let mut state = self.state.lock().unwrap();
        for site in &scope {
            self.check_site(site)?;
            if !state.credentials.iter().any(|c| c.user == user && c.site == *site) {
                return Err(VaultError::MissingCredential(site.clone()));
            }
        }
        let mut raw = [0u8; 16];
        rand::rng().fill_bytes(&mut raw);
        let token = AccessToken {
            token_id: hex::encode(raw),
            user: user.to_string(),
            scope,
            expires_at: wall_now() + ttl_s,
            revoked: false,
        };
        state.tokens.insert(token.token_id.clone(), token.clone());
        self.persist(&state)?;
        Ok(token)
    }

    /// Resolves a token for one site to the most recent matching credential.
    /// Every successful resolve appends one audit entry.
    pub fn resolve(&self, token_id: &str, site: &str, component: &str) -> Result<CredentialRecord, VaultError> {
        let state = self.state.lock().unwrap();
        let token = state.tokens.get(token_id).ok_or(VaultError::UnknownToken)?;
        if token.revoked {
            return Err(VaultError::Revoked);
        }
        if wall_now() >= token.expires_at {
            return Err(VaultError::Expired);
        }
        if !token.scope.contains(site) {
            return Err(VaultError::OutOfScope(site.to_string()));
        }
        let cred = state
            .credentials
            .iter()
            .filter(|c| c.user == token.user && c.site == site)
            .last() // most recent credential wins
            .cloned()
            .ok_or_else(|| VaultError::MissingCredential(site.to_string()))?;
        drop(state);
        self.append_audit(token_id, site, component)?;
        Ok(cred)
    }

    /// Scope and liveness check without touching secret material or the audit log.
    pub fn check_token(&self, token_id: &str, sites: &[String]) -> Result<AccessToken, VaultError> {
        let state = self.state.lock().unwrap();
        let token = state.tokens.get(token_id).ok_or(VaultError::UnknownToken)?;
        if token.revoked {
            return Err(VaultError::Revoked);
        }
        if wall_now() >= token.expires_at {
            return Err(VaultError::Expired);
        }
        for s in sites {
            if !token.scope.contains(s) {
                return Err(VaultError::OutOfScope(s.clone()));
            }
        }
        Ok(token.clone())
    }

    /// Idempotent.
    pub fn revoke(&self, token_id: &str) -> Result<(), VaultError> {
        let mut state = self.state.lock().unwrap();
        if let Some(t) = state.tokens.get_mut(token_id) {
            t.revoked = true;
        }
        self.persist(&state)?;
        Ok(())
    }

    fn append_audit(&self, token_id: &str, site: &str, component: &str) -> Result<(), VaultError> {
        let mut audit = self.audit.lock().unwrap();
        let prev_hash = audit.last().map(|e| e.hash.clone()).unwrap_or_else(|| "genesis".to_string());
        let index = audit.len() as u64;
        let time = wall_now();
        let body = format!("{index}|{time}|{token_id}|{site}|{component}|{prev_hash}");
        let hash = digest_bytes(body.as_bytes());
        let entry = AuditEntry {
            index,
            time,
            token_id: token_id.to_string(),
            site: site.to_string(),
            component: component.to_string(),
            prev_hash,
            hash,
        };
        if let Some(root) = &self.root {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(root.join("vault/audit.log"))?;
            writeln!(f, "{}", serde_json::to_string(&entry).expect("entry encodes"))?;
        }
        audit.push(entry);
        Ok(())
    }

    pub fn audit_len(&self) -> usize {
        self.audit.lock().unwrap().len()
    }

    /// Recomputes the hash chain; true iff no entry was altered or dropped.
    pub fn verify_audit_chain(&self) -> bool {
        let audit = self.audit.lock().unwrap();
        let mut prev = "genesis".to_string();
        for (i, e) in audit.iter().enumerate() {
            if e.index != i as u64 || e.prev_hash != prev {
                return false;
            }
            let body = format!("{}|{}|{}|{}|{}|{}", e.index, e.time, e.token_id, e.site, e.component, e.prev_hash);
            if digest_bytes(body.as_bytes()) != e.hash {
                return false;
            }
            prev = e.hash.clone();
        }
        true
    }

    pub fn public_part(&self, credential_id: &str) -> Option<String> {
        self.state.lock().unwrap().credentials.iter().find(|c| c.credential_id == credential_id).and_then(|c| c.public_part.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vault() -> Vault {
        Vault::in_memory(["hpcA".to_string(), "hpcB".to_string()])
    }

    #[test]
    fn store_and_resolve_most_recent() {
        let v = vault();
        v.store_credential("u", "hpcA", CredentialKind::Password, b"first".to_vec()).unwrap();
        let second = v.store_credential("u", "hpcA", CredentialKind::Password, b"second".to_vec()).unwrap();
        let t = v.mint_token("u", ["hpcA".to_string()], 60).unwrap();
        let c = v.resolve(&t.token_id, "hpcA", "test").unwrap();
        assert_eq!(c.credential_id, second);
        assert_eq!(c.material, b"second");
    }

    #[test]
    fn unknown_site_rejected() {
        let v = vault();
        assert!(matches!(
            v.store_credential("u", "nowhere", CredentialKind::Password, b"x".to_vec()),
            Err(VaultError::UnknownSite(_))
        ));
    }

    #[test]
    fn keypair_private_never_in_response() {
        let v = vault();
        let (id, public) = v.generate_keypair("u", "hpcA").unwrap();
        assert!(!public.is_empty());
        assert!(public.starts_with("pub-"));
        assert_eq!(v.public_part(&id).unwrap(), public);
        // Debug formatting redacts the material.
        let t = v.mint_token("u", ["hpcA".to_string()], 60).unwrap();
        let c = v.resolve(&t.token_id, "hpcA", "test").unwrap();
        assert!(format!("{c:?}").contains("<redacted>"));
    }

    #[test]
    fn token_scope_expiry_and_revocation() {
        let v = vault();
        v.store_credential("u", "hpcA", CredentialKind::Password, b"s".to_vec()).unwrap();
        let t = v.mint_token("u", ["hpcA".to_string()], 60).unwrap();
        assert!(matches!(v.resolve(&t.token_id, "hpcB", "test"), Err(VaultError::OutOfScope(_))));

        // ttl = 0 is immediately expired.
        let t0 = v.mint_token("u", ["hpcA".to_string()], 0).unwrap();
        assert!(matches!(v.resolve(&t0.token_id, "hpcA", "test"), Err(VaultError::Expired)));

        v.revoke(&t.token_id).unwrap();
        v.revoke(&t.token_id).unwrap(); // idempotent
        assert!(matches!(v.resolve(&t.token_id, "hpcA", "test"), Err(VaultError::Revoked)));
        assert!(matches!(v.resolve("nope", "hpcA", "test"), Err(VaultError::UnknownToken)));
    }

    #[test]
    fn mint_requires_credentials_for_whole_scope() {
        let v = vault();
        v.store_credential("u", "hpcA", CredentialKind::Password, b"s".to_vec()).unwrap();
        let err = v.mint_token("u", ["hpcA".to_string(), "hpcB".to_string()], 60).unwrap_err();
        match err {
            VaultError::MissingCredential(site) => assert_eq!(site, "hpcB"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn audit_grows_by_one_per_resolve_and_chains() {
        let v = vault();
        v.store_credential("u", "hpcA", CredentialKind::Password, b"s".to_vec()).unwrap();
        let t = v.mint_token("u", ["hpcA".to_string()], 60).unwrap();
        assert_eq!(v.audit_len(), 0);
        v.resolve(&t.token_id, "hpcA", "orchestrator").unwrap();
        assert_eq!(v.audit_len(), 1);
        v.resolve(&t.token_id, "hpcA", "gateway").unwrap();
        assert_eq!(v.audit_len(), 2);
        assert!(v.verify_audit_chain());
    }

    #[test]
    fn file_backend_round_trip_and_wrong_key() {
        let dir = tempfile::tempdir().unwrap();
        let sites = ["hpcA".to_string()];
        {
            let v = Vault::open(dir.path(), b"key1", sites.clone()).unwrap();
            v.store_credential("u", "hpcA", CredentialKind::Password, b"topsecret".to_vec()).unwrap();
        }
        // Secret must not be readable from the encrypted file.
        let raw = std::fs::read(dir.path().join("vault/store.enc")).unwrap();
        assert!(!raw.windows(9).any(|w| w == b"topsecret"));

        let v = Vault::open(dir.path(), b"key1", sites.clone()).unwrap();
        let t = v.mint_token("u", ["hpcA".to_string()], 60).unwrap();
        assert_eq!(v.resolve(&t.token_id, "hpcA", "t").unwrap().material, b"topsecret");

        assert!(matches!(Vault::open(dir.path(), b"wrong", sites), Err(VaultError::BadMasterKey)));
    }
}
