//! Evaluation-only policy backed by an external HTTP endpoint.
//!
//! Request body:
//! `{"case_features":[..], "history":[..], "evidence":[[tool, result], ..],
//!   "retrieved":[{"t":[..], "r":".."}], "actions":[..]}`
//! Reply: `{"action": "<one of actions>"}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::environment::{result_token, Observation};
use crate::error::{Error, Result};
use crate::tooling::ActionSpace;

#[derive(Debug, Serialize)]
pub struct RetrievedSummary<'a> {
    pub t: &'a [String],
    pub r: &'a str,
}

#[derive(Debug, Serialize)]
pub struct PolicyRequest<'a> {
    pub case_features: &'a [f64],
    pub history: Vec<&'a str>,
    pub evidence: Vec<(&'a str, String)>,
    pub retrieved: Vec<RetrievedSummary<'a>>,
    pub actions: &'a [String],
}

#[derive(Debug, Deserialize)]
pub struct PolicyReply {
    pub action: String,
}

impl<'a> PolicyRequest<'a> {
    pub fn new(obs: &Observation<'a>, space: &'a ActionSpace, n_available: usize) -> Self {
        Self {
            case_features: &obs.case.features,
            history: obs.history.iter().map(|&a| space.action_id(a)).collect(),
            evidence: obs
                .evidence
                .iter()
                .map(|e| (space.atomic_id(e.tool), result_token(space, obs.case, e)))
                .collect(),
            retrieved: obs
                .retrieved
                .iter()
                .map(|m| RetrievedSummary { t: &m.t, r: &m.r })
                .collect(),
            actions: &space.ids()[..n_available],
        }
    }
}

/// Checks a reply against the offered actions and returns the action index.
pub fn validate_reply(reply: &PolicyReply, actions: &[String]) -> Result<usize> {
    actions
        .iter()
        .position(|a| *a == reply.action)
        .ok_or_else(|| Error::Protocol(format!("action `{}` not in the available set", reply.action)))
}

#[derive(Debug, Clone)]
pub struct HttpPolicy {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpPolicy {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn decide(&self, obs: &Observation<'_>, space: &ActionSpace, n_available: usize) -> Result<usize> {
        let req = PolicyRequest::new(obs, space, n_available);
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&req)
            .map_err(|e| Error::Protocol(format!("{}: {e}", self.endpoint)))?;
        let reply: PolicyReply = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Protocol(format!("malformed reply: {e}")))?;
        validate_reply(&reply, req.actions)
    }
}
