//! Blocking HTTP client for an external decision service.

use std::time::Duration;

use triage_core::policy::{DecisionService, ExternalError, ExternalRequest, ExternalResponse};
use ureq::Agent;

/// POSTs each [`ExternalRequest`] as JSON to `url` and expects an
/// [`ExternalResponse`] body.
pub struct HttpDecisionService {
    url: String,
    agent: Agent,
}

impl HttpDecisionService {
    pub fn new(url: impl Into<String>) -> Self {
        HttpDecisionService { url: url.into(), agent: Agent::new_with_defaults() }
    }
}

fn classify(e: ureq::Error) -> ExternalError {
    match e {
        ureq::Error::Timeout(_) => ExternalError::Timeout,
        ureq::Error::Json(e) => ExternalError::MalformedResponse(e.to_string()),
        ureq::Error::StatusCode(code) => ExternalError::ServiceUnavailable(format!("HTTP {code}")),
        other => ExternalError::ServiceUnavailable(other.to_string()),
    }
}

impl DecisionService for HttpDecisionService {
    fn decide(
        &self,
        request: &ExternalRequest,
        deadline: Duration,
    ) -> Result<ExternalResponse, ExternalError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .config()
            .timeout_global(Some(deadline))
            .build()
            .send_json(request)
            .map_err(classify)?;
        resp.body_mut().read_json::<ExternalResponse>().map_err(classify)
    }
}
