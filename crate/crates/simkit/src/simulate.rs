use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::sync::Barrier;

use parley_core::{ParticipantId, ParticipantKind, SessionId};

use crate::admin::AdminClient;
use crate::client::{run_script, RunOptions, Target};
use crate::error::SimError;
use crate::scenario::Scenario;
use crate::transcript::Transcript;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedParticipant {
    pub name: String,
    pub participant_id: ParticipantId,
    pub kind: ParticipantKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub session_id: SessionId,
    pub seed: u64,
    pub participants: Vec<SimulatedParticipant>,
    /// In scenario order.
    pub transcripts: Vec<Transcript>,
    pub elapsed_ms: f64,
}

impl SimulationReport {
    pub fn transcript(&self, name: &str) -> &Transcript {
        self.transcripts
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no transcript for {name}"))
    }
}

/// Jitter seed of the `index`-th script, so scripts do not share a stream.
pub fn script_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Creates the scenario's session through `admin` and runs every script
/// against it concurrently. `seed` overrides the scenario's own.
pub async fn simulate(admin: &AdminClient, scenario: &Scenario, seed: Option<u64>) -> Result<SimulationReport, SimError> {
    scenario.validate()?;
    let created = admin.create_session(&scenario.create_request()).await?;
    if created.participants.len() != scenario.participants.len() {
        return Err(SimError::Server {
            code: "BAD_RESPONSE".into(),
            detail: "token count differs from roster".into(),
        });
    }
    let seed = seed.unwrap_or(scenario.seed);
    let ws_url = admin.ws_url();
    let barrier = Arc::new(Barrier::new(scenario.participants.len()));
    let epoch = Instant::now() + Duration::from_millis(50);
    let tasks: Vec<_> = scenario
        .participants
        .iter()
        .zip(&created.participants)
        .enumerate()
        .map(|(i, (script, issued))| {
            let target = Target {
                ws_url: ws_url.clone(),
                session_id: created.session_id.clone(),
                token: issued.token.clone(),
            };
            let opts = RunOptions {
                epoch,
                seed: script_seed(seed, i),
                settle: Duration::from_millis(scenario.settle_ms),
                connect_timeout: Duration::from_secs(10),
            };
            let script = script.clone();
            let barrier = barrier.clone();
            tokio::spawn(async move { run_script(&target, &script, &opts, Some(barrier)).await })
        })
        .collect();

    let mut transcripts = Vec::with_capacity(tasks.len());
    let mut first_error = None;
    for task in tasks {
        match task.await {
            Ok(Ok(t)) => transcripts.push(t),
            Ok(Err(e)) => {
                first_error.get_or_insert(e);
            }
            Err(join) => {
                first_error.get_or_insert(SimError::Server {
                    code: "CLIENT_PANIC".into(),
                    detail: join.to_string(),
                });
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(SimulationReport {
        session_id: created.session_id,
        seed,
        participants: scenario
            .participants
            .iter()
            .zip(created.participants)
            .map(|(s, p)| SimulatedParticipant {
                name: s.name.clone(),
                participant_id: p.participant_id,
                kind: p.kind,
            })
            .collect(),
        transcripts,
        elapsed_ms: epoch.elapsed().as_secs_f64() * 1000.0,
    })
}
