// SPDX-License-Identifier: Apache-2.0

//! Benchmark runs against a freshly launched cluster.

use std::sync::Arc;

use barbie_client::bench::{run_bench, BenchError, BenchPlan, BenchReport, BenchUser, Sample, Workload};
use barbie_client::{ClientMode, ClientProfile, HyperTransport};
use barbie_server::deploy::Deployment;

use crate::launch::{launch_cluster, ClusterSpec, LaunchError};

#[derive(Debug, Clone, Copy)]
pub struct LoadShape {
    pub users: usize,
    pub concurrency: usize,
    pub requests_per_user: usize,
    pub workload: Workload,
    pub payload_len: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ClusterBenchError {
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

/// Gives every user its own project (and client enclave) so MA users do
/// not collide on one project's policy. Call before launching.
pub fn bench_users(deployment: &mut Deployment, users: usize) -> Vec<BenchUser> {
    (0..users)
        .map(|i| {
            let project = format!("bench-{i}");
            BenchUser {
                token: deployment.token_for(&project),
                project_id: project,
                enclave: Some(deployment.client_enclave(format!("bench-client-{i}").as_bytes(), b"bench", 1)),
            }
        })
        .collect()
}

pub fn plan(deployment: &Deployment, url: String, users: Vec<BenchUser>, shape: &LoadShape) -> BenchPlan {
    let mode = match shape.workload {
        Workload::V1Store => ClientMode::Legacy,
        Workload::V2RaStore => ClientMode::Aware,
        Workload::V2MaRoundtrip => ClientMode::Enabled,
    };
    BenchPlan {
        server_url: url.clone(),
        workload: shape.workload,
        users,
        concurrency: shape.concurrency,
        requests_per_user: shape.requests_per_user,
        payload_len: shape.payload_len,
        template: ClientProfile::new(mode, url, "").authority(deployment.platform().authority_key()),
    }
}

/// Launches `spec` on `deployment`, runs `shape` through the balancer and tears down.
pub async fn bench_cluster(
    mut deployment: Deployment,
    spec: &ClusterSpec,
    shape: &LoadShape,
) -> Result<(BenchReport, Vec<Sample>), ClusterBenchError> {
    let users = bench_users(&mut deployment, shape.users);
    let cluster = launch_cluster(deployment, spec).await?;
    let plan = plan(&cluster.deployment, cluster.lb_url(), users, shape);
    let result = run_bench(&plan, Arc::new(HyperTransport::default())).await;
    cluster.shutdown().await;
    Ok(result?)
}
