//! Bounded background pool for uploads.

use std::sync::Arc;

use blockrag_core::ingestion::{PipelineJob, SourceFormat};
use blockrag_core::Engine;
use tokio::sync::Semaphore;

use crate::error::{ApiError, ApiResult};

#[derive(Clone)]
pub struct IngestPool {
    permits: Arc<Semaphore>,
}

impl IngestPool {
    pub fn new(workers: usize) -> Self {
        Self { permits: Arc::new(Semaphore::new(workers.max(1))) }
    }

    /// Registers the job and queues it. The returned job is still `Uploaded`.
    pub fn submit(&self, engine: Arc<Engine>, source_name: &str, bytes: Vec<u8>, format: SourceFormat) -> PipelineJob {
        let job = engine.register_job(source_name);
        let job_id = job.job_id.clone();
        let permits = self.permits.clone();
        tokio::spawn(async move {
            let Ok(_permit) = permits.acquire_owned().await else { return };
            let id = job_id.clone();
            let outcome = tokio::task::spawn_blocking(move || engine.run_job(&id, &bytes, format)).await;
            match outcome {
                Ok(Ok(job)) => tracing::info!(job = %job.job_id, stage = ?job.stage, "ingest finished"),
                Ok(Err(error)) => tracing::error!(job = %job_id, %error, "ingest could not run"),
                Err(error) => tracing::error!(job = %job_id, %error, "ingest worker panicked"),
            }
        });
        job
    }

    /// Same as `submit`, but waits for the job to finish.
    pub async fn run(&self, engine: Arc<Engine>, source_name: &str, bytes: Vec<u8>, format: SourceFormat) -> ApiResult<PipelineJob> {
        let _permit = self.permits.clone().acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?;
        let job = engine.register_job(source_name);
        tokio::task::spawn_blocking(move || engine.run_job(&job.job_id, &bytes, format))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(ApiError::from)
    }
}
