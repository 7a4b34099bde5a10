use std::time::Duration;

use super::{BackendError, ChatBackend, ChatMessage, Completion, SamplingParams};

/// Retries `RateLimited` failures with exponential backoff.
///
/// The first call plus `max_retries` retries; the error of the last attempt
/// propagates. Other errors are returned immediately.
pub struct RetryingBackend<B> {
    inner: B,
    max_retries: u32,
    base_delay: Duration,
}

impl<B: ChatBackend> RetryingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }

    pub fn with_base_delay(mut self, delay: Duration) -> Self {
        self.base_delay = delay;
        self
    }

    pub fn with_max_retries(mut self, n: u32) -> Self {
        self.max_retries = n;
        self
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for RetryingBackend<B> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Completion, BackendError> {
        let mut attempt = 0;
        loop {
            match self.inner.complete(messages, params) {
                Err(BackendError::RateLimited { retry_after_ms }) if attempt < self.max_retries => {
                    let backoff = self.base_delay * 2u32.pow(attempt);
                    let hinted = Duration::from_millis(retry_after_ms.unwrap_or(0));
                    let wait = backoff.max(hinted.min(Duration::from_secs(60)));
                    log::warn!("rate limited, retrying in {wait:?} (attempt {})", attempt + 1);
                    if !self.base_delay.is_zero() {
                        std::thread::sleep(wait);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}
