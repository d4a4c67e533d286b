use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::Result;
use crate::train::{Batch, ClientNode, RoundOutcome, ServerNode, TrainStepRecord};
use crate::wire::{GradMsg, HiddenStateMsg};

/// One server forward over all clients' hidden states, split back per client
/// in client-id order.
pub fn client_batch_step(server: &mut ServerNode, msgs: &[HiddenStateMsg]) -> Result<Vec<HiddenStateMsg>> {
    server.client_batch_forward(msgs)
}

/// Backward of the pending client batch with one summed adapter update.
pub fn client_batch_backward(server: &mut ServerNode, grads: &[GradMsg]) -> Result<Vec<GradMsg>> {
    server.client_batch_backward(grads)
}

/// Every client trains concurrently against a server running in client-batch
/// mode. `data` must give all clients the same sequence length per step.
pub fn run_client_batch(
    clients: &mut [ClientNode],
    steps: usize,
    data: &(dyn Fn(usize, usize) -> Batch + Sync),
    stop: Option<&AtomicBool>,
) -> RoundOutcome {
    let results: Vec<(Vec<TrainStepRecord>, Option<crate::Error>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .iter_mut()
            .enumerate()
            .map(|(i, client)| {
                scope.spawn(move || {
                    let mut records = Vec::with_capacity(steps);
                    for step in 0..steps {
                        if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
                            break;
                        }
                        match client.train_step(&data(i, step)) {
                            Ok(r) => records.push(r),
                            Err(e) => return (records, Some(e)),
                        }
                    }
                    (records, None)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    });
    let mut records = Vec::new();
    let mut error = None;
    for (r, e) in results {
        records.extend(r);
        if error.is_none() {
            error = e;
        }
    }
    records.sort_by_key(|r| (r.step, r.client_id));
    RoundOutcome { records, error }
}
