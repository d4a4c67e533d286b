use std::sync::atomic::{AtomicBool, Ordering};

use serde::Serialize;

use super::config::StrategyConfig;
use crate::error::{Error, Result};
use crate::model::{fedavg_merge, SegmentModel};
use crate::tensor::Tensor;
use crate::train::{split_segments, Batch, ClientNode, Federation, FederationConfig, ServeMode, TrainStepRecord};
use crate::wire::CommSnapshot;

type Params = Vec<(String, Tensor)>;

/// One synchronization point.
#[derive(Clone, Debug, Serialize)]
pub struct MergeEvent {
    /// Steps completed by each participant when the merge ran.
    pub after_step: usize,
    pub participants: Vec<usize>,
    /// Sub-server adapters just before the merge, when capture is enabled.
    #[serde(skip)]
    pub before: Option<Vec<Params>>,
    #[serde(skip)]
    pub merged: Params,
}

pub struct HierarchyOutcome {
    pub records: Vec<TrainStepRecord>,
    pub merges: Vec<MergeEvent>,
    /// Branches dropped after an error, with the error text.
    pub failures: Vec<(usize, String)>,
}

/// `M` independent client/sub-server pipelines started from the same
/// central parameters and averaged every `sync_interval` steps.
pub struct Hierarchy {
    pub branches: Vec<Federation>,
    pub strategy: StrategyConfig,
    /// Keep pre-merge adapter snapshots in each [`MergeEvent`].
    pub capture_snapshots: bool,
    failed: Vec<Option<String>>,
}

impl Hierarchy {
    pub fn start(fed: &FederationConfig, strategy: StrategyConfig) -> Result<Self> {
        strategy.validate()?;
        let (a, b, c) = split_segments(&fed.model, fed.spec, fed.seed)?;
        let branches = (0..strategy.clients)
            .map(|i| {
                let cfg = FederationConfig {
                    clients: 1,
                    first_client_id: i as u64,
                    mode: ServeMode::PerRequest,
                    ..fed.clone()
                };
                Federation::start_with(&cfg, a.clone(), b.clone(), c.clone(), vec![None])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            failed: vec![None; branches.len()],
            branches,
            strategy,
            capture_snapshots: false,
        })
    }

    pub fn live(&self) -> Vec<usize> {
        (0..self.branches.len()).filter(|i| self.failed[*i].is_none()).collect()
    }

    pub fn comm(&self) -> CommSnapshot {
        CommSnapshot::sum(&self.branches.iter().map(|b| b.comm()).collect::<Vec<_>>())
    }

    /// Train every live branch for `steps`, merging after each full
    /// `sync_interval` and once more at the end if steps remain unmerged.
    pub fn run(
        &mut self,
        steps: usize,
        data: &(dyn Fn(usize, usize) -> Batch + Sync),
        stop: Option<&AtomicBool>,
        sink: &mut dyn FnMut(&TrainStepRecord),
    ) -> HierarchyOutcome {
        let mut records = Vec::new();
        let mut merges = Vec::new();
        let mut done = 0;
        while done < steps && !stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            let span = self.strategy.sync_interval.min(steps - done);
            let start = done;
            let failed = &self.failed;
            let results: Vec<(usize, Vec<TrainStepRecord>, Option<Error>)> = std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .branches
                    .iter_mut()
                    .enumerate()
                    .filter(|(i, _)| failed[*i].is_none())
                    .map(|(i, branch)| {
                        scope.spawn(move || {
                            let client = &mut branch.clients[0];
                            let mut out = Vec::with_capacity(span);
                            for step in start..start + span {
                                match client.train_step(&data(i, step)) {
                                    Ok(r) => out.push(r),
                                    Err(e) => return (i, out, Some(e)),
                                }
                            }
                            (i, out, None)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("branch thread panicked"))
                    .collect()
            });
            let mut round = Vec::new();
            for (i, r, e) in results {
                round.extend(r);
                if let Some(e) = e {
                    self.failed[i] = Some(e.to_string());
                }
            }
            round.sort_by_key(|r| (r.step, r.client_id));
            round.iter().for_each(&mut *sink);
            records.extend(round);
            done += span;
            if self.live().is_empty() {
                break;
            }
            match self.merge(done) {
                Ok(ev) => merges.push(ev),
                Err(e) => {
                    for i in self.live() {
                        self.failed[i] = Some(format!("merge failed: {e}"));
                    }
                    break;
                }
            }
        }
        let failures = self
            .failed
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.clone().map(|f| (i, f)))
            .collect();
        HierarchyOutcome {
            records,
            merges,
            failures,
        }
    }

    /// Average the live sub-servers' adapters (and the clients' when
    /// configured) and write the result back to every live branch.
    pub fn merge(&mut self, after_step: usize) -> Result<MergeEvent> {
        let live = self.live();
        let all_weights = self.strategy.weights();
        let weights: Vec<f64> = live.iter().map(|i| all_weights[*i]).collect();
        let mut guards = live
            .iter()
            .map(|i| {
                self.branches[*i]
                    .server
                    .lock()
                    .map_err(|_| Error::Protocol("sub-server state poisoned".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let before = self
            .capture_snapshots
            .then(|| guards.iter().map(|g| g.segment.lora_params()).collect());
        let merged = {
            let models: Vec<&SegmentModel> = guards.iter().map(|g| &g.segment).collect();
            fedavg_merge(&models, &weights)?
        };
        let merged_lora = merged.lora_params();
        for g in guards.iter_mut() {
            g.segment.set_params(merged_lora.iter().map(|(n, t)| (n, t)))?;
        }
        drop(guards);
        if self.strategy.merge_clients {
            for input_side in [true, false] {
                let models: Vec<&SegmentModel> = live
                    .iter()
                    .map(|i| side(&self.branches[*i].clients[0], input_side))
                    .collect();
                let params = fedavg_merge(&models, &weights)?.lora_params();
                for i in &live {
                    let client = &mut self.branches[*i].clients[0];
                    let target = if input_side { &mut client.a } else { &mut client.c };
                    target.set_params(params.iter().map(|(n, t)| (n, t)))?;
                }
            }
        }
        Ok(MergeEvent {
            after_step,
            participants: live,
            before,
            merged: merged_lora,
        })
    }

    /// Shut down every branch; returns each branch's `(a, b, c)`.
    pub fn shutdown(self) -> Result<Vec<(SegmentModel, SegmentModel, SegmentModel)>> {
        self.branches
            .into_iter()
            .map(|f| {
                let (b, mut clients) = f.shutdown()?;
                let (a, c) = clients.remove(0);
                Ok((a, b, c))
            })
            .collect()
    }
}

fn side(c: &ClientNode, input: bool) -> &SegmentModel {
    if input {
        &c.a
    } else {
        &c.c
    }
}
