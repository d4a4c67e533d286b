mod batch;
mod client;
mod engine;
mod noise;
mod noise_check;
mod runtime;
mod server;

pub use batch::{Batch, IGNORE};
pub use client::{token_loss, ClientNode, TrainStepRecord};
pub use engine::{
    connect, run_sequential_round, split_segments, Federation, FederationConfig, MonolithicTrainer, RoundOutcome,
    TransportKind,
};
pub use noise::{inject_noise, NoiseConfig, NoiseInjector, NoiseTarget};
pub use noise_check::{noise_gradient_check, NoiseCheckReport};
pub use runtime::{accept_tcp, spawn_server, ServeMode, ServerHandle, DEFAULT_BARRIER_TIMEOUT};
pub use server::{AttackHook, ServerNode};

pub(crate) use client::{hidden_msg, unexpected};
