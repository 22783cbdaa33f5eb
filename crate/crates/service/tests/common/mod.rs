#![allow(dead_code)]

use std::sync::Arc;

use adrag_core::corpus::GuardCorpusConfig;
use adrag_core::dataset::Example;
use adrag_core::experiment::{prepare_corpus, ExperimentConfig};
use adrag_core::guard::{GuardCapacity, GuardParams};
use adrag_core::kb::KnowledgeBase;
use adrag_core::par::ExecMode;
use adrag_core::training::{build_training_kb, raft_train, TrainConfig};
use adrag_service::config::ServiceSection;
use adrag_service::http;
use adrag_service::state::ServiceState;
use tokio::sync::oneshot;

pub struct Fixture {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub params: GuardParams,
}

/// A student trained on a small planted corpus.
pub fn toy_fixture() -> Fixture {
    let cfg = ExperimentConfig {
        corpus: GuardCorpusConfig {
            families: 40,
            cue_vocab: 6,
            plants_per_query: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let pc = prepare_corpus(&cfg, 2, ExecMode::default()).unwrap();
    let init = GuardParams::init(GuardCapacity::student(), pc.layout, 2).unwrap();
    let train_cfg = TrainConfig {
        epochs: 20,
        ..cfg.train
    };
    let (params, _) = raft_train(init, &pc.features, &train_cfg, ExecMode::default()).unwrap();
    Fixture {
        train: pc.corpus.train,
        test: pc.corpus.test,
        params,
    }
}

pub fn state_with(kb: KnowledgeBase, params: Option<GuardParams>, cfg: ServiceSection) -> Arc<ServiceState> {
    Arc::new(ServiceState::new(Arc::new(kb), params, 0.5, cfg).unwrap())
}

pub fn fixture_state(fx: &Fixture, cfg: ServiceSection) -> Arc<ServiceState> {
    let kb = build_training_kb(&fx.train, Default::default()).unwrap();
    state_with(kb, Some(fx.params.clone()), cfg)
}

pub struct Server {
    pub url: String,
    stop: Option<oneshot::Sender<()>>,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
    }
}

pub async fn spawn(state: Arc<ServiceState>) -> Server {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel();
    tokio::spawn(http::serve(state, listener, async {
        let _ = rx.await;
    }));
    Server { url, stop: Some(tx) }
}
