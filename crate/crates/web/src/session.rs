//! The demo's logic layer: plain Rust, string errors, no JS types, so the
//! whole surface tests on the host. `lib.rs` wraps these in wasm-bindgen
//! shims.

use reachlab_core::dataset::generate_train_test;
use reachlab_core::graphs::{classify_pair, transitive_closure, GraphSpec, PairClass};
use reachlab_core::model::ModelConfig;
use reachlab_core::reporting::{render_figure, Panel, PlotSpec};
use reachlab_core::seeded_rng;
use reachlab_core::sweeps::{aggregate_group, AggregateCurve};
use reachlab_core::training::{MetricRecord, TrainConfig, Trainer};

use crate::layout;

pub fn parse_spec(family: &str, n: usize, param: usize, seed: u64) -> Result<GraphSpec, String> {
    match family {
        "grid" => Ok(GraphSpec::Grid { n, k: param }),
        "chain" => Ok(GraphSpec::Chain { n, chains: param, seed }),
        other => Err(format!("unknown family {other:?}, expected grid or chain")),
    }
}

pub fn graph_svg(
    family: &str,
    n: usize,
    param: usize,
    seed: u64,
    highlight: Option<u32>,
) -> Result<String, String> {
    let spec = parse_spec(family, n, param, seed)?;
    layout::graph_svg(&spec, highlight).map_err(|e| e.to_string())
}

pub fn pair_report(
    family: &str,
    n: usize,
    param: usize,
    seed: u64,
    start: u32,
    goal: u32,
) -> Result<String, String> {
    let spec = parse_spec(family, n, param, seed)?;
    let (_, embedding) = spec.generate().map_err(|e| e.to_string())?;
    let (graph, _) = spec.generate().map_err(|e| e.to_string())?;
    let closure = transitive_closure(&graph);
    let class = classify_pair(&closure, start, goal).map_err(|e| e.to_string())?;
    let class_name = match class {
        PairClass::Positive => "positive",
        PairClass::ReverseNegative => "reverse_negative",
        PairClass::DisconnectedNegative => "disconnected_negative",
    };
    let vectors = embedding.as_ref().map(|embedding| {
        let from = embedding.vector(start).expect("validated by classify_pair").to_vec();
        let to = embedding.vector(goal).expect("validated by classify_pair").to_vec();
        let diff: Vec<i64> =
            from.iter().zip(&to).map(|(&a, &b)| i64::from(b) - i64::from(a)).collect();
        serde_json::json!({ "start": from, "goal": to, "difference": diff })
    });
    let report = serde_json::json!({
        "graph": spec.id(),
        "start": start,
        "goal": goal,
        "label": if class == PairClass::Positive { "Y" } else { "N" },
        "class": class_name,
        "distance": closure.dist(start, goal),
        "reverse_distance": closure.dist(goal, start),
        "vectors": vectors,
    });
    Ok(report.to_string())
}

/// An interactive training run over one generated graph, stepped a few
/// epochs at a time.
pub struct DemoSession {
    trainer: Trainer<f32>,
    label: String,
    total_epochs: usize,
}

impl DemoSession {
    pub fn new(
        family: &str,
        n: usize,
        param: usize,
        d_emb: usize,
        epochs: usize,
        seed: u64,
    ) -> Result<Self, String> {
        let spec = parse_spec(family, n, param, seed)?;
        let (graph, _) = spec.generate().map_err(|e| e.to_string())?;
        let closure = transitive_closure(&graph);
        let mut multi_hop = 0usize;
        for u in 0..n as u32 {
            for v in 0..n as u32 {
                if u != v && closure.dist(u, v).map(|d| d > 1).unwrap_or(false) {
                    multi_hop += 1;
                }
            }
        }
        // Test demands shrink to fit small graphs.
        let pos_test = (multi_hop / 2).min(20);
        let split = generate_train_test(
            &graph,
            &closure,
            &spec.id(),
            pos_test,
            20,
            seed,
            &mut seeded_rng(seed),
        )
        .map_err(|e| e.to_string())?;
        let model_config = ModelConfig::new(d_emb, n + 2);
        let train_config = TrainConfig {
            epochs,
            batch_size: split.train.len().min(256),
            eval_every: 1,
            seed,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&split, &spec.id(), &model_config, &train_config)
            .map_err(|e| e.to_string())?;
        Ok(Self { trainer, label: spec.label(), total_epochs: epochs })
    }

    pub fn finished(&self) -> bool {
        self.trainer.finished()
    }

    /// Runs up to `epochs` more epochs and reports the new records as JSON.
    pub fn step(&mut self, epochs: usize) -> Result<String, String> {
        let before = self.trainer.records().len();
        self.trainer.run_epochs(epochs, |_| {}).map_err(|e| e.to_string())?;
        let new: Vec<&MetricRecord> = self.trainer.records()[before..].iter().collect();
        serde_json::to_string(&serde_json::json!({
            "finished": self.trainer.finished(),
            "epochs_done": self.trainer.epochs_done(),
            "total_epochs": self.total_epochs,
            "records": new,
        }))
        .map_err(|e| e.to_string())
    }

    pub fn accuracy_svg(&self) -> Result<String, String> {
        self.curves_svg(
            Panel::TrainAccuracy,
            "accuracy vs training compute",
            |r| r.train_acc,
            |r| r.test_acc,
        )
    }

    pub fn loss_svg(&self) -> Result<String, String> {
        self.curves_svg(
            Panel::TrainLoss,
            "loss vs training compute",
            |r| r.train_loss,
            |r| r.test_loss,
        )
    }

    fn curves_svg(
        &self,
        panel: Panel,
        title: &str,
        train_metric: fn(&MetricRecord) -> f64,
        test_metric: fn(&MetricRecord) -> f64,
    ) -> Result<String, String> {
        if self.trainer.records().is_empty() {
            return Err("no records yet; run at least one epoch".to_string());
        }
        let as_curve = |label: &str, pick: fn(&MetricRecord) -> f64| -> AggregateCurve {
            // Route the chosen metric through the panel's slot so one
            // renderer serves train and test series side by side.
            let rerouted: Vec<MetricRecord> = self
                .trainer
                .records()
                .iter()
                .map(|r| {
                    let mut copy = r.clone();
                    match panel {
                        Panel::TrainLoss => copy.train_loss = pick(r),
                        Panel::TrainAccuracy => copy.train_acc = pick(r),
                        _ => unreachable!("demo uses train panels"),
                    }
                    copy
                })
                .collect();
            aggregate_group(label, label, &[rerouted]).expect("single run always aggregates")
        };
        let curves = vec![as_curve("train", train_metric), as_curve("test", test_metric)];
        render_figure(&curves, &PlotSpec::new(panel, format!("{}: {title}", self.label)))
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_report_grid_includes_vectors() {
        let json = pair_report("grid", 4, 2, 0, 0, 3).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["class"], "positive");
        assert_eq!(value["label"], "Y");
        assert_eq!(value["distance"], 2);
        assert_eq!(value["reverse_distance"], serde_json::Value::Null);
        assert_eq!(value["vectors"]["difference"], serde_json::json!([1, 1]));
    }

    #[test]
    fn pair_report_chain_has_no_vectors() {
        let json = pair_report("chain", 12, 3, 5, 0, 7).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(value["vectors"].is_null());
        assert!(value["class"].is_string());
    }

    #[test]
    fn pair_report_rejects_bad_input() {
        assert!(pair_report("grid", 4, 2, 0, 1, 1).is_err());
        assert!(pair_report("mesh", 4, 2, 0, 0, 1).is_err());
    }

    #[test]
    fn graph_svg_draws_and_validates() {
        let svg = graph_svg("grid", 9, 2, 0, Some(4)).unwrap();
        assert!(svg.contains("<svg"));
        assert_eq!(svg.matches("<circle").count(), 9);
        assert!(graph_svg("grid", 9, 2, 0, None).unwrap().contains("<svg"));
        assert!(graph_svg("grid", 9, 2, 0, Some(99)).is_err());
    }

    #[test]
    fn session_steps_and_renders() {
        let mut session = DemoSession::new("grid", 12, 2, 8, 6, 3).unwrap();
        let first: serde_json::Value = serde_json::from_str(&session.step(2).unwrap()).unwrap();
        assert_eq!(first["finished"], false);
        assert_eq!(first["epochs_done"], 2);
        assert_eq!(first["records"].as_array().unwrap().len(), 2);

        let accuracy = session.accuracy_svg().unwrap();
        assert!(accuracy.contains("train") && accuracy.contains("test"));
        let loss = session.loss_svg().unwrap();
        assert!(loss.starts_with("<svg"));

        let rest: serde_json::Value = serde_json::from_str(&session.step(99).unwrap()).unwrap();
        assert_eq!(rest["finished"], true);
        assert_eq!(rest["epochs_done"], 6);
        assert!(session.finished());
    }

    #[test]
    fn session_rejects_unknown_family() {
        assert!(DemoSession::new("mesh", 12, 2, 8, 4, 0).is_err());
    }

    #[test]
    fn session_is_seed_deterministic() {
        // Wall-clock seconds are the one nondeterministic column.
        let run = |seed: u64| -> serde_json::Value {
            let mut session = DemoSession::new("chain", 14, 2, 8, 3, seed).unwrap();
            let mut value: serde_json::Value =
                serde_json::from_str(&session.step(3).unwrap()).unwrap();
            for record in value["records"].as_array_mut().unwrap() {
                record["seconds"] = serde_json::json!(0);
            }
            value
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
