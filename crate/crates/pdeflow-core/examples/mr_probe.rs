//! Probe: velocity-inference advection (random per-trajectory speed),
//! then multi-resolution evaluation of the trained model.

use pdeflow_core::datagen::{gen_advection, Family, GenSpec};
use pdeflow_core::field::ChannelVocabulary;
use pdeflow_core::metrics::{eval_model, eval_multires, eval_persistence, EvalOptions};
use pdeflow_core::model::{init_model_params, ModelConfig, ModelPreset};
use pdeflow_core::nn::ParamStore;
use pdeflow_core::sampler::{SampleConfig, Solver};
use pdeflow_core::train::{train_step, OptimizerState, TrainConfig};

fn env_f64(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_u(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let steps = env_u("STEPS", 5000) as u64;
    let mut model = ModelConfig::preset(ModelPreset::Tiny);
    model.vocab = ChannelVocabulary::new(vec!["Vx".into()]).unwrap();
    let mut tcfg = TrainConfig::default();
    tcfg.seed = 1;
    tcfg.base_lr = env_f64("LR", 1e-3);
    tcfg.batch_sizes = [env_u("BS", 4); 3];
    let mut spec = GenSpec::desk(Family::Advection, 11);
    spec.n_traj = env_u("NTRAJ", 46);
    spec.t_steps = 24;
    spec.grid = vec![128];
    spec.beta_spread = env_f64("SPREAD", 0.5);
    let data = gen_advection(&spec).unwrap();
    let (train_data, test_data) = data.split(0.9, 0).unwrap();
    let datasets = [train_data];
    let mut params: ParamStore<f32> = init_model_params(&model, 1);
    let mut opt = OptimizerState::new(&params);
    let start = std::time::Instant::now();
    let mut window = Vec::new();
    for step in 0..steps {
        let (loss, _, _) = train_step(&mut params, &mut opt, &model, &tcfg, &datasets, step, steps).unwrap();
        window.push(loss);
        if (step + 1) % 500 == 0 {
            let avg: f64 = window.iter().sum::<f64>() / window.len() as f64;
            println!(
                "step {:5}  avg {:8.4}  {:4.0} ms/step  ({:.0}s)",
                step + 1,
                avg,
                start.elapsed().as_millis() as f64 / (step + 1) as f64,
                start.elapsed().as_secs_f64()
            );
            window.clear();
        }
    }
    println!("train wall: {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    let opts = EvalOptions {
        sample: SampleConfig { steps: 40, solver: Solver::Euler, cfg_scale: 2.0, seed: 7, eps_stab: 1e-4 },
        max_windows: 5,
        n_seeds: 1,
    };
    let t0 = std::time::Instant::now();
    let (report, vals) = eval_model(&params, &model, &test_data, &opts, "adv", "tiny").unwrap();
    println!("eval@128: nRMSE {:.4} (windows {:?}) [{:.0}s]", report.value, vals, t0.elapsed().as_secs_f64());
    let persist = eval_persistence(&model, &test_data, 5, "adv").unwrap();
    println!("persistence: {:.4}", persist.value);
    let t0 = std::time::Instant::now();
    let multires = eval_multires(&params, &model, &test_data, &[64, 128, 256], &opts, "adv", "tiny").unwrap();
    for r in &multires {
        println!("multires {}: nRMSE {:.4}", r.resolution, r.value);
    }
    println!("multires wall {:.0}s", t0.elapsed().as_secs_f64());
}
