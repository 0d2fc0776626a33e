// temporary probe: end-to-end pipeline viability and timing
use std::time::Instant;

use steerlab::dit::{train, DiffusionSchedule, ModelConfig, TrainSettings};
use steerlab::eval::{flip_rate, lesion_presence_rate, OracleClassifier, OracleSettings};
use steerlab::steer::{capture_activations, estimate_vectors, generate_pair, SteerConfig};
use steerlab::synth::{make_dataset, render_scene, PromptSpec, SceneClass, Split};
use steerlab_nn::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_per_class: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(120);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let lr: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let z: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(12);

    let cfg = ModelConfig::default();
    let records = make_dataset(n_per_class, 7).unwrap();
    let train_items: Vec<(Tensor, PromptSpec)> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| {
            let scene = render_scene(&r.spec(32)).unwrap();
            (scene.image, PromptSpec::for_class(r.class(), (r.seed % 3) as usize))
        })
        .collect();
    println!("train items: {}", train_items.len());

    let t0 = Instant::now();
    let settings = TrainSettings { epochs, batch_size: 8, lr, seed: 1234 };
    let result = train(&train_items, &cfg, &settings).unwrap();
    let params = result.params;
    println!(
        "dit trained in {:?}; epoch losses: first {:.4} mid {:.4} last {:.4}",
        t0.elapsed(),
        result.epoch_losses[0],
        result.epoch_losses[result.epoch_losses.len() / 2],
        result.epoch_losses.last().unwrap()
    );

    // oracle on the same corpus
    let t0 = Instant::now();
    let oracle_items: Vec<(Tensor, usize)> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| (render_scene(&r.spec(32)).unwrap().image, r.class().index()))
        .collect();
    let val_items: Vec<(Tensor, usize)> = records
        .iter()
        .filter(|r| r.split == Split::Val)
        .map(|r| (render_scene(&r.spec(32)).unwrap().image, r.class().index()))
        .collect();
    let oracle =
        OracleClassifier::train(&oracle_items, &val_items, 4, &OracleSettings::default()).unwrap();
    println!("oracle in {:?}: acc {:.3} auc {:.3}", t0.elapsed(), oracle.accuracy, oracle.auc);

    // generation sanity: do prompts control the class?
    let schedule = DiffusionSchedule::new(cfg.t_train, cfg.t_sample).unwrap();
    let t0 = Instant::now();
    let n_gen = 24;
    let mut lesion_imgs = Vec::new();
    let mut normal_imgs = Vec::new();
    for z in 0..n_gen {
        let prompt = PromptSpec::for_class(SceneClass::Lesion, (z % 3) as usize);
        let enc = steerlab::synth::encode_prompt(&prompt, params.get("prompt_embed").unwrap()).unwrap();
        let mut rng = steerlab::steer::sample_rng(1000 + z as u64);
        lesion_imgs.push(
            steerlab::dit::ddim_sample(&params, &schedule, &enc, &mut rng, None).unwrap().image,
        );
        let prompt = PromptSpec::for_class(SceneClass::Plain, (z % 3) as usize);
        let enc = steerlab::synth::encode_prompt(&prompt, params.get("prompt_embed").unwrap()).unwrap();
        let mut rng = steerlab::steer::sample_rng(1000 + z as u64);
        normal_imgs.push(
            steerlab::dit::ddim_sample(&params, &schedule, &enc, &mut rng, None).unwrap().image,
        );
    }
    println!(
        "generated {} images in {:?} ({:.2?}/image)",
        2 * n_gen,
        t0.elapsed(),
        t0.elapsed() / (2 * n_gen as u32)
    );
    println!(
        "lesion prompts -> lesion-presence rate {:.3}; normal prompts -> {:.3}",
        lesion_presence_rate(&oracle, &lesion_imgs).unwrap(),
        lesion_presence_rate(&oracle, &normal_imgs).unwrap()
    );

    // vector bank + alpha sweep over the whole depth
    let (pos, neg) = steerlab::synth::contrastive_pair("lesion", 0).unwrap();
    let seeds: Vec<u64> = (0..z as u64).map(|i| 500 + i).collect();
    let t0 = Instant::now();
    let mut pos_traces = Vec::new();
    let mut neg_traces = Vec::new();
    for ctx in 0..3usize {
        let (p, n) = steerlab::synth::contrastive_pair("lesion", ctx).unwrap();
        let chunk: Vec<u64> = seeds.iter().filter(|s| (**s % 3) as usize == ctx).copied().collect();
        if chunk.is_empty() {
            continue;
        }
        pos_traces.extend(capture_activations(&params, &p, &chunk, 0, 7, &schedule).unwrap());
        neg_traces.extend(capture_activations(&params, &n, &chunk, 0, 7, &schedule).unwrap());
    }
    let _ = (pos, neg);
    let bank = estimate_vectors(&pos_traces, &neg_traces).unwrap();
    println!("bank (Z={}) in {:?}", seeds.len(), t0.elapsed());

    for window in [(0usize, 7usize), (2, 5), (1, 4)] {
        for alpha in [0.5f32, 1.0, 2.0, 2.5, 3.0] {
            let t0 = Instant::now();
            let n_pairs = 16;
            let mut steered = Vec::new();
            for i in 0..n_pairs {
                let prompt = PromptSpec::for_class(SceneClass::Lesion, (i % 3) as usize);
                let sc = SteerConfig::remove(alpha, window.0, window.1);
                let pair =
                    generate_pair(&params, &prompt, &bank, &sc, &schedule, 2000 + i as u64)
                        .unwrap();
                steered.push(pair.steered.image);
            }
            let flip = flip_rate(&oracle, &steered, SceneClass::Lesion.index()).unwrap();
            println!(
                "window {:?} alpha {alpha}: flip {flip:.3} ({:?})",
                window,
                t0.elapsed()
            );
        }
    }
}
