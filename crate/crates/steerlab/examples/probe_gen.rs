// temporary probe: inspect generated-image statistics vs prompts
use steerlab::dit::{train, ddim_sample, DiffusionSchedule, ModelConfig, TrainSettings};
use steerlab::eval::{estimate_lesion_mask, OracleClassifier, OracleSettings};
use steerlab::img::write_ppm;
use steerlab::steer::sample_rng;
use steerlab::synth::{encode_prompt, make_dataset, render_scene, PromptSpec, SceneClass, Split};
use steerlab_nn::Tensor;

fn stats(img: &Tensor) -> (f32, f32, f32, f32) {
    let (_, h, w) = img.dims3().unwrap();
    let hw = h * w;
    let mean = |c: usize| img.data()[c * hw..(c + 1) * hw].iter().sum::<f32>() / hw as f32;
    let est = estimate_lesion_mask(img).unwrap();
    let area = est.data().iter().sum::<f32>() / hw as f32;
    (mean(0), mean(1), mean(2), area)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_per_class: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(120);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let lr: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3e-4);

    let cfg = ModelConfig::default();
    let records = make_dataset(n_per_class, 7).unwrap();
    let items: Vec<(Tensor, PromptSpec)> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| {
            let scene = render_scene(&r.spec(32)).unwrap();
            (scene.image, PromptSpec::for_class(r.class(), (r.seed % 3) as usize))
        })
        .collect();
    let settings = TrainSettings { epochs, batch_size: 8, lr, seed: 1234 };
    let t0 = std::time::Instant::now();
    let result = train(&items, &cfg, &settings).unwrap();
    println!("trained {:?} losses {:?}", t0.elapsed(), &result.epoch_losses);
    let params = result.params;

    // reference stats from real scenes
    for class in [SceneClass::Plain, SceneClass::Lesion, SceneClass::DyedLesion] {
        let mut agg = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
        for seed in 300..312u64 {
            let scene = render_scene(&steerlab::synth::SceneSpec {
                seed,
                has_lesion: class.has_lesion(),
                has_dye: class == SceneClass::DyedLesion,
                background_style: (seed % 3) as u32,
                image_size: 32,
            })
            .unwrap();
            let s = stats(&scene.image);
            agg = (agg.0 + s.0, agg.1 + s.1, agg.2 + s.2, agg.3 + s.3);
        }
        println!(
            "real {class:?}: rgb ({:.3} {:.3} {:.3}) est-lesion-area {:.3}",
            agg.0 / 12.0,
            agg.1 / 12.0,
            agg.2 / 12.0,
            agg.3 / 12.0
        );
    }

    let oracle_items: Vec<(Tensor, usize)> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| (render_scene(&r.spec(32)).unwrap().image, r.class().index()))
        .collect();
    let oracle = OracleClassifier::train(
        &oracle_items,
        &oracle_items,
        4,
        &OracleSettings::default(),
    )
    .unwrap();
    println!("oracle acc {:.3}", oracle.accuracy);

    let schedule = DiffusionSchedule::new(cfg.t_train, cfg.t_sample).unwrap();
    std::fs::create_dir_all("/tmp/gen").unwrap();
    for class in [SceneClass::Plain, SceneClass::Lesion, SceneClass::DyedLesion] {
        let mut agg = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
        let mut probs_agg = [0.0f32; 4];
        let n = 12;
        for i in 0..n {
            let prompt = PromptSpec::for_class(class, i % 3);
            let enc = encode_prompt(&prompt, params.get("prompt_embed").unwrap()).unwrap();
            let mut rng = sample_rng(9000 + i as u64);
            let img = ddim_sample(&params, &schedule, &enc, &mut rng, None).unwrap().image;
            let s = stats(&img);
            agg = (agg.0 + s.0, agg.1 + s.1, agg.2 + s.2, agg.3 + s.3);
            let p = oracle.probs(&img).unwrap();
            for k in 0..4 {
                probs_agg[k] += p[k];
            }
            if i < 3 {
                write_ppm(
                    std::path::Path::new(&format!("/tmp/gen/{class:?}_{i}.ppm")),
                    &img,
                )
                .unwrap();
            }
        }
        let nf = n as f32;
        println!(
            "gen {class:?}: rgb ({:.3} {:.3} {:.3}) est-area {:.3} oracle-probs [{:.2} {:.2} {:.2} {:.2}]",
            agg.0 / nf, agg.1 / nf, agg.2 / nf, agg.3 / nf,
            probs_agg[0] / nf, probs_agg[1] / nf, probs_agg[2] / nf, probs_agg[3] / nf
        );
    }
}
