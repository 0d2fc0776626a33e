// temporary probe: isolate the terminal-noise mismatch
use steerlab::dit::{
    ddim_sample_from_noise, train, DiffusionSchedule, ModelConfig, TrainSettings,
};
use steerlab::eval::estimate_lesion_mask;
use steerlab::synth::{encode_prompt, make_dataset, render_scene, PromptSpec, SceneClass, Split};
use steerlab_nn::{ops, randn, Rng, Tensor};

fn to_diff(img: &Tensor) -> Tensor {
    Tensor::from_vec(img.shape().to_vec(), img.data().iter().map(|&v| 2.0 * v - 1.0).collect())
        .unwrap()
}

fn stats(img: &Tensor, label: &str) {
    let (_, h, w) = img.dims3().unwrap();
    let hw = (h * w) as f32;
    let m: Vec<f32> = (0..3)
        .map(|c| img.data()[c * h * w..(c + 1) * h * w].iter().sum::<f32>() / hw)
        .collect();
    let var: f32 = img
        .data()
        .iter()
        .map(|&v| {
            let mu = img.data().iter().sum::<f32>() / img.numel() as f32;
            (v - mu) * (v - mu)
        })
        .sum::<f32>()
        / img.numel() as f32;
    let est = estimate_lesion_mask(img).unwrap();
    let area = est.data().iter().sum::<f32>() / hw;
    println!("  {label}: rgb ({:.3} {:.3} {:.3}) pixel-sd {:.3} est-area {:.3}", m[0], m[1], m[2], var.sqrt(), area);
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let t_train: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let lr: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3e-4);

    let cfg = ModelConfig { t_train, ..ModelConfig::default() };
    let records = make_dataset(100, 7).unwrap();
    let items: Vec<(Tensor, PromptSpec)> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| {
            let scene = render_scene(&r.spec(32)).unwrap();
            (scene.image, PromptSpec::for_class(r.class(), (r.seed % 3) as usize))
        })
        .collect();
    let t0 = std::time::Instant::now();
    let result = train(&items, &cfg, &TrainSettings { epochs, batch_size: 8, lr, seed: 1234 }).unwrap();
    println!(
        "t_train {t_train}: trained {} items {:?}; loss {:.3} -> {:.3}",
        items.len(),
        t0.elapsed(),
        result.epoch_losses[0],
        result.epoch_losses.last().unwrap()
    );
    let params = result.params;
    let schedule = DiffusionSchedule::new(cfg.t_train, cfg.t_sample).unwrap();
    println!(
        "alpha_bar at noisiest step: {:.5}",
        schedule.alpha_bars[*schedule.ddim_steps.first().unwrap()]
    );

    // single-step denoising quality on real scenes
    for &t in &[schedule.ddim_steps[0], t_train / 2, t_train / 10] {
        let mut err = 0.0f32;
        let n = 8;
        for seed in 0..n {
            let scene = render_scene(&steerlab::synth::SceneSpec {
                seed: 400 + seed,
                has_lesion: true,
                has_dye: false,
                background_style: (seed % 3) as u32,
                image_size: 32,
            })
            .unwrap();
            let prompt = PromptSpec::for_class(SceneClass::Lesion, (seed % 3) as usize);
            let enc = encode_prompt(&prompt, params.get("prompt_embed").unwrap()).unwrap();
            let x0 = to_diff(&scene.image);
            let mut rng = Rng::new(777 + seed, 0);
            let eps = randn(&mut rng, &[3, 32, 32]).unwrap();
            let ab = schedule.alpha_bars[t];
            let xt = ops::add(
                &ops::scale(&x0, ab.sqrt()).unwrap(),
                &ops::scale(&eps, (1.0 - ab).sqrt()).unwrap(),
            )
            .unwrap();
            let tokens = steerlab::dit::patchify(&xt, 4).unwrap();
            let eps_hat =
                steerlab::dit::forward_denoiser(&params, &tokens, t, &enc, None).unwrap();
            err += ops::mse(&eps_hat, &eps).unwrap().item().unwrap();
        }
        println!("  eps-mse at t={t}: {:.4}", err / n as f32);
    }

    // pure-noise sampling vs teacher-start sampling
    for class in [SceneClass::Plain, SceneClass::Lesion] {
        let prompt = PromptSpec::for_class(class, 0);
        let enc = encode_prompt(&prompt, params.get("prompt_embed").unwrap()).unwrap();
        let mut rng = Rng::new(31337, 0);
        let x_init = randn(&mut rng, &[3, 32, 32]).unwrap();
        let run = ddim_sample_from_noise(&params, &schedule, &enc, &x_init, None).unwrap();
        stats(&run.image, &format!("{class:?} pure-noise"));

        // teacher start: noise a REAL scene of this class to the first step
        let scene = render_scene(&steerlab::synth::SceneSpec {
            seed: 999,
            has_lesion: class.has_lesion(),
            has_dye: false,
            background_style: 0,
            image_size: 32,
        })
        .unwrap();
        let t_first = schedule.ddim_steps[0];
        let ab = schedule.alpha_bars[t_first];
        let mut rng = Rng::new(31338, 0);
        let eps = randn(&mut rng, &[3, 32, 32]).unwrap();
        let xt = ops::add(
            &ops::scale(&to_diff(&scene.image), ab.sqrt()).unwrap(),
            &ops::scale(&eps, (1.0 - ab).sqrt()).unwrap(),
        )
        .unwrap();
        let run = ddim_sample_from_noise(&params, &schedule, &enc, &xt, None).unwrap();
        stats(&run.image, &format!("{class:?} teacher-start"));
    }
}
