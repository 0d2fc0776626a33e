// temporary probe: DDIM correctness with an oracle noise predictor
use steerlab::dit::{ddim_update, DiffusionSchedule};
use steerlab::synth::{render_scene, SceneSpec};
use steerlab_nn::{ops, randn, Rng, Tensor};

fn main() {
    let schedule = DiffusionSchedule::new(200, 20).unwrap();
    let scene = render_scene(&SceneSpec {
        seed: 42,
        has_lesion: true,
        has_dye: false,
        background_style: 0,
        image_size: 32,
    })
    .unwrap();
    let x0 = Tensor::from_vec(
        scene.image.shape().to_vec(),
        scene.image.data().iter().map(|&v| 2.0 * v - 1.0).collect(),
    )
    .unwrap();

    // oracle predictor: eps_hat = (x_t - sqrt(ab) x0) / sqrt(1 - ab)
    let mut rng = Rng::new(7, 0);
    let mut x = randn(&mut rng, &[3, 32, 32]).unwrap();
    for (k, &t) in schedule.ddim_steps.iter().enumerate() {
        let ab = schedule.alpha_bars[t];
        let eps_hat = ops::scale(
            &ops::sub(&x, &ops::scale(&x0, ab.sqrt()).unwrap()).unwrap(),
            1.0 / (1.0 - ab).sqrt(),
        )
        .unwrap();
        x = ddim_update(&x, &eps_hat, ab, schedule.alpha_bar_next(k)).unwrap();
    }
    let err: f32 = x
        .data()
        .iter()
        .zip(x0.data().iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0, f32::max);
    println!("oracle-eps DDIM from pure noise: max |x - x0| = {err:e}");
}
