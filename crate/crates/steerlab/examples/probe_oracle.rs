// temporary probe: oracle learning curves
use steerlab::eval::{OracleClassifier, OracleSettings};
use steerlab::synth::{render_scene, SceneClass, SceneSpec};
use steerlab_nn::Tensor;

fn main() {
    let items: Vec<(Tensor, usize)> = (0..96)
        .map(|i| {
            let class = SceneClass::ALL[(i % 4) as usize];
            let style = if class == SceneClass::AltBackground { 4 + i as u32 % 3 } else { i as u32 % 3 };
            let scene = render_scene(&SceneSpec {
                seed: i,
                has_lesion: class.has_lesion(),
                has_dye: class == SceneClass::DyedLesion,
                background_style: style,
                image_size: 32,
            })
            .unwrap();
            (scene.image, class.index())
        })
        .collect();
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let t0 = std::time::Instant::now();
    let settings = OracleSettings { epochs, batch_size: 16, lr, seed: 77 };
    let oracle = OracleClassifier::train(&items, &items, 4, &settings).unwrap();
    println!("lr {lr:.0e} epochs {epochs:3}: acc {:.3} auc {:.3} ({:?})", oracle.accuracy, oracle.auc, t0.elapsed());
}
