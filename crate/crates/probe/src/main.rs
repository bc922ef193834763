// scratch probe: time one proto+PN epoch at two batch geometries
use posenorm::data::synthetic::{gen_synthetic, SyntheticConfig};
use posenorm::learners::{preset, train, TrainOutputs};
use std::time::Instant;

fn main() {
    let cfg = SyntheticConfig {
        num_classes: 40,
        images_per_class: 30,
        num_parts: 5,
        image_size: 84,
        ..SyntheticConfig::default()
    };
    let bundle = gen_synthetic::<f32>(&cfg, 0).unwrap();
    for (n_way, k, q) in [(5usize, 5usize, 5usize), (5, 3, 3)] {
        let (backbone, mut tc) = preset("synth-proto-pn-convnet4").unwrap();
        tc.episode.n_way = n_way;
        tc.episode.k_shot = k;
        tc.episode.q_query = q;
        tc.schedule.epochs_per_stage = 1;
        tc.schedule.stages = 1;
        tc.eval_every = 100;
        let t1 = Instant::now();
        let _ = train(&bundle, &backbone, &tc, &TrainOutputs::none()).unwrap();
        let per = 600 / (n_way * (k + q));
        println!(
            "episode {}x({}+{}): epoch {:?} over {} steps = {:?}/step",
            n_way, k, q, t1.elapsed(), per, t1.elapsed() / per as u32
        );
    }
}
