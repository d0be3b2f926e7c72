// Scratch probe: can the hypothesis generator + aux heads overfit
// detection on a single frame? Not part of the deliverable test surface.

use memtrack::losses::{detection_loss, LossWeights};
use memtrack::model::{Model, ModelConfig};
use memtrack::synth::{generate, ScenarioConfig};
use memtrack::tensor::{AdamW, ParamStore, Tape};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let multi: bool = args.get(3).map(|s| s == "multi").unwrap_or(false);

    let data: Vec<Vec<(memtrack::synth::Image, memtrack::synth::GtFrame)>> = if multi {
        memtrack::synth::pinned_suite()
            .0
            .iter()
            .map(|c| generate(c).unwrap())
            .collect()
    } else {
        vec![generate(&ScenarioConfig { seed: 5, n_objects: 3, ..Default::default() }).unwrap()]
    };

    let mcfg = ModelConfig { ..Default::default() };
    let mut store = ParamStore::new();
    let model = Model::build(&mut store, mcfg, 0);
    let mut opt = AdamW::new(&store, 1e-4);
    let w = LossWeights::default();

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
    let mut running = 0.0;
    for step in 0..steps {
        let scene = &data[rng.random_range(0..data.len())];
        let (img, gt) = &scene[rng.random_range(0..scene.len())];
        let mut tape = Tape::new();
        let bind = store.bind_all(&mut tape, true);
        let feat = model.hyp.forward_features(&mut tape, &bind, img);
        let q_pro = model.hyp.decode_proposals(&mut tape, &bind, &feat);
        let (aux_obj, aux_box) = model.hyp.aux_heads(&mut tape, &bind, q_pro);
        let loss = detection_loss(&mut tape, &aux_obj, &aux_box, &gt.objects, &w);
        tape.backward(loss);
        store.zero_grads();
        store.accumulate_grads(&tape, &bind);
        opt.step(&mut store, lr);
        running += tape.value(loss).data[0];
        if step % 200 == 0 || step + 1 == steps {
            let objs: Vec<f64> = aux_obj.iter().map(|&n| tape.value(n).data[0]).collect();
            let mut best = objs.clone();
            best.sort_by(|a, b| b.partial_cmp(a).unwrap());
            println!(
                "step {step:5} loss(avg200) {:9.4} top-obj {:.3} {:.3} {:.3} grad_norm {:.3}",
                running / 200.0f64.min((step + 1) as f64),
                best[0], best[1], best[2],
                store.grad_norm()
            );
            running = 0.0;
        }
    }
    let frames = &data[0];
    let (img, gt) = &frames[0];
    // Show final boxes vs gt.
    let mut tape = Tape::new();
    let bind = store.bind_all(&mut tape, false);
    let feat = model.hyp.forward_features(&mut tape, &bind, img);
    let q_pro = model.hyp.decode_proposals(&mut tape, &bind, &feat);
    let (aux_obj, aux_box) = model.hyp.aux_heads(&mut tape, &bind, q_pro);
    for (i, (o, b)) in aux_obj.iter().zip(&aux_box).enumerate() {
        let ov = tape.value(*o).data[0];
        let bv = &tape.value(*b).data;
        if ov > 0.3 {
            println!("prop {i}: obj {ov:.3} box [{:.3} {:.3} {:.3} {:.3}]", bv[0], bv[1], bv[2], bv[3]);
        }
    }
    for g in &gt.objects {
        println!("gt {}: box {:?}", g.identity, g.bbox);
    }
}
