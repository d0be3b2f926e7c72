// Scratch probe: train on the pinned suite and report metrics. Not part of
// the deliverable test surface.

use std::time::Instant;

use memtrack::metrics::{clear_mot, hota, idf1, occlusion_relink, tracks_from_records, TrackSeq};
use memtrack::model::{Model, ModelConfig};
use memtrack::runtime::{run_sequence, train, TrainSettings};
use memtrack::synth::{generate, gt_to_records, pinned_suite, Image, ScenarioConfig};
use memtrack::tensor::{AdamW, ParamStore};

fn eval_suite(
    model: &Model,
    store: &ParamStore,
    suite: &[ScenarioConfig],
    data: &[Vec<(Image, memtrack::synth::GtFrame)>],
) -> (f64, f64, f64, usize, f64) {
    let mut motas = Vec::new();
    let mut idf1s = Vec::new();
    let mut hotas = Vec::new();
    let mut idsw = 0usize;
    let mut relink_total = 0usize;
    let mut relinked = 0usize;
    let mut max_prop_score = 0.0f64;
    for (cfg, frames) in suite.iter().zip(data) {
        let images: Vec<Image> = frames.iter().map(|(i, _)| i.clone()).collect();
        let (_trajs, preds) = run_sequence(model, store, &images, false).unwrap();
        for p in &preds {
            for e in &p.entries {
                if matches!(e.origin, memtrack::decoder::EntryOrigin::Proposal(_)) {
                    max_prop_score = max_prop_score.max(e.score);
                }
            }
        }
        let state_seqs: Vec<TrackSeq> = {
            // rebuild from trajectories with 1-based frames
            _trajs
                .iter()
                .map(|t| TrackSeq {
                    id: t.identity,
                    boxes: t.records.iter().map(|r| (r.frame + 1, r.bbox)).collect(),
                })
                .collect()
        };
        let gt_records = gt_to_records(frames, cfg.width, cfg.height);
        let gt_seqs_px = tracks_from_records(&gt_records);
        // Convert gt to normalized to match trajectories.
        let gt_seqs: Vec<TrackSeq> = gt_seqs_px
            .iter()
            .map(|t| TrackSeq {
                id: t.id,
                boxes: t
                    .boxes
                    .iter()
                    .map(|(f, b)| {
                        (
                            *f,
                            [
                                b[0] / cfg.width as f64,
                                b[1] / cfg.height as f64,
                                b[2] / cfg.width as f64,
                                b[3] / cfg.height as f64,
                            ],
                        )
                    })
                    .collect(),
            })
            .collect();
        let clear = clear_mot(&gt_seqs, &state_seqs, 0.5);
        motas.push(clear.mota.unwrap_or(0.0));
        idsw += clear.idsw;
        idf1s.push(idf1(&gt_seqs, &state_seqs, 0.5).unwrap_or(0.0));
        hotas.push(hota(&gt_seqs, &state_seqs).map(|h| h.hota).unwrap_or(0.0));
        let scripts: Vec<(u64, u64, u64)> = cfg
            .occlusions
            .iter()
            .map(|o| (o.identity, o.start as u64 + 1, o.duration as u64))
            .collect();
        let st = occlusion_relink(&gt_seqs, &state_seqs, &scripts, 0.5);
        relink_total += st.total;
        relinked += st.relinked;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("  max proposal score seen: {max_prop_score:.4}");
    (
        mean(&motas),
        mean(&idf1s),
        mean(&hotas),
        idsw,
        if relink_total > 0 { relinked as f64 / relink_total as f64 } else { 1.0 },
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-4);
    let d: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let max_clip: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10);
    let grad_clip: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let (train_cfgs, heldout_cfgs) = pinned_suite();
    let train_data: Vec<_> = train_cfgs.iter().map(|c| generate(c).unwrap()).collect();
    let heldout_data: Vec<_> = heldout_cfgs.iter().map(|c| generate(c).unwrap()).collect();

    let mcfg = ModelConfig { d, channels: d, ..Default::default() };
    let mut store = ParamStore::new();
    let model = Model::build(&mut store, mcfg, 0);
    println!("params: {}", store.total_elems());
    let mut opt = AdamW::new(&store, 1e-4);

    let decay: Option<usize> = args.get(6).and_then(|s| s.parse().ok());
    let batch: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1);
    let settings = TrainSettings {
        epochs,
        lr,
        lr_decay_epoch: decay,
        max_clip_len: max_clip,
        grad_clip,
        batch_clips: batch,
        seed: 0,
        ..Default::default()
    };
    let t0 = Instant::now();
    train(&model, &mut store, &mut opt, &train_data, &settings, 0, |log| {
        if log.epoch % 5 == 0 || log.epoch + 1 == epochs {
            println!(
                "epoch {:3} clip_len {:2} lr {:.1e} loss {:8.4} (tck {:7.3} det {:7.3}) [{:5.1}s]",
                log.epoch,
                log.clip_len,
                log.lr,
                log.mean_loss,
                log.mean_tracking,
                log.mean_detection,
                t0.elapsed().as_secs_f64()
            );
        }
    })
    .unwrap();
    println!("train time: {:.1}s", t0.elapsed().as_secs_f64());

    let (mota, idf, h, idsw, relink) = eval_suite(&model, &store, &train_cfgs, &train_data);
    println!("TRAIN  mota {mota:.3} idf1 {idf:.3} hota {h:.3} idsw {idsw} relink {relink:.2}");
    let (mota, idf, h, idsw, relink) = eval_suite(&model, &store, &heldout_cfgs, &heldout_data);
    println!("HELD   mota {mota:.3} idf1 {idf:.3} hota {h:.3} idsw {idsw} relink {relink:.2}");
}
