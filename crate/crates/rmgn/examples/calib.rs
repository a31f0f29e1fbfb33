//! Scratch calibration: train-set pixel L1 for a checkpoint.
use rmgn::atelier::{load_manifest, oracle_teacher, render_cloth, render_person, own_cloth_spec};
use rmgn::config::load_config;
use rmgn::domain::save_image;
use rmgn::train::{infer, load_checkpoint};
use rmgn::Real;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = load_config(&args[1]).unwrap();
    let manifest = load_manifest(&args[2]).unwrap();
    let state = load_checkpoint(std::path::Path::new(&args[3]), &cfg).unwrap();
    let dump_dir = args.get(4).cloned();
    let mut total = 0.0f64;
    let mut n = 0.0f64;
    for (pi, item) in manifest.items.iter().enumerate() {
        let item = item;
        let render = render_person::<Real>(&item.person, cfg.height, cfg.width);
        let target = render_cloth::<Real>(&own_cloth_spec(&item.person), cfg.height, cfg.width);
        for (cj, spec) in item.clothes.iter().enumerate() {
            let cloth = render_cloth::<Real>(spec, cfg.height, cfg.width);
            let fake = oracle_teacher(
                &render.image,
                &render.cloth_region,
                &render.torso_geometry,
                &cloth,
            )
            .unwrap();
            let (pred, _) = infer(&fake, &target, &state).unwrap();
            if let Some(dir) = &dump_dir {
                if pi < 2 && cj < 2 {
                    let d = std::path::Path::new(dir);
                    std::fs::create_dir_all(d).unwrap();
                    save_image(&fake, d.join(format!("{pi}_{cj}_fake.png"))).unwrap();
                    save_image(&pred, d.join(format!("{pi}_{cj}_pred.png"))).unwrap();
                    save_image(&render.image, d.join(format!("{pi}_{cj}_real.png"))).unwrap();
                    let flows =
                        rmgn::warp::predict_flow(&fake, &target, &state.warp).unwrap();
                    let warped =
                        rmgn::warp::warp(&target, flows.flows.last().unwrap()).unwrap();
                    save_image(&warped.image, d.join(format!("{pi}_{cj}_warped.png")))
                        .unwrap();
                    save_image(&target, d.join(format!("{pi}_{cj}_target.png"))).unwrap();
                }
            }
            let l1: f64 = pred
                .data()
                .iter()
                .zip(render.image.data().iter())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / pred.data().len() as f64;
            total += l1;
            n += 1.0;
        }
    }
    println!("train-set pixel L1: {}", total / n);
}
