//! Scratch diagnostic: back-view PSNR under input/scheme swaps for a checkpoint.
use dualrec::diffmath::no_grad;
use dualrec::evalkit::psnr;
use dualrec::fusion::FusionMode;
use dualrec::imgbuf::ImageBuf;
use dualrec::nerf::{volume_render, RenderConfig, TriplaneField};
use dualrec::scenegen::{read_record, SceneRecord};
use dualrec::training::{
    checkpoint_config, load_checkpoint, reconstruct, ExtrinsicScheme, LoadScope, Model,
    ModelConfig,
};
use std::path::Path;

fn back_psnr(
    model: &Model<f32>,
    recs: &[SceneRecord],
    dual: bool,
    mode: FusionMode,
    scheme: ExtrinsicScheme,
) -> f64 {
    let mut tot = 0.0;
    for r in recs {
        tot += no_grad(|| {
            let front = r.views[r.front_index].0.to_tensor::<f32>();
            let back = if dual {
                r.views[r.back_index].0.to_tensor::<f32>()
            } else {
                r.views[r.front_index].0.to_tensor::<f32>()
            };
            let tri = reconstruct(model, &front, &back, mode, scheme, true)?;
            let field = TriplaneField { triplane: &tri, mlp: &model.nerf };
            let cfg = RenderConfig { width: 16, height: 16, n_samples: 24, stratified: false };
            let pred = volume_render(&field, &r.views[r.back_index].1.pose, &cfg, None)?;
            let gt = r.views[r.back_index].0.resize_square_white(16);
            psnr(&ImageBuf::from_tensor(&pred)?, &gt)
        })
        .unwrap();
    }
    tot / recs.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = Path::new(&args[1]);
    let data = Path::new(&args[2]);
    let model = if args[1] == "INIT" {
        Model::<f32>::new(ModelConfig { init_seed: 11, ..ModelConfig::desk() }).unwrap()
    } else {
        let cfg = checkpoint_config(ckpt).unwrap();
        let model_cfg: ModelConfig = serde_json::from_value(cfg["model"].clone()).unwrap();
        let m = Model::<f32>::new(model_cfg).unwrap();
        load_checkpoint(ckpt, &m.params, None, LoadScope::Full).unwrap();
        m
    };

    let mut dirs: Vec<_> = std::fs::read_dir(data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let recs: Vec<SceneRecord> = dirs.iter().map(|d| read_record(d).unwrap()).collect();

    let ff = ExtrinsicScheme::FrontFront;
    // Cross-scene control: scene i's cameras/GT with scene i+1's input images.
    let mut cross = 0.0;
    for i in 0..recs.len() {
        let r = &recs[i];
        let other = &recs[(i + 1) % recs.len()];
        cross += no_grad(|| {
            let front = other.views[other.front_index].0.to_tensor::<f32>();
            let back = other.views[other.back_index].0.to_tensor::<f32>();
            let tri = reconstruct(&model, &front, &back, FusionMode::Add, ff, true)?;
            let field = TriplaneField { triplane: &tri, mlp: &model.nerf };
            let cfg = RenderConfig { width: 16, height: 16, n_samples: 24, stratified: false };
            let pred = volume_render(&field, &r.views[r.back_index].1.pose, &cfg, None)?;
            let gt = r.views[r.back_index].0.resize_square_white(16);
            psnr(&ImageBuf::from_tensor(&pred)?, &gt)
        })
        .unwrap();
    }
    println!("cross-scene add {:.3}", cross / recs.len() as f64);
    // Triplane sensitivity: relative L2 distance between triplanes decoded
    // from two different scenes' front images.
    no_grad(|| {
        let a = recs[0].views[recs[0].front_index].0.to_tensor::<f32>();
        let b = recs[1].views[recs[1].front_index].0.to_tensor::<f32>();
        let ta = reconstruct(&model, &a, &a, FusionMode::Add, ff, true)?;
        let tb = reconstruct(&model, &b, &b, FusionMode::Add, ff, true)?;
        for p in 0..3 {
            let va = ta.planes[p].to_vec();
            let vb = tb.planes[p].to_vec();
            let diff: f32 = va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
            let norm: f32 = va.iter().map(|x| x * x).sum::<f32>().sqrt();
            println!("plane {p}: |tA-tB|/|tA| = {:.6}  |tA| = {:.3}", diff / norm, norm);
        }
        Ok::<(), dualrec::Error>(())
    })
    .unwrap();
    println!("dual   ff add  {:.3}", back_psnr(&model, &recs, true, FusionMode::Add, ff));
    println!("single ff add  {:.3}", back_psnr(&model, &recs, false, FusionMode::Add, ff));
    println!("dual   fb add  {:.3}", back_psnr(&model, &recs, true, FusionMode::Add, ExtrinsicScheme::FrontBack));
    println!("dual   bb add  {:.3}", back_psnr(&model, &recs, true, FusionMode::Add, ExtrinsicScheme::BackBack));
    println!("dual   ff vpca {:.3}", back_psnr(&model, &recs, true, FusionMode::Vpca, ff));
}
