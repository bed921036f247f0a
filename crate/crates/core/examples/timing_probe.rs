// scratch debug probe
use tsrlab_core::config::load_checkpoint;
use tsrlab_core::dataset;
use tsrlab_core::infer::infer_table;
use tsrlab_core::model::refdet::nms_and_select;
use tsrlab_core::train::{prepare_work_sample, x_tau_feature};
use tsrlab_nn::Tape;

fn main() {
    let (model, run) = load_checkpoint(std::path::Path::new("/tmp/run1c/model.ckpt")).unwrap();
    let samples = dataset::load_dataset(std::path::Path::new("/tmp/ds1")).unwrap();
    let s = &samples[0];
    println!("image {}x{}  gt: {} row seps, {} col seps", s.image.w, s.image.h,
        s.gt_row_seps.len(), s.gt_col_seps.len());
    let ws = prepare_work_sample(s, 160).unwrap();
    let (pw, ph) = ws.frame;
    println!("train frame {:?}", ws.frame);

    // training-style forward
    let mut t = Tape::new();
    let img = t.constant(ws.image.clone());
    let p2 = model.backbone.forward(&mut t, &model.store, img).unwrap();
    for (name, branch, p2n, frame, gt) in [
        ("row", &model.row_branch, p2, (pw, ph), &ws.row_seps),
        ("col", &model.col_branch, 0, (ph, pw), &ws.col_seps_t),
    ] {
        let p2_axis = if name == "col" { t.transpose_hw(p2) } else { p2n };
        let e = branch.scnn.forward(&mut t, &model.store, p2_axis);
        let e1 = branch.proj_ref.forward(&mut t, &model.store, e);
        let scores = branch.ref_head
            .score_reference_column(&mut t, &model.store, e1, x_tau_feature(frame.0)).unwrap();
        let sv = t.value(scores).data().to_vec();
        let sel = nms_and_select(&sv, 7, 100, 0.05);
        println!("{name}: refs {:?}", sel.iter().map(|&(i, s)| (i, (s*100.0).round()/100.0)).collect::<Vec<_>>());
        let e2 = branch.proj_attn.forward(&mut t, &model.store, e);
        let refs: Vec<usize> = sel.iter().map(|&(i, _)| i).collect();
        let dec = branch.decoder.decode(&mut t, &model.store, e2, &refs, (frame.0 as f64, frame.1 as f64), None);
        let seps = branch.decoder.final_separators(&t, &dec, 0.0);
        for (j, sp) in seps.iter().enumerate() {
            let mid = frame.0 as f64 / 2.0;
            println!("  sep{j} conf {:.3} center@mid {:.1} top {:.1} bot {:.1}",
                sp.confidence, sp.center.eval(mid), sp.top.eval(mid), sp.bottom.eval(mid));
        }
        for g in gt {
            let mid = frame.0 as f64 / 2.0;
            println!("  GT   center@mid {:.1} top {:.1} bot {:.1}", g.center.eval(mid), g.top.eval(mid), g.bottom.eval(mid));
        }
    }

    // inference path
    let out = infer_table(&model, &s.image, 331).unwrap();
    println!("infer: {} row seps, {} col seps, grid {}x{}",
        out.row_seps.len(), out.col_seps.len(), out.grid.n_rows, out.grid.n_cols);
    for sp in &out.row_seps.separators {
        println!("  infer row sep conf {:.3} center@mid {:.1}", sp.confidence, sp.center.eval(s.image.w as f64/2.0));
    }
    for g in &s.gt_row_seps.separators {
        println!("  GT    row sep center@mid {:.1}", g.center.eval(s.image.w as f64/2.0));
    }
    for sp in &out.col_seps.separators {
        println!("  infer col sep conf {:.3} center@mid {:.1}", sp.confidence, sp.center.eval(s.image.h as f64/2.0));
    }
    for g in &s.gt_col_seps.separators {
        println!("  GT    col sep center@mid {:.1}", g.center.eval(s.image.h as f64/2.0));
    }
}
