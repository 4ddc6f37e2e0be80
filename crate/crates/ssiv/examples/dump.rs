use ssiv::mc::{plurality_config, run_cell_stream};
use ssiv::{cim_select, SelectOptions, Vce, Method};

fn main() {
    let mut cfg = plurality_config(2000, 20240);
    cfg.seed = 777;
    let d = ssiv::generate(&cfg).unwrap();
    d.to_delimited("/tmp/one_dataset.csv", b',').unwrap();
    let opts = SelectOptions { vce: Vce::Homoskedastic, ..SelectOptions::default() };
    match cim_select(&d, &opts, 1.0) {
        Ok(sel) => {
            println!("rust cim invalid: {:?}", sel.invalid_set);
            for s in &sel.path {
                println!("  psi={:.4} invalid={:?} p={:.5}", s.tuning, s.invalid_set, s.p_value);
            }
        }
        Err(e) => println!("rust cim error: {e}"),
    }
    // Also dump the just-identified estimates and ses.
    let ce = ssiv::just_identified(&d, Vce::Homoskedastic).unwrap();
    for r in 0..10 {
        println!("combo {}: beta={:.6} se={:.6}", r, ce.betas[(r,0)], ce.ses.as_ref().unwrap()[(r,0)]);
    }
    let _ = run_cell_stream(&cfg, 1, &[Method::Cim], 20240, 0);
}
