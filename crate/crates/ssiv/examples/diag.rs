use ssiv::mc::{plurality_config, run_cell_stream};
use ssiv::Method;

fn main() {
    for n in [2000usize, 2400, 3000, 3200] {
        let cfg = plurality_config(n, 20240);
        let out = run_cell_stream(&cfg, 300, &[Method::Oracle, Method::Cim, Method::Alasso], 20240, n as u64).unwrap();
        let or = &out[0].1;
        let cim = &out[1].1;
        let al = &out[2].1;
        println!(
            "n={n}: oracle mad={:.5} | cim mad={:.5} ratio={:.3} freq={:.3} ninv={:.2} fail={} | alasso freq={:.3} ninv={:.2} fail={}",
            or.mad, cim.mad, cim.mad / or.mad, cim.freq_all_invalid, cim.mean_n_invalid, cim.failures,
            al.freq_all_invalid, al.mean_n_invalid, al.failures
        );
    }
}
