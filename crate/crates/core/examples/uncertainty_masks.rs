//! Test-time perception on a hand-made score distribution: sampled mean and
//! uncertainty maps, their binarized masks and the fused keep-mask.
//!
//! cargo run --example uncertainty_masks

use ndarray::Array1;

use uranet::uiapm::{perceive, ScoreDistribution};

fn row(name: &str, values: impl Iterator<Item = String>) {
    println!("{name:>8}: {}", values.collect::<Vec<_>>().join(" "));
}

fn main() -> anyhow::Result<()> {
    // 4x4 tokens: a confident anomaly in the corner, a doubtful patch in the middle.
    let mut u = Array1::from_elem(16, -2.0);
    let mut sigma = Array1::from_elem(16, 0.1);
    u[0] = 3.0;
    for i in [5, 6, 9, 10] {
        u[i] = -0.5;
        sigma[i] = 1.5;
    }
    let dist = ScoreDistribution::new(u, sigma)?;
    let fusion = perceive(&dist, 16, 0.5, 7)?;
    let mark = |keep: &[bool]| keep.iter().map(|&k| if k { "." } else { "x" }.to_string()).collect::<Vec<_>>();
    row("U", fusion.u.iter().map(|v| format!("{v:.2}")));
    row("V", fusion.v.iter().map(|v| format!("{v:.2}")));
    row("M_U", mark(fusion.m_u.keep()).into_iter());
    row("M_V", mark(fusion.m_v.keep()).into_iter());
    row("M_final", mark(fusion.m_final.keep()).into_iter());
    println!("masked fraction {:.3}", fusion.m_final.masked_fraction());
    Ok(())
}
