//! Coefficient schedules and the guidance losses on small hand-made batches.

use mentor_drive::guidance::{
    awag_advantage, awag_loss, awag_weight, cosine_coeff, critic_total, td_loss, vmr_loss, GuidanceConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = GuidanceConfig::default();
    let horizon = 10_000;
    println!("{:>6} {:>8} {:>8} {:>8} {:>8}", "step", "vmr k=1", "vmr k=2", "awag k=3", "const");
    for step in (0..=horizon).step_by(1000) {
        println!(
            "{step:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            cosine_coeff(step, 1.0, 0.0, horizon, 1.0)?,
            cosine_coeff(step, g.vmr_start, g.vmr_end, horizon, g.vmr_exponent)?,
            cosine_coeff(step, g.awag_start, g.awag_end, horizon, g.awag_exponent)?,
            GuidanceConfig { awag_decay_enabled: false, ..g.clone() }.awag_coeff(step, horizon),
        );
    }

    // Critic side: one sample with feedback, one without.
    let q_data = [&[1.0, 0.4][..], &[0.9, 0.5][..]];
    let q_vlm = [&[1.2, 3.0][..], &[1.1, 2.0][..]];
    let mask = [1.0, 0.0];
    let td = td_loss(q_data, &[1.1, 0.3]);
    let vmr = vmr_loss(q_vlm, q_data, &mask, g.delta);
    println!("\nL_td {td:.4}  L_vmr {vmr:.4}  L_critic at step 0 {:.4}", critic_total(td, vmr, 1.0));

    // Actor side: advantages, gates and capped weights.
    let pairs = [((2.0, 1.8), (1.0, 1.5)), ((0.5, 0.7), (0.9, 0.6)), ((30.0, 25.0), (1.0, 1.0))];
    let (mut gates, mut weights) = (Vec::new(), Vec::new());
    for (vlm, pi) in pairs {
        let (a, gate) = awag_advantage(vlm, pi);
        let w = awag_weight(a, g.beta, g.w_max);
        println!("q_vlm {vlm:?} q_pi {pi:?} -> A {a:+.2} gate {gate} w {w:.3}");
        gates.push(gate);
        weights.push(w);
    }
    let loss = awag_loss(&[1.0, 1.0, 1.0], &gates, &weights, &[-1.2, -0.4, -2.0]);
    println!("L_awag {loss:.4}");
    Ok(())
}
