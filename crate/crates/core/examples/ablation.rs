//! A reduced-scale ablation sweep: `-- <groups|init|norm> <seeds>`.

use sge::experiment::{mean_std, run_ablation, AblationAxis, Attention, ToyConfig};

fn main() -> sge::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis = match args.next().as_deref() {
        Some("groups") => AblationAxis::Groups,
        Some("norm") => AblationAxis::Norm,
        _ => AblationAxis::Init,
    };
    let seeds = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut base = ToyConfig::new(Attention::Sge, 0).with_epochs(4);
    base.train_size = 1000;
    base.test_size = 500;

    let rows = run_ablation(axis, seeds, &base)?;
    let mut settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    settings.dedup();
    for s in settings {
        let acc: Vec<f64> = rows.iter().filter(|r| r.setting == s).map(|r| r.test_accuracy).collect();
        let (mean, std) = mean_std(&acc);
        println!("{s:<20} {acc:.3?} mean {mean:.3} std {std:.3}");
    }
    Ok(())
}
