use cra_core::autograd::gradcheck::{check_all_ops, TOLERANCE};
use cra_core::lwgc::check_gated_layers;
use cra_core::{CraError, Result};

pub fn run(seed: u64) -> Result<()> {
    let mut reports = check_all_ops(seed)?;
    reports.extend(check_gated_layers(seed)?);
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:width$}  {:.3e}  {verdict}", r.name, r.max_rel_error);
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} checks, max relative error {worst:.3e} (tolerance {TOLERANCE:.0e})",
        reports.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CraError::Invariant(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
