//! Feature-loss local search over the transform exponent N.

use nbc::compensation::Storage;
use nbc::harness::{search_n, HarnessConfig, Workload};
use nbc::{fls_search, FlsConfig};

fn main() -> nbc::Result<()> {
    // A synthetic landscape first, to show the exploration order.
    let cfg = FlsConfig::default();
    let res = fls_search(&cfg, |n| Ok((n - 3.0) * (n - 3.0)))?;
    println!(
        "explored {:?}, chose {} ({})",
        res.explored(),
        res.chosen_n,
        res.terminated_by.name()
    );

    // Two valleys: the search settles in the one next to the start.
    let res = fls_search(&cfg, |n| {
        Ok(if n > -3.0 {
            (n - 3.0).powi(2)
        } else {
            (n + 8.0).powi(2) - 10.0
        })
    })?;
    println!(
        "two valleys: chose {} after {} evaluations",
        res.chosen_n, res.evaluations
    );

    // Then the real thing on a small harness workload.
    let workload = Workload::generate(&HarnessConfig {
        d: 32,
        h: 64,
        n_samples: 256,
        ..HarnessConfig::default()
    })?;
    let qmodel = workload.quantize(4, 4)?;
    let (res, modules) = search_n(&workload, &qmodel, &cfg, 0.0, Storage::F16)?;
    for (n, loss) in res.sorted_history() {
        println!("N {n:>5}  hold-out loss {loss:.6}");
    }
    println!("chosen N = {} for {} blocks", res.chosen_n, modules.len());
    Ok(())
}
