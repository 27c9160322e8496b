use std::process::ExitCode;

use varflow_cli::{command, config_from_matches, run};

fn main() -> ExitCode {
    let matches = command().get_matches();
    let outcome = config_from_matches(&matches).and_then(|cfg| run(&cfg).map(|s| (cfg, s)));
    match outcome {
        Ok((cfg, summary)) => {
            let r = &summary.result;
            println!("flow {}x{} in {:.2}s -> {}", r.width, r.height, r.seconds, cfg.out_flo.display());
            if let Some(last) = r.increments.last() {
                println!("iterations {} final increment {:e}", last.iteration, last.increment);
            }
            for (label, e) in &summary.metrics {
                println!("{label}: AAE {:.4} deg, EE {:.4} px over {} pixels", e.aae_deg, e.ee_px, e.valid_pixels);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
