use std::process::ExitCode;

fn main() -> ExitCode {
    sdda_cli::tune_allocator();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match sdda_cli::run(&argv) {
        Ok(manifest) => {
            for (name, value) in &manifest.metrics {
                println!("{name} = {value}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(clap_err) => {
                let _ = clap_err.print();
                ExitCode::from(if clap_err.use_stderr() { 2 } else { 0 })
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
    }
}
