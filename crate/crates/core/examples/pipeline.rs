//! Run every stage on a tiny configuration twice; the second pass is served
//! from the stage cache.

use lad::config::RunConfig;
use lad::pipeline::run_pipeline;

const TINY: &str = include_str!("../../../configs/tiny.toml");

fn main() -> anyhow::Result<()> {
    let root = std::env::args().nth(1).map(std::path::PathBuf::from);
    let tmp = tempfile::tempdir()?;
    let root = root.unwrap_or_else(|| tmp.path().to_path_buf());
    let config = RunConfig::from_toml(TINY)?;
    for pass in 1..=2 {
        let out = run_pipeline(&config, &root)?;
        let ran: Vec<&str> = out.stages.iter().filter(|s| s.1).map(|s| s.0).collect();
        println!("pass {pass}: ran {ran:?}");
        if pass == 2 {
            println!("{}", out.report.to_json()?);
        }
    }
    Ok(())
}
