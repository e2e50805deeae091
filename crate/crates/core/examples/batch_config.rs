//! Drives the batch interface from code: parse flags, run, then replay the
//! written manifest and check the CSV comes back byte for byte.
//!
//! cargo run --release --example batch_config

use effdiff::cli::{manifest_path, parse_spec, run};

fn main() -> effdiff::error::Result<()> {
    let dir = std::env::temp_dir().join(format!("effdiff-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let out = dir.join("abc.csv");
    let flags = format!(
        "--kind simulate --flow abc --d0 0.01 --dt 0.05 --t-final 20 --particles 4000 --checkpoints 5 --out {}",
        out.display()
    );
    let args: Vec<String> = flags.split_whitespace().map(String::from).collect();
    let spec = parse_spec(&args)?;
    let manifest = run(&spec)?;
    println!("{}", std::fs::read_to_string(&out)?);
    println!("{}", manifest.render());

    let replay = dir.join("replay.csv");
    let args = vec![
        "--config".to_string(),
        manifest_path(&out).display().to_string(),
        "--out".to_string(),
        replay.display().to_string(),
    ];
    run(&parse_spec(&args)?)?;
    let same = std::fs::read(&out)? == std::fs::read(&replay)?;
    println!("replay identical: {same}");
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
