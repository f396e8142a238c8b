//! Write a synthetic weather-history CSV so the CLI can be tried without the
//! real dataset: `cargo run -p bttf-core --example demo_data -- demo.csv 450 77`

use std::path::Path;

use bttf_core::dataio::{synthetic_weather, write_kaggle_csv};

fn main() -> bttf_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "demo.csv".into());
    let days: usize = args.next().map(|s| s.parse().expect("days")).unwrap_or(450);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(77);
    let table = synthetic_weather(days, seed)?;
    write_kaggle_csv(Path::new(&path), &table)?;
    println!("wrote {} hourly rows to {path}", table.n_rows());
    Ok(())
}
