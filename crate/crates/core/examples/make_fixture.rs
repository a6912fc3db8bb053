//! Regenerates `fixtures/reference_icm.csv` from the five-population
//! reference ICM.

use std::path::PathBuf;

use mortality_gp::synthetic::reference_icm;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/reference_icm.csv")
    });
    let ds = reference_icm(1.0)?.simulate(0)?;
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(["cause", "age_group", "year", "deaths", "exposure"])?;
    for c in ds.cells() {
        let lo = c.age as i64 - 2;
        w.write_record([
            ds.schema().label(&c.population),
            format!("{lo}-{}", lo + 4),
            c.year.to_string(),
            format!("{:.6}", c.deaths),
            c.exposure.to_string(),
        ])?;
    }
    w.flush()?;
    println!("wrote {} cells to {}", ds.len(), out.display());
    Ok(())
}
