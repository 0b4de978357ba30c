//! Prints one PASS/FAIL line per acceptance criterion at full scale.

use ttamon::acceptance::{Scale, Suite};

fn main() {
    let verdicts = Suite::new(Scale::FULL)
        .run_all(|v| println!("{v}"))
        .expect("acceptance suite runs");
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        verdicts.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
