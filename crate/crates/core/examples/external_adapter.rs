//! Drive an external program as the simulator. The program here is a shell
//! script evaluating a quadratic; any executable that reads the input file and
//! writes the output file works the same way.

use histmatch::simulators::{ExternalConfig, ExternalSimulator, Simulator};
use histmatch::space::{ParameterDef, ParameterSpace};

const SCRIPT: &str = r#"#!/bin/sh
# input lines look like `name = value`
a=$(sed -n 's/^a = //p' "$1")
b=$(sed -n 's/^b = //p' "$1")
awk -v a="$a" -v b="$b" 'BEGIN { printf "%.17g %.17g %.17g\n", a*a + b, a - b, 7 }' > "$2"
"#;

fn main() -> histmatch::error::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let script = tmp.path().join("model.sh");
    std::fs::write(&script, SCRIPT).expect("write script");

    let space = ParameterSpace::new(vec![ParameterDef::new("a", 0.0, 2.0), ParameterDef::new("b", -5.0, 5.0)])?;
    let config = ExternalConfig {
        command: "sh".into(),
        args: vec![script.display().to_string(), "{input}".into(), "{output}".into()],
        input_file: "input.txt".into(),
        output_file: "output.txt".into(),
        columns: vec![0, 1],
        timeout_secs: 10.0,
        labels: vec!["a2_plus_b".into(), "a_minus_b".into()],
    };
    let sim = ExternalSimulator::new(config, space)?;
    for u in [[-1.0, -1.0], [0.0, 0.0], [1.0, 0.5]] {
        match sim.run(&u) {
            Ok(f) => println!("unit {u:?} -> {f:?}"),
            Err(e) => println!("unit {u:?} failed ({}): {e}", e.kind()),
        }
    }
    Ok(())
}
