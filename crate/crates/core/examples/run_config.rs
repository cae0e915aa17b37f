//! Drive the command workflows from a TOML configuration, as the `flode`
//! binary does.

use flode::commands::{run, Command, Invocation};
use flode::io::RunConfig;

const CONFIG: &str = r#"
seed = 7
n_basis = 12
alpha_grid_points = 21
grid_size = 30

[simulate]
n_trials = 30
grid_size = 30
alpha = 4.0
"#;

fn main() -> flode::Result<()> {
    let config = RunConfig::from_toml(CONFIG)?;
    let out_dir = std::env::temp_dir().join("flode-run-config-example");
    let mut inv = Invocation {
        config,
        data: None,
        fit: None,
        out_dir: out_dir.clone(),
    };
    for path in run(Command::Simulate, &inv)? {
        println!("wrote {}", path.display());
    }
    inv.data = Some(out_dir.join("data.csv"));
    for path in run(Command::Fit, &inv)? {
        println!("wrote {}", path.display());
    }
    inv.fit = Some(out_dir.join("fit.json"));
    for path in run(Command::Surface, &inv)? {
        println!("wrote {}", path.display());
    }

    match RunConfig::from_toml("n_basis = 2") {
        Err(e) => println!("rejected config: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    Ok(())
}
