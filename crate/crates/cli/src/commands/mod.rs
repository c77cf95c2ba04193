use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use subalign_core::{Error, SubDim};

use crate::failure::{CmdResult, Failure};

mod adapt;
mod data;
mod ensemble;

pub use adapt::{adapt, eval};
pub use data::{estimate_dim, gen_synth, train_source};
pub use ensemble::{build_ensemble, detect};

/// Reads a JSON config, falling back to the type's defaults without a path.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CmdResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(e).context(format!("parsing config {}", path.display())))
}

fn parse_sub_dim(raw: &str) -> CmdResult<SubDim> {
    raw.parse().map_err(Failure::from)
}

fn create_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| {
        Failure::from(Error::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn print_json(value: &impl serde::Serialize) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    print_text(&format!("{text}\n"))
}

/// Writes to stdout; a closed pipe on the reading end is not an error.
fn print_text(text: &str) -> CmdResult<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::data(e)),
        _ => Ok(()),
    }
}
