// SPDX-License-Identifier: Apache-2.0

//! Writes content to `<directory>/<name>`. The bytes go to a hidden temp
//! file first and are then hard-linked into place, so a reader never sees a
//! partial file and an existing name is never replaced.

use std::fs::{self, File};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{eval, BATCH};
use crate::engine::processor::{
    compile_property, ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties,
    PropertyDescriptor,
};
use crate::engine::session::ProcessSession;
use crate::expr::CompiledExpression;
use crate::model::rel;

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "PutFileStore",
        relationships: vec![rel::SUCCESS, rel::FAILURE],
        properties: vec![
            PropertyDescriptor::required("directory"),
            PropertyDescriptor::optional("filename_expression", Some("${filename}")).expression(),
        ],
        dynamic_relationships: false,
        trigger_when_empty: false,
    }
}

pub struct PutFileStore {
    directory: PathBuf,
    name: CompiledExpression,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    let directory = props.get("directory").cloned().unwrap_or_default();
    if directory.is_empty() {
        return Err(ConfigError::new("directory is required"));
    }
    Ok(Arc::new(PutFileStore {
        directory: PathBuf::from(directory),
        name: compile_property(props, "filename_expression")?
            .unwrap_or_else(|| crate::expr::parse("${filename}").expect("default parses")),
    }))
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains(['/', '\\', '\0'])
}

/// Writes `bytes` to `dir/name` unless it exists. Returns false if the name
/// was taken.
pub fn write_no_clobber(dir: &Path, name: &str, bytes: &[u8], tmp_tag: &str) -> std::io::Result<bool> {
    let tmp = dir.join(format!(".{name}.{tmp_tag}.tmp"));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
        match fs::hard_link(&tmp, dir.join(name)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Ok(false),
            Err(e) => Err(e),
        }
    })();
    let _ = fs::remove_file(&tmp);
    result
}

impl Processor for PutFileStore {
    fn on_scheduled(&self, _ctx: &ProcessContext) -> Result<(), ProcessError> {
        fs::create_dir_all(&self.directory)
            .map_err(|e| ProcessError::other(format!("{}: {e}", self.directory.display())))
    }

    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let now = ctx.now();
        for ff in session.get_batch(BATCH) {
            let name = match eval(&self.name, &ff, now) {
                Ok(n) if valid_name(&n) => n,
                _ => {
                    session.transfer(&ff, rel::FAILURE)?;
                    continue;
                }
            };
            let bytes = session.read(&ff)?;
            match write_no_clobber(&self.directory, &name, &bytes, &ff.uuid) {
                Ok(true) => {
                    let path = fs::canonicalize(self.directory.join(&name)).unwrap_or_else(|_| self.directory.join(&name));
                    session.send(&ff, &format!("file://{}", path.display()))?;
                    session.transfer(&ff, rel::SUCCESS)?;
                }
                Ok(false) => {
                    log::info!("{name} already exists in {}", self.directory.display());
                    session.transfer(&ff, rel::FAILURE)?;
                }
                Err(e) => {
                    log::warn!("writing {name}: {e}");
                    session.transfer(&ff, rel::FAILURE)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_clobber() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_no_clobber(dir.path(), "a", b"one", "x").unwrap());
        assert!(!write_no_clobber(dir.path(), "a", b"two", "y").unwrap());
        assert_eq!(fs::read(dir.path().join("a")).unwrap(), b"one");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn names() {
        assert!(valid_name("0b8e-uuid"));
        for bad in ["", ".", "..", "a/b", "a\\b"] {
            assert!(!valid_name(bad));
        }
    }
}
