//! `--set path.to.field=value` overrides applied to the parsed TOML document.

use anyhow::{anyhow, bail, Result};
use toml::{Table, Value};

/// Parses `value` as a TOML scalar or array; anything else is taken as a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn apply(doc: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override key {path:?} is malformed");
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut table = doc;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| anyhow!("override {path:?}: {k} is not a table"))?;
    }
    let value = parse_value(raw.trim());
    if let Some(old) = table.get(*last) {
        if old.is_table() {
            bail!("override {path:?} would replace a whole table");
        }
    }
    table.insert(last.to_string(), value);
    Ok(())
}
