use super::{write_file, Dataset, ExperimentError, RunConfig, DATA_DIR};
use crate::metrics::{audit_corpus, AuditItem, AuditReport};
use crate::task::LabeledExample;

/// `audit`: leakage and diversity audit of both split variants, written to
/// `<out_dir>/audit/audit.{md,csv,json}`.
pub fn cmd_audit(cfg: &RunConfig) -> Result<AuditReport, ExperimentError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let data = Dataset::load(&cfg.out_dir.join(DATA_DIR), &cfg)?;
    let items = |v: &[LabeledExample]| -> Vec<AuditItem> {
        v.iter().map(|e| AuditItem::from_example(&data.spec, e)).collect()
    };
    let columns = [
        ("Standard", "instance", &data.standard),
        ("New-Problems", "problem id", &data.new_problems),
    ]
    .into_iter()
    .map(|(name, key, s)| {
        (
            name.to_string(),
            key.to_string(),
            audit_corpus(&items(&s.train), &items(&s.test), &cfg.eval.audit),
        )
    })
    .collect();
    let report = AuditReport { columns };
    let dir = cfg.out_dir.join("audit");
    write_file(&dir.join("audit.md"), report.to_markdown())?;
    write_file(&dir.join("audit.csv"), report.to_csv())?;
    write_file(
        &dir.join("audit.json"),
        serde_json::to_string_pretty(&report).expect("audit serializes") + "\n",
    )?;
    Ok(report)
}
