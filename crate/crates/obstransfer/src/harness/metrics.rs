use super::HarnessError;

/// Column order of every per-run metrics file. `wallclock_s` is always
/// written empty so reruns of the same (config, seed) stay byte-identical.
pub const METRICS_HEADER: &str =
    "step,episode,eval_return_mean,eval_return_std,loss_base,loss_P,loss_R,epsilon,wallclock_s";

/// One evaluation-point record. `None` means "not computed for this run
/// mode" and is written as an empty field, distinct from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episode: usize,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub loss_base: Option<f64>,
    pub loss_p: Option<f64>,
    pub loss_r: Option<f64>,
    pub epsilon: Option<f64>,
}

fn field(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Serializes rows under the fixed header. Rejects non-finite values and
/// non-monotone step columns rather than writing a corrupt file.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<String, HarnessError> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let mut last_step = None;
    for row in rows {
        if let Some(prev) = last_step {
            if row.step <= prev {
                return Err(HarnessError::Metrics(format!(
                    "step {} after step {prev} is not increasing",
                    row.step
                )));
            }
        }
        last_step = Some(row.step);
        let values = [
            row.eval_return_mean,
            row.eval_return_std,
            row.loss_base,
            row.loss_p,
            row.loss_r,
            row.epsilon,
        ];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(HarnessError::Metrics(format!(
                "non-finite value at step {}",
                row.step
            )));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},\n",
            row.step,
            row.episode,
            field(row.eval_return_mean),
            field(row.eval_return_std),
            field(row.loss_base),
            field(row.loss_p),
            field(row.loss_r),
            field(row.epsilon),
        ));
    }
    Ok(out)
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(HarnessError::Metrics(format!(
                "bad header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(HarnessError::Metrics(format!(
                "line {}: expected 9 columns, got {}",
                i + 2,
                cols.len()
            )));
        }
        let int = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| HarnessError::Metrics(format!("line {}: bad integer {t:?}", i + 2)))
        };
        let opt = |t: &str| -> Result<Option<f64>, HarnessError> {
            if t.is_empty() {
                Ok(None)
            } else {
                t.parse::<f64>().map(Some).map_err(|_| {
                    HarnessError::Metrics(format!("line {}: bad float {t:?}", i + 2))
                })
            }
        };
        rows.push(MetricsRow {
            step: int(cols[0])?,
            episode: int(cols[1])?,
            eval_return_mean: opt(cols[2])?,
            eval_return_std: opt(cols[3])?,
            loss_base: opt(cols[4])?,
            loss_p: opt(cols[5])?,
            loss_r: opt(cols[6])?,
            epsilon: opt(cols[7])?,
        });
    }
    Ok(rows)
}

/// Area under the learning curve: the sum of evaluation means.
pub fn auc(rows: &[MetricsRow]) -> f64 {
    rows.iter().filter_map(|r| r.eval_return_mean).sum()
}
