//! JSON and CSV serialization of results.
//!
//! Every float is written with 17 significant digits so that repeated runs
//! can be compared byte for byte.

use std::collections::BTreeMap;
use std::io::Write;

use serde_json::{Map, Number, Value};

use crate::engine::SynthResult;
use crate::error::{Error, Result};
use crate::inference::{p_value, PlaceboEnsemble, SweepRow};
use crate::logistic::{BinSummary, LogisticFit, Quadrant, RegressionLine};
use crate::panel::UnitId;

/// Scientific notation with 17 significant digits. Non-finite values print as
/// `NaN`, `inf` or `-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// JSON number with 17 significant digits, or null when not finite.
pub fn json_f64(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    Value::Number(fmt_f64(x).parse::<Number>().expect("formatted float is a JSON number"))
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn to_pretty(v: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

pub fn synth_result_json(r: &SynthResult) -> Value {
    let mut w = Map::new();
    for (d, x) in r.donors.iter().zip(r.w_star.as_slice()) {
        w.insert(d.to_string(), json_f64(*x));
    }
    let mut v = Map::new();
    for (n, x) in r.predictor_names.iter().zip(&r.v_star) {
        v.insert(n.clone(), json_f64(*x));
    }
    let dated = |xs: &[f64]| -> Value {
        Value::Array(
            r.dates
                .iter()
                .zip(xs)
                .map(|(d, x)| {
                    let mut m = Map::new();
                    m.insert("date".into(), Value::String(d.to_string()));
                    m.insert("value".into(), json_f64(*x));
                    Value::Object(m)
                })
                .collect(),
        )
    };
    let mut mspe = Map::new();
    mspe.insert("pre".into(), json_f64(r.pre_mspe));
    mspe.insert("train".into(), json_f64(r.train_mspe));
    mspe.insert("validation".into(), json_f64(r.validation_mspe));

    let mut root = Map::new();
    root.insert("treated".into(), Value::String(r.treated.to_string()));
    root.insert("pre_len".into(), Value::from(r.pre_len));
    root.insert("train".into(), Value::from(vec![r.train.start, r.train.end]));
    root.insert("validation".into(), Value::from(vec![r.validation.start, r.validation.end]));
    root.insert("converged".into(), Value::Bool(r.converged));
    root.insert("objective".into(), json_f64(r.objective));
    root.insert("w".into(), Value::Object(w));
    root.insert("v".into(), Value::Object(v));
    root.insert("synthetic".into(), dated(&r.synthetic));
    root.insert("gap".into(), dated(&r.gap));
    root.insert("mspe".into(), Value::Object(mspe));
    Value::Object(root)
}

pub fn write_synth_json<W: Write>(r: &SynthResult, mut out: W) -> Result<()> {
    out.write_all(to_pretty(&synth_result_json(r))?.as_bytes())?;
    Ok(())
}

/// `date,actual,synthetic,gap`
pub fn write_curve_csv<W: Write>(r: &SynthResult, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["date", "actual", "synthetic", "gap"])?;
    for i in 0..r.dates.len() {
        w.write_record([
            r.dates[i].to_string(),
            fmt_f64(r.actual[i]),
            fmt_f64(r.synthetic[i]),
            fmt_f64(r.gap[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn ensemble_json(e: &PlaceboEnsemble) -> Value {
    let entries = e
        .entries
        .iter()
        .map(|x| {
            let mut m = Map::new();
            m.insert("unit".into(), Value::String(x.unit.to_string()));
            m.insert("r".into(), json_f64(x.r));
            m.insert("R_pre".into(), json_f64(x.r_pre));
            m.insert("R_post".into(), json_f64(x.r_post));
            m.insert("skipped".into(), x.skipped.clone().map_or(Value::Null, Value::String));
            m.insert("floored".into(), Value::Bool(x.floored));
            Value::Object(m)
        })
        .collect();
    let mut root = Map::new();
    root.insert("treated".into(), Value::String(e.treated.to_string()));
    root.insert("p_value".into(), json_f64(p_value(e)));
    root.insert("n_valid".into(), Value::from(e.n_valid()));
    root.insert("entries".into(), Value::Array(entries));
    Value::Object(root)
}

pub fn write_ensemble_json<W: Write>(e: &PlaceboEnsemble, mut out: W) -> Result<()> {
    out.write_all(to_pretty(&ensemble_json(e))?.as_bytes())?;
    Ok(())
}

/// One row per ensemble member: `unit,r,R_pre,R_post,treated,skipped`, then the
/// p-value of the treated unit with its denominator.
pub fn write_pvalues_csv<W: Write>(e: &PlaceboEnsemble, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["unit", "r", "R_pre", "R_post", "treated", "skipped", "p_value", "denominator"])?;
    let p = fmt_f64(p_value(e));
    let n = e.n_valid().to_string();
    for (i, x) in e.entries.iter().enumerate() {
        let treated = i == e.treated_index;
        w.write_record([
            x.unit.to_string(),
            fmt_f64(x.r),
            fmt_f64(x.r_pre),
            fmt_f64(x.r_post),
            treated.to_string(),
            x.skipped.clone().unwrap_or_default(),
            if treated { p.clone() } else { String::new() },
            if treated { n.clone() } else { String::new() },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `t_fit,pre_deviation,p_value,error`
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["t_fit", "pre_deviation", "p_value", "error"])?;
    for r in rows {
        w.write_record([
            r.t_fit.to_string(),
            opt_f64(r.pre_deviation),
            opt_f64(r.p_value),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `unit,K,nu,p0,sse,quadrant`
pub fn write_fits_csv<W: Write>(
    fits: &BTreeMap<UnitId, LogisticFit>,
    quadrants: &BTreeMap<UnitId, Quadrant>,
    out: W,
) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["unit", "K", "nu", "p0", "sse", "quadrant"])?;
    for (u, f) in fits {
        w.write_record([
            u.to_string(),
            fmt_f64(f.k),
            fmt_f64(f.nu),
            fmt_f64(f.p0),
            fmt_f64(f.sse),
            quadrants.get(u).map(|q| q.as_str().to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `unit,reason`
pub fn write_failures_csv<W: Write>(failures: &BTreeMap<UnitId, String>, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["unit", "reason"])?;
    for (u, reason) in failures {
        w.write_record([u.as_str(), reason.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// `theme,param,slope,intercept,corr`
pub fn write_regression_csv<W: Write>(rows: &[(String, String, RegressionLine)], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["theme", "param", "slope", "intercept", "corr"])?;
    for (theme, param, l) in rows {
        w.write_record([theme.clone(), param.clone(), fmt_f64(l.slope), fmt_f64(l.intercept), fmt_f64(l.corr)])?;
    }
    w.flush()?;
    Ok(())
}

/// `theme,param,bin,count,mean,std`
pub fn write_deciles_csv<W: Write>(rows: &[(String, String, Vec<BinSummary>)], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["theme", "param", "bin", "count", "mean", "std"])?;
    for (theme, param, bins) in rows {
        for b in bins {
            w.write_record([
                theme.clone(),
                param.clone(),
                b.bin.to_string(),
                b.count.to_string(),
                fmt_f64(b.mean),
                fmt_f64(b.std),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
