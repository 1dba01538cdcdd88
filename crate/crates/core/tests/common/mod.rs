//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod dd;

use taml::metrics::{TopN, TrialRecord};

pub fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_sem(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Top-N by full sort: successful records with `trial <= up_to`, ordered by
/// validation reward descending and trial index ascending.
pub fn brute_top_n(records: &[TrialRecord], n: usize, up_to: Option<u64>) -> Option<TopN> {
    let mut ok: Vec<&TrialRecord> = records
        .iter()
        .filter(|r| r.val.is_some() && r.test.is_some())
        .filter(|r| up_to.is_none_or(|t| r.trial <= t))
        .collect();
    if ok.is_empty() {
        return None;
    }
    ok.sort_by(|a, b| b.val.unwrap().total_cmp(&a.val.unwrap()).then(a.trial.cmp(&b.trial)));
    ok.truncate(n);
    let k = ok.len() as f64;
    Some(TopN {
        val: ok.iter().map(|r| r.val.unwrap()).sum::<f64>() / k,
        test: ok.iter().map(|r| r.test.unwrap()).sum::<f64>() / k,
    })
}
