//! Cohort statistics on plain numbers.

use sct_sentinel::stats::{linear_fit, pearson, student_t_two_sided_p, welch_t_test};

fn main() -> Result<(), sct_sentinel::Error> {
    let rt = [131.0, 140.2, 127.5, 138.9, 135.3, 129.8, 142.1, 134.0];
    let oasis = [198.4, 205.1, 190.7, 214.9, 201.3, 196.0];
    let w = welch_t_test(&rt, &oasis)?;
    println!("welch t={:.3} df={:.2} p={:.3e}", w.t, w.df, w.p_two_sided);
    println!("P(|T|>2.0, df=10) = {:.6}", student_t_two_sided_p(2.0, 10.0));

    let u = [120.0, 128.0, 133.0, 141.0, 150.0];
    let mae = [52.0, 55.5, 58.0, 61.0, 66.5];
    let fit = linear_fit(&u, &mae)?;
    println!("r={:.4} slope={:.4} intercept={:.3}", pearson(&u, &mae)?, fit.slope, fit.intercept);
    Ok(())
}
