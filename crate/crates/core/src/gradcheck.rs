//! Central finite-difference gradient checking used across the test suites.

use crate::tensor::{Tape, Tensor};

/// Compare analytic gradients against central finite differences for a
/// scalar-valued function of several leaf tensors.
///
/// Returns the worst relative error max(|a - n|) / max(1, |a|, |n|) over all
/// components of all inputs. Perturbation is 1e-5.
pub fn gradcheck(
    inputs: &[(Vec<f64>, Vec<usize>)],
    f: impl Fn(&mut Tape, &[Tensor]) -> Tensor,
) -> f64 {
    gradcheck_eps(inputs, 1e-5, f)
}

pub fn gradcheck_eps(
    inputs: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    f: impl Fn(&mut Tape, &[Tensor]) -> Tensor,
) -> f64 {
    let eval = |datas: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = datas
            .iter()
            .zip(inputs)
            .map(|(d, (_, shape))| tape.leaf(d.clone(), shape.clone()))
            .collect();
        let out = f(&mut tape, &leaves);
        assert_eq!(out.len(), 1, "gradcheck target must be scalar");
        let gs = tape.backward(&out);
        let grads = leaves
            .iter()
            .map(|l| gs.get(l.id()).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; l.len()]))
            .collect();
        (out.scalar(), grads)
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let (_, analytic) = eval(&base);

    let mut worst: f64 = 0.0;
    for (ti, (data, _)) in inputs.iter().enumerate() {
        for k in 0..data.len() {
            let mut plus = base.clone();
            plus[ti][k] += h;
            let mut minus = base.clone();
            minus[ti][k] -= h;
            let fp = eval(&plus).0;
            let fm = eval(&minus).0;
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic[ti][k];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}
