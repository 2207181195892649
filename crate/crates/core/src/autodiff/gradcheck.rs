use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DiffTensor, Graph};
use crate::error::{ensure, Error, Result};

/// Shape and values of one leaf handed to a grad-check builder.
#[derive(Clone, Debug)]
pub struct LeafSpec {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl LeafSpec {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        Self {
            shape: shape.to_vec(),
            values,
        }
    }

    /// Standard-normal values scaled by `scale`.
    pub fn random(shape: &[usize], scale: f64, seed: u64) -> Self {
        let n = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..n)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
            .collect::<Vec<f64>>();
        Self::new(shape, values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_leaf: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

const MAX_COORDS_PER_LEAF: usize = 256;

/// Compares reverse-mode gradients with central differences.
///
/// `build` receives fresh trainable leaves for `leaves` and must return a scalar.
/// At most 256 evenly spaced coordinates are probed per leaf; the relative error
/// uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(build: F, leaves: &[LeafSpec], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[DiffTensor]) -> Result<DiffTensor>,
{
    ensure!(
        (1e-7..=1e-3).contains(&eps),
        InvalidArgument,
        "finite-difference step {} outside [1e-7, 1e-3]",
        eps
    );
    let eval = |vals: &[Vec<f64>]| -> Result<(Graph, Vec<DiffTensor>, DiffTensor)> {
        let mut g = Graph::new();
        let ts = leaves
            .iter()
            .zip(vals)
            .map(|(l, v)| g.param(&l.shape, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &ts)?;
        ensure!(
            g.value(out).len() == 1,
            InvalidArgument,
            "grad_check builder must return a scalar, got shape {:?}",
            g.shape(out)
        );
        Ok((g, ts, out))
    };

    let mut vals: Vec<Vec<f64>> = leaves.iter().map(|l| l.values.clone()).collect();
    let (mut g, ts, out) = eval(&vals)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite("grad_check base evaluation".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ts.iter().map(|&t| g.grad_or_zeros(t)).collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_leaf: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for leaf in 0..leaves.len() {
        let n = vals[leaf].len();
        let count = n.min(MAX_COORDS_PER_LEAF);
        for j in 0..count {
            let idx = j * n / count;
            let orig = vals[leaf][idx];
            vals[leaf][idx] = orig + eps;
            let (gp, _, op) = eval(&vals)?;
            let fp = gp.scalar(op);
            vals[leaf][idx] = orig - eps;
            let (gm, _, om) = eval(&vals)?;
            let fm = gm.scalar(om);
            vals[leaf][idx] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check perturbation of leaf {} coordinate {}",
                    leaf, idx
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[leaf][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst_leaf: leaf,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// `Σ_i w_i x_i` with fixed pseudo-random weights, turning any tensor into a
/// scalar whose gradient is generic.
pub fn random_projection(g: &mut Graph, x: DiffTensor, seed: u64) -> Result<DiffTensor> {
    let spec = LeafSpec::random(g.shape(x), 1.0, seed);
    let w = g.constant(&spec.shape, spec.values)?;
    let h = g.hadamard(x, w)?;
    Ok(g.sum(h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let leaves = [LeafSpec::random(&[2, 5, 5], 1.0, 1), LeafSpec::random(&[3, 2, 3, 3], 0.5, 2)];
        // linear in the input only; the kernel enters bilinearly, so check with a frozen kernel
        let kernel = leaves[1].values.clone();
        let rep = grad_check(
            |g, ts| {
                let k = g.constant(&[3, 2, 3, 3], kernel.clone())?;
                let y = g.conv2d(ts[0], k, None, 1, 1)?;
                random_projection(g, y, 9)
            },
            &leaves[..1],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-9, "{:?}", rep);
    }

    #[test]
    fn sigmoid_of_conv_chain() {
        let leaves = [
            LeafSpec::random(&[2, 6, 6], 1.0, 3),
            LeafSpec::random(&[3, 2, 3, 3], 0.4, 4),
            LeafSpec::random(&[3], 0.1, 5),
        ];
        let rep = grad_check(
            |g, ts| {
                let y = g.conv2d(ts[0], ts[1], Some(ts[2]), 2, 1)?;
                let s = g.sigmoid(y);
                random_projection(g, s, 6)
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{:?}", rep);
    }

    #[test]
    fn sabotage_is_detected() {
        let leaves = [LeafSpec::random(&[8], 1.0, 7)];
        let rep = grad_check(
            |g, ts| {
                g.set_sabotage(true);
                let s = g.sigmoid(ts[0]);
                random_projection(g, s, 8)
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error > 1e-2);
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        let leaves = [LeafSpec::new(&[1], vec![1.0])];
        assert!(grad_check(|g, ts| Ok(g.sum(ts[0])), &leaves, 1e-2).is_err());
        let r = grad_check(
            |g, ts| {
                let s = g.scale(ts[0], f64::NAN);
                Ok(g.sum(s))
            },
            &leaves,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
