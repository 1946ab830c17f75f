//! Central moment discrepancy: distribution distance between batches of
//! features, summing the L2 gap of means and of central moments up to
//! order K, averaged over the three modality pairs (t,a), (t,v), (a,v).

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};

#[derive(Clone, Copy, Debug)]
pub struct CmdConfig {
    /// Highest moment order; >= 2.
    pub k: usize,
    /// Squash features through a sigmoid before the distance. Off by
    /// default; the raw constrained features are compared directly.
    pub sigmoid_squash: bool,
}

impl Default for CmdConfig {
    fn default() -> Self {
        CmdConfig {
            k: 5,
            sigmoid_squash: false,
        }
    }
}

fn check_sample(g: &Graph, x: VarId, what: &str) -> Result<(usize, usize)> {
    let t = g.value(x);
    if t.shape().len() != 2 {
        return Err(Error::invalid(format!("{what} must be a 2-D sample matrix")));
    }
    let (n, d) = (t.shape()[0], t.shape()[1]);
    if n < 2 {
        return Err(Error::invalid(format!(
            "{what} needs at least 2 samples, got {n}"
        )));
    }
    Ok((n, d))
}

/// Per-coordinate k-th central moment over the batch (divide by N).
pub fn central_moment(g: &mut Graph, x: VarId, k: usize) -> Result<VarId> {
    if k < 2 {
        return Err(Error::invalid(format!("moment order {k} < 2")));
    }
    let (n, _) = check_sample(g, x, "central_moment input")?;
    let mean = g.mean_axis0(x)?;
    let mean_rows = g.broadcast_rows(mean, n)?;
    let centered = g.sub(x, mean_rows)?;
    let powed = g.powi(centered, k as i32)?;
    g.mean_axis0(powed)
}

fn l2_norm(g: &mut Graph, v: VarId) -> Result<VarId> {
    let sq = g.mul(v, v)?;
    let s = g.sum_all(sq)?;
    g.sqrt(s)
}

/// CMD distance between two sample matrices sharing a feature dimension.
pub fn cmd_pair(g: &mut Graph, x: VarId, y: VarId, cfg: &CmdConfig) -> Result<VarId> {
    let (_, dx) = check_sample(g, x, "cmd_pair lhs")?;
    let (_, dy) = check_sample(g, y, "cmd_pair rhs")?;
    if dx != dy {
        return Err(Error::ShapeMismatch {
            kind: "cmd_pair".into(),
            lhs: g.value(x).shape().to_vec(),
            rhs: g.value(y).shape().to_vec(),
        });
    }
    if cfg.k < 2 {
        return Err(Error::invalid(format!("CMD order K={} < 2", cfg.k)));
    }
    let (x, y) = if cfg.sigmoid_squash {
        (g.sigmoid(x)?, g.sigmoid(y)?)
    } else {
        (x, y)
    };
    let mx = g.mean_axis0(x)?;
    let my = g.mean_axis0(y)?;
    let mdiff = g.sub(mx, my)?;
    let mut total = l2_norm(g, mdiff)?;
    for k in 2..=cfg.k {
        let cx = central_moment(g, x, k)?;
        let cy = central_moment(g, y, k)?;
        let diff = g.sub(cx, cy)?;
        let norm = l2_norm(g, diff)?;
        total = g.add(total, norm)?;
    }
    Ok(total)
}

/// Mean CMD over the three modality pairs (t,a), (t,v), (a,v).
pub fn cmd_loss(
    g: &mut Graph,
    h_a: VarId,
    h_v: VarId,
    h_t: VarId,
    cfg: &CmdConfig,
) -> Result<VarId> {
    let ta = cmd_pair(g, h_t, h_a, cfg)?;
    let tv = cmd_pair(g, h_t, h_v, cfg)?;
    let av = cmd_pair(g, h_a, h_v, cfg)?;
    let s1 = g.add(ta, tv)?;
    let s2 = g.add(s1, av)?;
    g.scale(s2, 1.0 / 3.0)
}

#[cfg(test)]
pub mod oracle {
    //! Straight-loop reference implementation, independent of the graph path.

    pub fn central_moment(x: &[Vec<f64>], k: usize) -> Vec<f64> {
        let n = x.len();
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut out = vec![0.0; d];
        for row in x {
            for j in 0..d {
                out[j] += (row[j] - mean[j]).powi(k as i32);
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        out
    }

    pub fn mean(x: &[Vec<f64>]) -> Vec<f64> {
        let mut m = vec![0.0; x[0].len()];
        for row in x {
            for (o, &v) in m.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in m.iter_mut() {
            *o /= x.len() as f64;
        }
        m
    }

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cmd_pair(x: &[Vec<f64>], y: &[Vec<f64>], k_max: usize) -> f64 {
        let mut total = l2(&mean(x), &mean(y));
        for k in 2..=k_max {
            total += l2(&central_moment(x, k), &central_moment(y, k));
        }
        total
    }

    pub fn cmd_loss(a: &[Vec<f64>], v: &[Vec<f64>], t: &[Vec<f64>], k_max: usize) -> f64 {
        (cmd_pair(t, a, k_max) + cmd_pair(t, v, k_max) + cmd_pair(a, v, k_max)) / 3.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn rand_matrix(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    }

    fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        Tensor::matrix(rows.len(), d, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn constant_column_has_zero_moments() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 1, vec![0.7, 0.7, 0.7]).unwrap());
        for k in 2..=5 {
            let m = central_moment(&mut g, x, k).unwrap();
            // the mean subtraction can leave a 1-ulp residual before powi
            assert!(g.value(m).data()[0].abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_two_point_sample() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap());
        let m2 = central_moment(&mut g, x, 2).unwrap();
        let m3 = central_moment(&mut g, x, 3).unwrap();
        assert!((g.value(m2).data()[0] - 1.0).abs() < 1e-15);
        assert!(g.value(m3).data()[0].abs() < 1e-15);
    }

    #[test]
    fn central_moment_rejects_degenerate_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        assert!(central_moment(&mut g, x, 2).is_err());
        let y = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(central_moment(&mut g, y, 1).is_err());
    }

    #[test]
    fn central_moment_matches_oracle() {
        let mut rng = crate::rng::stream(11, "cmd-test");
        let rows = rand_matrix(&mut rng, 32, 8);
        let mut g = Graph::new();
        let x = g.constant(to_tensor(&rows));
        for k in 2..=5 {
            let m = central_moment(&mut g, x, k).unwrap();
            let want = oracle::central_moment(&rows, k);
            for (got, want) in g.value(m).data().iter().zip(&want) {
                assert!((got - want).abs() < 1e-10, "k={k}");
            }
        }
    }

    #[test]
    fn pair_self_distance_is_zero() {
        let mut rng = crate::rng::stream(12, "cmd-test");
        let rows = rand_matrix(&mut rng, 8, 4);
        let mut g = Graph::new();
        let x = g.constant(to_tensor(&rows));
        let d = cmd_pair(&mut g, x, x, &CmdConfig::default()).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
    }

    #[test]
    fn constant_samples_leave_only_the_mean_term() {
        // X ≡ 0.2, Y ≡ 0.5, d = 4 → 0.3·√4 = 0.6 for any K
        for k in 2..=6 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(3, 4, vec![0.2; 12]).unwrap());
            let y = g.constant(Tensor::matrix(5, 4, vec![0.5; 20]).unwrap());
            let cfg = CmdConfig {
                k,
                sigmoid_squash: false,
            };
            let d = cmd_pair(&mut g, x, y, &cfg).unwrap();
            assert!((g.value(d).item() - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_matches_oracle_on_unequal_batches() {
        let mut rng = crate::rng::stream(13, "cmd-test");
        let xr = rand_matrix(&mut rng, 32, 8);
        let yr = rand_matrix(&mut rng, 24, 8);
        let mut g = Graph::new();
        let x = g.constant(to_tensor(&xr));
        let y = g.constant(to_tensor(&yr));
        let d = cmd_pair(&mut g, x, y, &CmdConfig::default()).unwrap();
        assert!((g.value(d).item() - oracle::cmd_pair(&xr, &yr, 5)).abs() < 1e-9);
    }

    #[test]
    fn pair_rejects_dimension_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, 3, vec![0.0; 12]).unwrap());
        let y = g.constant(Tensor::matrix(4, 5, vec![0.0; 20]).unwrap());
        assert!(cmd_pair(&mut g, x, y, &CmdConfig::default()).is_err());
    }

    #[test]
    fn loss_is_zero_for_identical_modalities() {
        let mut rng = crate::rng::stream(14, "cmd-test");
        let rows = rand_matrix(&mut rng, 6, 4);
        let mut g = Graph::new();
        let x = g.constant(to_tensor(&rows));
        let l = cmd_loss(&mut g, x, x, x, &CmdConfig::default()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn loss_with_one_shifted_constant_variance_modality() {
        // H_a = H_t; H_v = H_a + δ with zero variance → (0 + c + c)/3
        let base = vec![vec![0.3, -0.1, 0.8]; 4];
        let delta = [0.5, -0.2, 0.1];
        let shifted: Vec<Vec<f64>> = base
            .iter()
            .map(|r| r.iter().zip(&delta).map(|(&v, &d)| v + d).collect())
            .collect();
        let c: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        let mut g = Graph::new();
        let ha = g.constant(to_tensor(&base));
        let hv = g.constant(to_tensor(&shifted));
        let ht = g.constant(to_tensor(&base));
        let l = cmd_loss(&mut g, ha, hv, ht, &CmdConfig::default()).unwrap();
        assert!((g.value(l).item() - 2.0 * c / 3.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_oracle_on_random_triples() {
        let mut rng = crate::rng::stream(15, "cmd-test");
        for _ in 0..20 {
            let n = rng.gen_range(2..16);
            let d = rng.gen_range(1..10);
            let a = rand_matrix(&mut rng, n, d);
            let v = rand_matrix(&mut rng, n, d);
            let t = rand_matrix(&mut rng, n, d);
            let mut g = Graph::new();
            let av = g.constant(to_tensor(&a));
            let vv = g.constant(to_tensor(&v));
            let tv = g.constant(to_tensor(&t));
            let l = cmd_loss(&mut g, av, vv, tv, &CmdConfig::default()).unwrap();
            assert!((g.value(l).item() - oracle::cmd_loss(&a, &v, &t, 5)).abs() < 1e-9);
        }
    }

    #[test]
    fn pair_is_symmetric_and_nonnegative() {
        let mut rng = crate::rng::stream(16, "cmd-test");
        for _ in 0..20 {
            let xr = rand_matrix(&mut rng, 5, 3);
            let yr = rand_matrix(&mut rng, 7, 3);
            let mut g = Graph::new();
            let x = g.constant(to_tensor(&xr));
            let y = g.constant(to_tensor(&yr));
            let d1 = cmd_pair(&mut g, x, y, &CmdConfig::default()).unwrap();
            let d2 = cmd_pair(&mut g, y, x, &CmdConfig::default()).unwrap();
            assert!(g.value(d1).item() >= 0.0);
            assert_eq!(g.value(d1).item(), g.value(d2).item());
        }
    }

    #[test]
    fn row_permutation_leaves_pair_unchanged() {
        let mut rng = crate::rng::stream(17, "cmd-test");
        let xr = rand_matrix(&mut rng, 8, 4);
        let yr = rand_matrix(&mut rng, 8, 4);
        let mut shuffled = xr.clone();
        shuffled.reverse();
        shuffled.swap(1, 3);
        let mut g = Graph::new();
        let x = g.constant(to_tensor(&xr));
        let xs = g.constant(to_tensor(&shuffled));
        let y = g.constant(to_tensor(&yr));
        let d1 = cmd_pair(&mut g, x, y, &CmdConfig::default()).unwrap();
        let d2 = cmd_pair(&mut g, xs, y, &CmdConfig::default()).unwrap();
        assert!((g.value(d1).item() - g.value(d2).item()).abs() < 1e-12);
    }

    #[test]
    fn growing_translation_increases_pair() {
        let mut rng = crate::rng::stream(18, "cmd-test");
        let xr = rand_matrix(&mut rng, 10, 4);
        let mut prev = -1.0;
        for step in 1..6 {
            let off = step as f64 * 0.5;
            let yr: Vec<Vec<f64>> = xr
                .iter()
                .map(|r| r.iter().map(|&v| v + off).collect())
                .collect();
            let mut g = Graph::new();
            let x = g.constant(to_tensor(&xr));
            let y = g.constant(to_tensor(&yr));
            let d = cmd_pair(&mut g, x, y, &CmdConfig::default()).unwrap();
            assert!(g.value(d).item() > prev);
            prev = g.value(d).item();
        }
    }

    #[test]
    fn loss_gradient_passes_fd_check() {
        let mut rng = crate::rng::stream(19, "cmd-test");
        let fixed_v = to_tensor(&rand_matrix(&mut rng, 6, 4));
        let fixed_t = to_tensor(&rand_matrix(&mut rng, 6, 4));
        let x = to_tensor(&rand_matrix(&mut rng, 6, 4));
        let rep = finite_difference_check(
            |g, xid| {
                let v = g.constant(fixed_v.clone());
                let t = g.constant(fixed_t.clone());
                cmd_loss(g, xid, v, t, &CmdConfig::default())
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "max_rel_err = {}", rep.max_rel_err);
    }

    #[test]
    fn pair_distance_fd_check_on_16x4() {
        let mut rng = crate::rng::stream(20, "cmd-test");
        let fixed = to_tensor(&rand_matrix(&mut rng, 16, 4));
        let x = to_tensor(&rand_matrix(&mut rng, 16, 4));
        let rep = finite_difference_check(
            |g, xid| {
                let y = g.constant(fixed.clone());
                cmd_pair(g, xid, y, &CmdConfig::default())
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "max_rel_err = {}", rep.max_rel_err);
    }
}
