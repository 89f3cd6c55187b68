//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};

pub type P3 = [f64; 3];

pub fn sq(a: P3, b: P3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Half the sum of the two directional mean nearest squared distances,
/// by exhaustive search over all pairs.
pub fn chamfer_bf(a: &[P3], b: &[P3]) -> f64 {
    let dir = |x: &[P3], y: &[P3]| {
        x.iter()
            .map(|p| y.iter().map(|q| sq(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (dir(a, b) + dir(b, a))
}

/// Frames of joints: `h[n][j]`.
pub fn hand_loss_bf(h: &[Vec<P3>], hhat: &[Vec<P3>]) -> f64 {
    let n = h.len();
    let err: Vec<Vec<P3>> = (0..n)
        .map(|f| {
            (0..h[f].len())
                .map(|j| [0, 1, 2].map(|c| hhat[f][j][c] - h[f][j][c]))
                .collect()
        })
        .collect();
    let mean_sq = |e: &[Vec<P3>]| {
        let mut s = 0.0;
        let mut c = 0usize;
        for row in e {
            for p in row {
                s += p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
                c += 1;
            }
        }
        s / c as f64
    };
    let diff = |e: &[Vec<P3>]| -> Vec<Vec<P3>> {
        (1..e.len())
            .map(|f| (0..e[f].len()).map(|j| [0, 1, 2].map(|c| e[f][j][c] - e[f - 1][j][c])).collect())
            .collect()
    };
    let mut loss = mean_sq(&err);
    if n >= 2 {
        let v = diff(&err);
        loss += 0.2 * mean_sq(&v);
        if n >= 3 {
            loss += 0.05 * mean_sq(&diff(&v));
        }
    }
    loss
}

fn part_bf(o: &[Vec<P3>], ohat: &[Vec<P3>]) -> f64 {
    let n = o.len();
    let l1 = (0..n).map(|f| chamfer_bf(&o[f], &ohat[f])).sum::<f64>() / n as f64;
    if n < 2 {
        return l1;
    }
    let l2 = (1..n)
        .map(|f| (chamfer_bf(&o[f], &o[f - 1]) - chamfer_bf(&ohat[f], &ohat[f - 1])).abs())
        .sum::<f64>()
        / (n - 1) as f64;
    l1 + 0.1 * l2
}

/// Frames of points: `o[n][k]`, first half tool, second half target.
pub fn object_loss_bf(o: &[Vec<P3>], ohat: &[Vec<P3>]) -> f64 {
    let h = o[0].len() / 2;
    let split = |x: &[Vec<P3>], lo: usize| -> Vec<Vec<P3>> { x.iter().map(|f| f[lo..lo + h].to_vec()).collect() };
    0.5 * (part_bf(&split(o, 0), &split(ohat, 0)) + part_bf(&split(o, h), &split(ohat, h)))
}

pub fn points_tensor(frames: &[Vec<P3>]) -> Tensor {
    let n = frames.len();
    let k = frames[0].len();
    let flat: Vec<f64> = frames.iter().flat_map(|f| f.iter().flat_map(|p| p.iter().copied())).collect();
    Tensor::from_vec(flat, (1, n, k, 3), &Device::Cpu).unwrap()
}

pub fn set_tensor(points: &[P3]) -> Tensor {
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::from_vec(flat, (points.len(), 3), &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Worst relative error between the autograd gradient of `f` at `x0` and
/// central finite differences with step `h`. Relative errors use
/// `max(|a|, |n|, floor)` as the denominator.
pub fn gradient_check(x0: &Tensor, h: f64, floor: f64, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let x = Var::from_tensor(x0).unwrap();
    let loss = f(x.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let base: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let at = |v: Vec<f64>| scalar(&f(&Tensor::from_vec(v, x0.dims(), &Device::Cpu).unwrap()));
        let numeric = (at(plus) - at(minus)) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Deterministic points in `[-1, 1)³` from a splitmix64 sequence.
pub fn rand_points(seed: u64, n: usize) -> Vec<P3> {
    let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut next = || {
        s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        ((z >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    (0..n).map(|_| [next(), next(), next()]).collect()
}
