//! Raw float32 kernels shared by the graph's forward and backward passes.

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// dA[m,k] += G[m,n] * B[k,n]^T
pub fn matmul_bt_acc(g: &[f32], b: &[f32], m: usize, k: usize, n: usize, da: &mut [f32]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, d) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0f32;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *d += acc;
        }
    }
}

/// dB[k,n] += A[m,k]^T * G[m,n]
pub fn matmul_at_acc(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, db: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in dbrow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

pub const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
pub const GELU_A: f32 = 0.044_715;

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable at both tails.
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// ln(sigmoid(x)) = -softplus(-x)
pub fn log_sigmoid(x: f32) -> f32 {
    -softplus(-x)
}

/// Per-entry focal binary cross-entropy on a logit.
///
/// target 1: -alpha * (1-p)^gamma * ln p
/// target 0: -(1-alpha) * p^gamma * ln(1-p)
pub fn focal_bce(x: f32, target: f32, alpha: f32, gamma: f32) -> f32 {
    let p = sigmoid(x);
    if target > 0.5 {
        -alpha * (1.0 - p).powf(gamma) * log_sigmoid(x)
    } else {
        -(1.0 - alpha) * p.powf(gamma) * log_sigmoid(-x)
    }
}

/// d/dx of `focal_bce`.
pub fn focal_bce_grad(x: f32, target: f32, alpha: f32, gamma: f32) -> f32 {
    let p = sigmoid(x);
    if target > 0.5 {
        // alpha * (1-p)^gamma * (gamma * p * ln p - (1 - p))
        alpha * (1.0 - p).powf(gamma) * (gamma * p * log_sigmoid(x) - (1.0 - p))
    } else {
        // (1-alpha) * p^gamma * (p - gamma * (1-p) * ln(1-p))
        (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_sigmoid(-x))
    }
}

pub fn smooth_l1(d: f32, beta: f32) -> f32 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(d: f32, beta: f32) -> f32 {
    (d / beta).clamp(-1.0, 1.0)
}

/// In-place row softmax with max subtraction.
pub fn softmax_row(row: &mut [f32]) {
    let mut mx = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Sum with an f64 accumulator so scalar losses carry one rounding, not n.
pub fn sum_f64(xs: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &v in xs {
        acc += v as f64;
    }
    acc
}
