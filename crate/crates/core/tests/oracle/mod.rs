//! Plain scalar-loop reference implementations. They share no code with the
//! library: no tensors, no autodiff, no bank type.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let mut z = 0.0;
    for &s in scores {
        z += (s / tau).exp();
    }
    scores.iter().map(|&s| (s / tau).exp() / z).collect()
}

fn log_softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let mut z = 0.0;
    for &s in scores {
        z += (s / tau).exp();
    }
    let lz = z.ln();
    scores.iter().map(|&s| s / tau - lz).collect()
}

fn relational_ce(t_scores: &[Vec<f64>], s_scores: &[Vec<f64>], tau_s: f64, tau_t: f64) -> f64 {
    let n = t_scores.len();
    let mut total = 0.0;
    for i in 0..n {
        let p = softmax(&t_scores[i], tau_t);
        let lq = log_softmax(&s_scores[i], tau_s);
        for j in 0..p.len() {
            total -= p[j] * lq[j];
        }
    }
    total / n as f64
}

/// Relational loss with each sample's own teacher embedding appended after
/// the `K` bank rows.
pub fn rrd_append(student: &[Vec<f64>], teacher: &[Vec<f64>], bank: &[Vec<f64>], tau_s: f64, tau_t: f64) -> f64 {
    let mut ts = Vec::new();
    let mut ss = Vec::new();
    for i in 0..student.len() {
        let mut t_row = Vec::new();
        let mut s_row = Vec::new();
        for m in bank {
            t_row.push(dot(&teacher[i], m));
            s_row.push(dot(&student[i], m));
        }
        t_row.push(dot(&teacher[i], &teacher[i]));
        s_row.push(dot(&student[i], &teacher[i]));
        ts.push(t_row);
        ss.push(s_row);
    }
    relational_ce(&ts, &ss, tau_s, tau_t)
}

/// Relational loss after overwriting the first `N` rows of a fresh bank
/// (write position 0) with the teacher batch.
pub fn rrd_enqueue_first(student: &[Vec<f64>], teacher: &[Vec<f64>], bank: &[Vec<f64>], tau_s: f64, tau_t: f64) -> f64 {
    let mut queued = bank.to_vec();
    queued[..teacher.len()].clone_from_slice(teacher);
    let mut ts = Vec::new();
    let mut ss = Vec::new();
    for i in 0..student.len() {
        ts.push(queued.iter().map(|m| dot(&teacher[i], m)).collect());
        ss.push(queued.iter().map(|m| dot(&student[i], m)).collect());
    }
    relational_ce(&ts, &ss, tau_s, tau_t)
}

/// `−mean_i log( e^{s_i·t_i/τ} / (e^{s_i·t_i/τ} + Σ_j e^{s_i·m_j/τ}) )`
pub fn infonce(student: &[Vec<f64>], teacher: &[Vec<f64>], bank: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..student.len() {
        let pos = (dot(&student[i], &teacher[i]) / tau).exp();
        let mut denom = pos;
        for m in bank {
            denom += (dot(&student[i], m) / tau).exp();
        }
        total -= (pos / denom).ln();
    }
    total / student.len() as f64
}
