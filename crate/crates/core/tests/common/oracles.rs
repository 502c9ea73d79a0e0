// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference implementations written as plain index loops over
//! `Vec<Vec<f64>>`, sharing no code with the library.

use attrel::trace::{AttentionSite, Modality, SiteKind, Trace};
use nalgebra::DMatrix;

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn eye(n: usize) -> Mat {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i][t] * b[t][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let (r, c) = (a.len(), a.first().map_or(0, Vec::len));
    let mut out = zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            out[j][i] = a[i][j];
        }
    }
    out
}

pub fn from_dm(m: &DMatrix<f64>) -> Mat {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &DMatrix<f64>) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), b.shape());
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b[(i, j)]).abs());
        }
    }
    worst
}

fn block(m: &Mat, r0: usize, rows: usize, c0: usize, cols: usize) -> Mat {
    (r0..r0 + rows).map(|i| m[i][c0..c0 + cols].to_vec()).collect()
}

/// Head mean of the attention itself.
fn head_mean(site: &AttentionSite) -> Mat {
    let (nq, nk) = (site.attention[0].nrows(), site.attention[0].ncols());
    let h = site.attention.len() as f64;
    let mut out = zeros(nq, nk);
    for a in &site.attention {
        for i in 0..nq {
            for j in 0..nk {
                out[i][j] += a[(i, j)];
            }
        }
    }
    for row in &mut out {
        for v in row {
            *v /= h;
        }
    }
    out
}

/// Head mean of the positive part of gradient times attention.
pub fn grad_att(site: &AttentionSite) -> Mat {
    let (nq, nk) = (site.attention[0].nrows(), site.attention[0].ncols());
    let h = site.attention.len() as f64;
    let mut out = zeros(nq, nk);
    for (a, g) in site.attention.iter().zip(&site.attention_grad) {
        for i in 0..nq {
            for j in 0..nk {
                let v = a[(i, j)] * g[(i, j)];
                if v > 0.0 {
                    out[i][j] += v;
                }
            }
        }
    }
    for row in &mut out {
        for v in row {
            *v /= h;
        }
    }
    out
}

/// Row-normalize; rows summing to zero are reported and left zero.
fn normalize(m: &mut Mat) -> Vec<bool> {
    m.iter_mut()
        .map(|row| {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                for v in row.iter_mut() {
                    *v /= sum;
                }
                false
            } else {
                true
            }
        })
        .collect()
}

pub enum Alpha {
    Adaptive,
    Fixed(f64),
}

pub fn alpha(site: &AttentionSite, mode: &Alpha) -> f64 {
    if let Alpha::Fixed(a) = mode {
        return *a;
    }
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..site.tokens_in.nrows() {
        for j in 0..site.tokens_in.ncols() {
            let a = (site.tokens_in[(i, j)] * site.tokens_in_grad[(i, j)]).max(0.0);
            let b = (site.tokens_out[(i, j)] * site.tokens_out_grad[(i, j)]).max(0.0);
            if a + b > 0.0 {
                sum += a / (a + b);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.5
    } else {
        sum / n as f64
    }
}

fn offset(trace: &Trace, m: Modality) -> (usize, usize) {
    let (s, q) = (trace.layout.s, trace.layout.q);
    match m {
        Modality::S => (0, s),
        Modality::Q => (s, q),
        Modality::Joint => (0, s + q),
    }
}

/// Relevance map after every site.
pub fn propagate(trace: &Trace, mode: &Alpha) -> Mat {
    let n = trace.layout.s + trace.layout.q;
    let mut r = eye(n);
    for site in &trace.sites {
        let a_w = alpha(site, mode);
        let b_w = 1.0 - a_w;
        let mut a = grad_att(site);
        let empty = normalize(&mut a);
        let (qo, ql) = offset(trace, site.query_modality);
        let (ko, _) = offset(trace, site.key_modality);
        let mut next = r.clone();
        for i in 0..ql {
            for k in 0..n {
                let moved = if empty[i] {
                    if site.kind == SiteKind::Cross {
                        r[qo + i][k]
                    } else {
                        r[ko + i][k]
                    }
                } else {
                    let mut acc = 0.0;
                    for (j, w) in a[i].iter().enumerate() {
                        acc += w * r[ko + j][k];
                    }
                    acc
                };
                next[qo + i][k] = a_w * r[qo + i][k] + b_w * moved;
            }
        }
        r = next;
    }
    r
}

/// Scores as four blocks `(ii, it, ti, tt)`.
pub struct Blocks {
    pub ii: Mat,
    pub it: Mat,
    pub ti: Mat,
    pub tt: Mat,
}

impl Blocks {
    fn init(s: usize, q: usize) -> Self {
        Self {
            ii: eye(s),
            it: zeros(s, q),
            ti: zeros(q, s),
            tt: eye(q),
        }
    }

    fn joint(&self) -> Mat {
        self.ii
            .iter()
            .zip(&self.it)
            .map(|(a, b)| a.iter().chain(b).copied().collect())
            .chain(
                self.ti
                    .iter()
                    .zip(&self.tt)
                    .map(|(a, b)| a.iter().chain(b).copied().collect()),
            )
            .collect()
    }

    fn set_joint(&mut self, j: &Mat, s: usize, q: usize) {
        self.ii = block(j, 0, s, 0, s);
        self.it = block(j, 0, s, s, q);
        self.ti = block(j, s, q, 0, s);
        self.tt = block(j, s, q, s, q);
    }

    pub fn joint_dm(&self) -> DMatrix<f64> {
        let j = self.joint();
        DMatrix::from_fn(j.len(), j[0].len(), |r, c| j[r][c])
    }
}

fn s_to_q(site: &AttentionSite) -> bool {
    site.query_modality == Modality::S && site.key_modality == Modality::Q
}

pub fn rawatt(trace: &Trace) -> Blocks {
    let (s, q) = (trace.layout.s, trace.layout.q);
    let mut b = Blocks::init(s, q);
    for site in &trace.sites {
        let a = head_mean(site);
        match site.kind {
            SiteKind::SelfJoint => b.set_joint(&a, s, q),
            SiteKind::SelfUnimodal if site.query_modality == Modality::S => b.ii = a,
            SiteKind::SelfUnimodal => b.tt = a,
            SiteKind::Cross if s_to_q(site) => b.it = a,
            SiteKind::Cross => b.ti = a,
        }
    }
    b
}

/// `(A + I)` with every row divided by its sum.
fn rollout_step(a: &Mat) -> Mat {
    let mut m = add(a, &eye(a.len()));
    for row in &mut m {
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    m
}

pub fn rollout(trace: &Trace) -> Blocks {
    let (s, q) = (trace.layout.s, trace.layout.q);
    let mut b = Blocks::init(s, q);
    let mut last_it = None;
    let mut last_ti = None;
    for site in &trace.sites {
        let a = head_mean(site);
        match site.kind {
            SiteKind::SelfJoint => {
                let j = mul(&rollout_step(&a), &b.joint());
                b.set_joint(&j, s, q);
                last_it = Some(block(&a, 0, s, s, q));
                last_ti = Some(block(&a, s, q, 0, s));
            }
            SiteKind::SelfUnimodal if site.query_modality == Modality::S => b.ii = mul(&rollout_step(&a), &b.ii),
            SiteKind::SelfUnimodal => b.tt = mul(&rollout_step(&a), &b.tt),
            SiteKind::Cross if s_to_q(site) => last_it = Some(a),
            SiteKind::Cross => last_ti = Some(a),
        }
    }
    if let Some(a) = last_it {
        b.it = mul(&mul(&transpose(&b.ii), &a), &b.tt);
    }
    if let Some(a) = last_ti {
        b.ti = mul(&mul(&transpose(&b.tt), &a), &b.ii);
    }
    b
}

/// `R − I` row-normalized (zero rows stay zero), plus `I`.
fn bar(r: &Mat) -> Mat {
    let n = r.len();
    let mut m = r.clone();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] -= 1.0;
        let sum: f64 = row.iter().sum();
        if sum != 0.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    add(&m, &eye(n))
}

pub fn genatt(trace: &Trace) -> Blocks {
    let (s, q) = (trace.layout.s, trace.layout.q);
    let mut b = Blocks::init(s, q);
    for site in &trace.sites {
        let a = grad_att(site);
        match site.kind {
            SiteKind::SelfJoint => {
                let j = b.joint();
                let j = add(&j, &mul(&a, &j));
                b.set_joint(&j, s, q);
            }
            SiteKind::SelfUnimodal if site.query_modality == Modality::S => {
                b.ii = add(&b.ii, &mul(&a, &b.ii));
                b.it = add(&b.it, &mul(&a, &b.it));
            }
            SiteKind::SelfUnimodal => {
                b.tt = add(&b.tt, &mul(&a, &b.tt));
                b.ti = add(&b.ti, &mul(&a, &b.ti));
            }
            SiteKind::Cross if s_to_q(site) => {
                b.it = add(&b.it, &mul(&mul(&transpose(&bar(&b.ii)), &a), &bar(&b.tt)));
                b.ii = add(&b.ii, &mul(&a, &b.ti));
            }
            SiteKind::Cross => {
                b.ti = add(&b.ti, &mul(&mul(&transpose(&bar(&b.tt)), &a), &bar(&b.ii)));
                b.tt = add(&b.tt, &mul(&a, &b.it));
            }
        }
    }
    b
}

/// One-way interaction map (image→text) folded alongside the relevance map.
pub fn interaction_s_to_q(trace: &Trace, mode: &Alpha) -> Mat {
    let (s, q) = (trace.layout.s, trace.layout.q);
    let mut m = zeros(s, q);
    for k in 0..trace.sites.len() {
        let prefix = Trace {
            sites: trace.sites[..k].to_vec(),
            ..trace.clone()
        };
        let r = propagate(&prefix, mode);
        let site = &trace.sites[k];
        let a = match site.kind {
            SiteKind::SelfUnimodal => continue,
            SiteKind::Cross if !s_to_q(site) => continue,
            SiteKind::Cross => grad_att(site),
            SiteKind::SelfJoint => block(&grad_att(site), 0, s, s, q),
        };
        let rs = block(&r, 0, s, 0, s);
        let rq = block(&r, s, q, s, q);
        m = add(&m, &mul(&mul(&transpose(&rs), &a), &rq));
    }
    m
}
