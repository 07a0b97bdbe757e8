//! Zero-order-hold discretisation and the selective scan recurrence.
//!
//! Layout convention: `u`, `delta`, `y` are `[L, D]`; `a` is `[D, N]`;
//! `b`, `c` are `[L, N]` (shared by all channels at a token); `d` is `[D]`.

use crate::error::{Error, Result};
use crate::tensor::{GradSink, Node, Op, Tensor, Var};

/// Below this `|Δ·a|` the input gain uses its Taylor expansion.
pub const TAYLOR_THRESHOLD: f64 = 1e-4;

/// Discretised diagonal entry: `a_bar = exp(Δa)`, `b_bar = phi · B`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Zoh {
    pub a_bar: f64,
    pub phi: f64,
}

/// `(exp(z), expm1(z))` from one range reduction `z = k·ln2 + r`,
/// `|r| ≤ ln2/2`, with a degree-13 polynomial for `expm1(r)`. Both results are
/// within a few ulp of the libm values, and there is no cancellation near 0.
#[inline(always)]
fn exp_pair(z: f64) -> (f64, f64) {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5·2^52 rounds to the nearest integer in the low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let zc = z.clamp(-700.0, 700.0);
    let t = zc * LOG2E + SHIFTER;
    let k = t - SHIFTER;
    let ki = t.to_bits().wrapping_sub(SHIFTER.to_bits()) as i64;
    let r = (zc - k * LN2_HI) - k * LN2_LO;
    // expm1(r) = r + r²·Σ r^i / (i + 2)!
    let q = 1.0 / 6_227_020_800.0;
    let q = q * r + 1.0 / 479_001_600.0;
    let q = q * r + 1.0 / 39_916_800.0;
    let q = q * r + 1.0 / 3_628_800.0;
    let q = q * r + 1.0 / 362_880.0;
    let q = q * r + 1.0 / 40_320.0;
    let q = q * r + 1.0 / 5_040.0;
    let q = q * r + 1.0 / 720.0;
    let q = q * r + 1.0 / 120.0;
    let q = q * r + 1.0 / 24.0;
    let q = q * r + 1.0 / 6.0;
    let q = q * r + 0.5;
    let p = r + r * r * q;
    let scale = f64::from_bits(((ki + 1023) as u64) << 52);
    let (e, m) = (scale + scale * p, (scale - 1.0) + scale * p);
    // Selects rather than early returns, so the state loop stays branch-free.
    let e = if z < -700.0 { 0.0 } else if z > 700.0 { f64::INFINITY } else { e };
    let m = if z < -700.0 { -1.0 } else if z > 700.0 { f64::INFINITY } else { m };
    (e, m)
}

/// `(a_bar, phi)` for one entry.
#[inline(always)]
fn discretize(delta: f64, a: f64) -> (f64, f64) {
    let z = delta * a;
    let (a_bar, em1) = exp_pair(z);
    let taylor = delta * (1.0 + z * (0.5 + z / 6.0));
    let exact = em1 / a;
    (a_bar, if z.abs() < TAYLOR_THRESHOLD { taylor } else { exact })
}

/// `(∂phi/∂Δ, ∂phi/∂a)` recovered from the saved forward values.
#[inline(always)]
fn phi_partials(delta: f64, a: f64, a_bar: f64, phi: f64) -> (f64, f64) {
    let z = delta * a;
    if z.abs() < TAYLOR_THRESHOLD {
        (1.0 + z * (1.0 + 0.5 * z), delta * delta * (0.5 + z / 3.0))
    } else {
        // phi = expm1(z)/a, so ∂phi/∂a = (Δ·a_bar − phi)/a.
        (a_bar, (delta * a_bar - phi) / a)
    }
}

/// Scalar ZOH: `a_bar = exp(Δa)`, `phi = (exp(Δa) − 1)/a`, with the
/// second-order Taylor form of `phi` below [`TAYLOR_THRESHOLD`].
pub fn zoh(a: f64, delta: f64) -> Result<Zoh> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Config(format!("time step must be positive, got {delta}")));
    }
    let (a_bar, phi) = discretize(delta, a);
    Ok(Zoh { a_bar, phi })
}

/// Both branches of `phi` at one point, for continuity checks.
pub fn zoh_branches(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    (exp_pair(z).1 / a, delta * (1.0 + z * (0.5 + z / 6.0)))
}

/// Discretises `a: [C, N]` with per-channel steps `delta: [C]` and a shared
/// input vector `b: [N]`, returning `(a_bar, b_bar)`, both `[C, N]`.
pub fn zoh_discretize(a: &Tensor, b: &[f64], delta: &[f64]) -> Result<(Tensor, Tensor)> {
    let &[ch, n] = a.shape() else {
        return Err(Error::shape("zoh_discretize", format!("A {:?} not [C, N]", a.shape())));
    };
    if b.len() != n || delta.len() != ch {
        return Err(Error::shape(
            "zoh_discretize",
            format!("A [{ch}, {n}] with B of {} and Δ of {}", b.len(), delta.len()),
        ));
    }
    let mut a_bar = Tensor::zeros([ch, n]);
    let mut b_bar = Tensor::zeros([ch, n]);
    for c in 0..ch {
        for j in 0..n {
            let z = zoh(a.data()[c * n + j], delta[c])?;
            a_bar.data_mut()[c * n + j] = z.a_bar;
            b_bar.data_mut()[c * n + j] = z.phi * b[j];
        }
    }
    Ok((a_bar, b_bar))
}

/// Borrowed operands of one scan, in the layout documented at module level.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: Option<&'a [f64]>,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanInputs<'_> {
    fn validate(&self) -> Result<()> {
        let (l, dm, n) = (self.len, self.channels, self.state);
        if l == 0 {
            return Err(Error::Input("selective scan over an empty sequence".into()));
        }
        if dm == 0 || n == 0 {
            return Err(Error::Config("selective scan needs D ≥ 1 and N ≥ 1".into()));
        }
        let ok = self.u.len() == l * dm
            && self.delta.len() == l * dm
            && self.a.len() == dm * n
            && self.b.len() == l * n
            && self.c.len() == l * n
            && self.d.map_or(true, |d| d.len() == dm);
        if !ok {
            return Err(Error::shape(
                "selective_scan",
                format!("operand sizes inconsistent with L={l}, D={dm}, N={n}"),
            ));
        }
        Ok(())
    }
}

/// Per-element values kept for the adjoint, each `[L, D, N]`.
struct ScanTrace {
    states: Vec<f64>,
    a_bar: Vec<f64>,
    phi: Vec<f64>,
}

impl ScanTrace {
    fn zeros(size: usize) -> Self {
        Self {
            states: vec![0.0; size],
            a_bar: vec![0.0; size],
            phi: vec![0.0; size],
        }
    }
}

/// Sequential recurrence. When `trace` is given, every `h_t` and the
/// discretised coefficients are recorded in it.
fn scan_forward(s: &ScanInputs, mut trace: Option<&mut ScanTrace>) -> Vec<f64> {
    let (l, dm, n) = (s.len, s.channels, s.state);
    let mut h = vec![0.0; dm * n];
    let mut y = vec![0.0; l * dm];
    let mut ab = vec![0.0; n];
    let mut ph = vec![0.0; n];
    for t in 0..l {
        let bt = &s.b[t * n..][..n];
        let ct = &s.c[t * n..][..n];
        for ch in 0..dm {
            let dt = s.delta[t * dm + ch];
            let ut = s.u[t * dm + ch];
            let ar = &s.a[ch * n..][..n];
            let hr = &mut h[ch * n..][..n];
            for j in 0..n {
                (ab[j], ph[j]) = discretize(dt, ar[j]);
            }
            let mut acc = 0.0;
            for j in 0..n {
                hr[j] = ab[j] * hr[j] + ph[j] * bt[j] * ut;
                acc += ct[j] * hr[j];
            }
            if let Some(d) = s.d {
                acc += d[ch] * ut;
            }
            y[t * dm + ch] = acc;
            if let Some(tr) = trace.as_deref_mut() {
                let off = (t * dm + ch) * n;
                tr.states[off..][..n].copy_from_slice(hr);
                tr.a_bar[off..][..n].copy_from_slice(&ab);
                tr.phi[off..][..n].copy_from_slice(&ph);
            }
        }
    }
    y
}

/// Plain sequential selective scan, returning `y: [L, D]`.
pub fn selective_scan_reference(s: &ScanInputs) -> Result<Vec<f64>> {
    s.validate()?;
    Ok(scan_forward(s, None))
}

/// Blocked evaluation: each chunk runs from a zero state while tracking the
/// running product of `a_bar`, then the carried-in state is added back. Agrees
/// with [`selective_scan_reference`] up to rounding.
pub fn selective_scan_chunked(s: &ScanInputs, chunk: usize) -> Result<Vec<f64>> {
    s.validate()?;
    if chunk == 0 {
        return Err(Error::Config("chunk length must be positive".into()));
    }
    let (l, dm, n) = (s.len, s.channels, s.state);
    let mut carry = vec![0.0; dm * n];
    let mut local = vec![0.0; dm * n];
    let mut decay = vec![1.0; dm * n];
    let mut y = vec![0.0; l * dm];
    for start in (0..l).step_by(chunk) {
        local.fill(0.0);
        decay.fill(1.0);
        for t in start..(start + chunk).min(l) {
            let bt = &s.b[t * n..][..n];
            let ct = &s.c[t * n..][..n];
            for ch in 0..dm {
                let dt = s.delta[t * dm + ch];
                let ut = s.u[t * dm + ch];
                let mut acc = 0.0;
                for j in 0..n {
                    let k = ch * n + j;
                    let (a_bar, phi) = discretize(dt, s.a[k]);
                    local[k] = a_bar * local[k] + phi * bt[j] * ut;
                    decay[k] *= a_bar;
                    acc += ct[j] * (local[k] + decay[k] * carry[k]);
                }
                if let Some(d) = s.d {
                    acc += d[ch] * ut;
                }
                y[t * dm + ch] = acc;
            }
        }
        for k in 0..dm * n {
            carry[k] = local[k] + decay[k] * carry[k];
        }
    }
    Ok(y)
}

/// Convolutional evaluation of a time-invariant single-channel SSM:
/// `y_t = Σ_{τ ≤ t} Σ_n c_n a_bar_n^{t−τ} b_bar_n x_τ`, with the kernel
/// materialised explicitly. `a_bar`, `b_bar`, `c` are `[L, N]` per-token
/// tables whose rows must all be equal.
pub fn scan_convolution_oracle(x: &[f64], a_bar: &Tensor, b_bar: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
    let l = x.len();
    let n = match *a_bar.shape() {
        [rows, n] if rows == l => n,
        ref s => {
            return Err(Error::shape("scan_convolution_oracle", format!("A_bar {s:?} for L={l}")))
        }
    };
    for (name, t) in [("A_bar", a_bar), ("B_bar", b_bar), ("C", c)] {
        if t.shape() != [l, n] {
            return Err(Error::shape("scan_convolution_oracle", format!("{name} {:?}", t.shape())));
        }
        let first = &t.data()[..n];
        if t.data().chunks_exact(n).any(|row| row != first) {
            return Err(Error::Usage(format!(
                "convolution oracle requires time-invariant parameters; {name} varies over time"
            )));
        }
    }
    let (ab, bb, cc) = (&a_bar.data()[..n], &b_bar.data()[..n], &c.data()[..n]);
    let mut kernel = vec![0.0; l];
    let mut power = vec![1.0; n];
    for k in kernel.iter_mut() {
        *k = (0..n).map(|j| cc[j] * power[j] * bb[j]).sum();
        for j in 0..n {
            power[j] *= ab[j];
        }
    }
    Ok((0..l)
        .map(|t| (0..=t).map(|tau| kernel[t - tau] * x[tau]).sum())
        .collect())
}

/// Saved state of a recorded selective scan.
pub(crate) struct ScanSaved {
    u: usize,
    delta: usize,
    a: usize,
    b: usize,
    c: usize,
    d: Option<usize>,
    dims: (usize, usize, usize),
    trace: ScanTrace,
}

impl ScanSaved {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        let mut v = vec![self.u, self.delta, self.a, self.b, self.c];
        v.extend(self.d);
        v
    }
}

impl<'t> Var<'t> {
    /// Selective scan as a differentiable op. Shapes: `self = u: [L, D]`,
    /// `delta: [L, D]` (positive), `a: [D, N]`, `b, c: [L, N]`, `d: [D]`.
    pub fn selective_scan(
        self,
        delta: Var<'t>,
        a: Var<'t>,
        b: Var<'t>,
        c: Var<'t>,
        d: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        for v in [delta, a, b, c].iter().chain(d.as_ref()) {
            self.same_tape(v);
        }
        let (uv, dv, av, bv, cv) = (self.value(), delta.value(), a.value(), b.value(), c.value());
        let dd = d.map(|d| d.value());
        let (&[l, dm], &[_, n]) = (uv.shape(), av.shape()) else {
            return Err(Error::shape(
                "selective_scan",
                format!("u {:?} / A {:?} not rank 2", uv.shape(), av.shape()),
            ));
        };
        if dv.shape() != uv.shape() || av.shape()[0] != dm || bv.shape() != [l, n] || cv.shape() != [l, n] {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}",
                    uv.shape(),
                    dv.shape(),
                    av.shape(),
                    bv.shape(),
                    cv.shape()
                ),
            ));
        }
        let inputs = ScanInputs {
            u: uv.data(),
            delta: dv.data(),
            a: av.data(),
            b: bv.data(),
            c: cv.data(),
            d: dd.as_deref().map(Tensor::data),
            len: l,
            channels: dm,
            state: n,
        };
        inputs.validate()?;
        let needs_grad = [self, delta, a, b, c].iter().chain(d.as_ref()).any(|v| v.requires_grad());
        let mut trace = ScanTrace::zeros(if needs_grad { l * dm * n } else { 0 });
        let y = scan_forward(&inputs, needs_grad.then_some(&mut trace));
        let saved = ScanSaved {
            u: self.id,
            delta: delta.id,
            a: a.id,
            b: b.id,
            c: c.id,
            d: d.map(|d| d.id),
            dims: (l, dm, n),
            trace,
        };
        self.tape.push("selective_scan", Tensor::new([l, dm], y)?, Op::SelectiveScan(Box::new(saved)))
    }
}

/// Reverse-time adjoint. With `λ_t = ∂L/∂h_t` accumulated as
/// `λ_t = g_t c_t + a_bar_{t+1} λ_{t+1}`, each step contributes
/// `∂h_t/∂(a_bar, phi, b, u)` through `h_t = a_bar h_{t−1} + phi b u`.
pub(crate) fn backward(saved: &ScanSaved, nodes: &[Node], g: &[f64], sink: &mut GradSink) {
    let (l, dm, n) = saved.dims;
    let val = |i: usize| nodes[i].value.data();
    let (u, delta, a, b, c) = (val(saved.u), val(saved.delta), val(saved.a), val(saved.b), val(saved.c));
    let d = saved.d.map(val);
    let ScanTrace { states: h, a_bar: abar, phi } = &saved.trace;

    let mut du = vec![0.0; l * dm];
    let mut ddelta = vec![0.0; l * dm];
    let mut da = vec![0.0; dm * n];
    let mut db = vec![0.0; l * n];
    let mut dc = vec![0.0; l * n];
    let mut dd = vec![0.0; dm];
    // carry[k] = a_bar_{t+1} · λ_{t+1}
    let mut carry = vec![0.0; dm * n];

    for t in (0..l).rev() {
        let bt = &b[t * n..][..n];
        let ct = &c[t * n..][..n];
        let ht = &h[t * dm * n..][..dm * n];
        let hprev = (t > 0).then(|| &h[(t - 1) * dm * n..][..dm * n]);
        let (dbt, dct) = (&mut db[t * n..][..n], &mut dc[t * n..][..n]);
        for ch in 0..dm {
            let gt = g[t * dm + ch];
            let ut = u[t * dm + ch];
            let dt = delta[t * dm + ch];
            let mut du_acc = 0.0;
            let mut ddelta_acc = 0.0;
            if let Some(d) = d {
                du_acc += d[ch] * gt;
                dd[ch] += gt * ut;
            }
            for j in 0..n {
                let k = ch * n + j;
                let aj = a[ch * n + j];
                dct[j] += gt * ht[k];
                let lam = gt * ct[j] + carry[k];
                let e = (t * dm + ch) * n + j;
                let (a_bar, ph) = (abar[e], phi[e]);
                let (dphi_ddelta, dphi_da) = phi_partials(dt, aj, a_bar, ph);
                let hp = hprev.map_or(0.0, |hp| hp[k]);
                let d_abar = lam * hp;
                let d_phi = lam * bt[j] * ut;
                dbt[j] += lam * ph * ut;
                du_acc += lam * ph * bt[j];
                ddelta_acc += d_abar * aj * a_bar + d_phi * dphi_ddelta;
                da[k] += d_abar * dt * a_bar + d_phi * dphi_da;
                carry[k] = a_bar * lam;
            }
            du[t * dm + ch] += du_acc;
            ddelta[t * dm + ch] += ddelta_acc;
        }
    }
    sink.add(saved.u, &du);
    sink.add(saved.delta, &ddelta);
    sink.add(saved.a, &da);
    sink.add(saved.b, &db);
    sink.add(saved.c, &dc);
    if let Some(id) = saved.d {
        sink.add(id, &dd);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Owned {
        u: Vec<f64>,
        delta: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<f64>,
        l: usize,
        dm: usize,
        n: usize,
    }

    impl Owned {
        fn random(l: usize, dm: usize, n: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = |len: usize, lo: f64, hi: f64| -> Vec<f64> {
                (0..len).map(|_| rng.gen_range(lo..hi)).collect()
            };
            Owned {
                u: v(l * dm, -1.0, 1.0),
                delta: v(l * dm, 0.01, 0.5),
                a: v(dm * n, -3.0, -0.1),
                b: v(l * n, -1.0, 1.0),
                c: v(l * n, -1.0, 1.0),
                d: v(dm, -1.0, 1.0),
                l,
                dm,
                n,
            }
        }

        fn view(&self, skip: bool) -> ScanInputs<'_> {
            ScanInputs {
                u: &self.u,
                delta: &self.delta,
                a: &self.a,
                b: &self.b,
                c: &self.c,
                d: skip.then_some(self.d.as_slice()),
                len: self.l,
                channels: self.dm,
                state: self.n,
            }
        }
    }

    #[test]
    fn zoh_closed_form_at_ln2() {
        let z = zoh(-1.0, std::f64::consts::LN_2).unwrap();
        assert!((z.a_bar - 0.5).abs() <= f64::EPSILON);
        assert!((z.phi - 0.5).abs() <= f64::EPSILON);
    }

    #[test]
    fn zoh_small_step_limit() {
        let z = zoh(-2.0, 1e-12).unwrap();
        assert!((z.a_bar - 1.0).abs() < 1e-11);
        assert!((z.phi - 1e-12).abs() < 1e-22);
    }

    #[test]
    fn zoh_branches_agree_near_switch() {
        for &za in &[1e-6, 1e-5, 1e-4, -1e-4, -1e-6] {
            let a = 1.3_f64.copysign(za);
            let delta = za.abs() / 1.3;
            let (exact, taylor) = zoh_branches(a, delta);
            let rel = (exact - taylor).abs() / exact.abs();
            assert!(rel < 1e-10, "z={za}: {rel}");
        }
    }

    #[test]
    fn exp_pair_matches_libm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut zs: Vec<f64> = (0..20_000).map(|_| rng.gen_range(-60.0..5.0)).collect();
        zs.extend((0..2_000).map(|_| rng.gen_range(-1e-3..1e-3)));
        zs.extend([0.0, -0.0, 1e-300, -699.0, 699.0, std::f64::consts::LN_2]);
        for z in zs {
            let (e, m) = exp_pair(z);
            let rel = |x: f64, r: f64| if r == 0.0 { x.abs() } else { ((x - r) / r).abs() };
            assert!(rel(e, z.exp()) < 4.0 * f64::EPSILON, "exp({z}): {e} vs {}", z.exp());
            assert!(rel(m, z.exp_m1()) < 4.0 * f64::EPSILON, "expm1({z}): {m} vs {}", z.exp_m1());
        }
        assert_eq!(exp_pair(-1e4), (0.0, -1.0));
    }

    #[test]
    fn zoh_rejects_non_positive_step() {
        assert!(zoh(-1.0, 0.0).is_err());
        assert!(zoh(-1.0, -0.5).is_err());
    }

    #[test]
    fn tensor_discretize_broadcasts_b() {
        let a = Tensor::new([2, 2], vec![-1.0, -2.0, -1.0, -2.0]).unwrap();
        let (ab, bb) = zoh_discretize(&a, &[1.0, 3.0], &[std::f64::consts::LN_2, 0.1]).unwrap();
        assert!((ab.data()[0] - 0.5).abs() < 1e-15);
        assert!((bb.data()[0] - 0.5).abs() < 1e-15);
        assert!((bb.data()[3] - 3.0 * (-0.2f64).exp_m1() / -2.0).abs() < 1e-15);
    }

    #[test]
    fn unit_dynamics_accumulate() {
        // a = 0 gives a_bar = 1 and phi = Δ = 1.
        let s = ScanInputs {
            u: &[1.0, 1.0, 1.0],
            delta: &[1.0, 1.0, 1.0],
            a: &[0.0],
            b: &[1.0, 1.0, 1.0],
            c: &[1.0, 1.0, 1.0],
            d: None,
            len: 3,
            channels: 1,
            state: 1,
        };
        assert_eq!(selective_scan_reference(&s).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn fully_decayed_state_is_memoryless() {
        let mut o = Owned::random(6, 2, 3, 1);
        o.a.iter_mut().for_each(|a| *a = -1e300);
        let y = selective_scan_reference(&o.view(true)).unwrap();
        for t in 0..o.l {
            for ch in 0..o.dm {
                let mut want = o.d[ch] * o.u[t * o.dm + ch];
                for j in 0..o.n {
                    let phi = discretize(o.delta[t * o.dm + ch], o.a[ch * o.n + j]).1;
                    want += o.c[t * o.n + j] * phi * o.b[t * o.n + j] * o.u[t * o.dm + ch];
                }
                assert!((y[t * o.dm + ch] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut o = Owned::random(5, 3, 2, 2);
        o.u.iter_mut().for_each(|u| *u = 0.0);
        assert!(selective_scan_reference(&o.view(true)).unwrap().iter().all(|&y| y == 0.0));
    }

    #[test]
    fn empty_sequence_is_input_error() {
        let s = ScanInputs {
            u: &[],
            delta: &[],
            a: &[-1.0],
            b: &[],
            c: &[],
            d: None,
            len: 0,
            channels: 1,
            state: 1,
        };
        assert!(matches!(selective_scan_reference(&s), Err(Error::Input(_))));
    }

    #[test]
    fn oracle_impulse_response_is_geometric() {
        let l = 6;
        let x: Vec<f64> = (0..l).map(|t| if t == 0 { 1.0 } else { 0.0 }).collect();
        let row = |v: f64| Tensor::full([l, 1], v);
        let y = scan_convolution_oracle(&x, &row(0.5), &row(2.0), &row(3.0)).unwrap();
        for (t, v) in y.iter().enumerate() {
            assert!((v - 3.0 * 0.5f64.powi(t as i32) * 2.0).abs() < 1e-15);
        }
        let single = |v: f64| Tensor::full([2, 1], v);
        let y0 = scan_convolution_oracle(&[1.0, 4.0], &single(0.0), &single(2.0), &single(3.0)).unwrap();
        assert_eq!(y0, vec![6.0, 24.0]);
    }

    #[test]
    fn oracle_rejects_time_varying_parameters() {
        let mut a = Tensor::full([3, 1], 0.5);
        a.data_mut()[2] = 0.4;
        let r = scan_convolution_oracle(&[1.0; 3], &a, &Tensor::full([3, 1], 1.0), &Tensor::full([3, 1], 1.0));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn recurrence_matches_convolution_for_time_invariant_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let l = rng.gen_range(1..=64);
            let n = rng.gen_range(1..=4);
            let delta: f64 = rng.gen_range(0.01..1.0);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..-0.05)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = ScanInputs {
                u: &x,
                delta: &vec![delta; l],
                a: &a,
                b: &b.repeat(l),
                c: &c.repeat(l),
                d: None,
                len: l,
                channels: 1,
                state: n,
            };
            let y = selective_scan_reference(&s).unwrap();
            let (ab, bb) = zoh_discretize(&Tensor::new([1, n], a.clone()).unwrap(), &b, &[delta]).unwrap();
            let tile = |t: &Tensor| Tensor::new([l, n], t.data().repeat(l)).unwrap();
            let c_t = Tensor::new([l, n], c.repeat(l)).unwrap();
            let want = scan_convolution_oracle(&x, &tile(&ab), &tile(&bb), &c_t).unwrap();
            let diff = y.iter().zip(&want).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-10, "{diff}");
        }
    }

    #[test]
    fn var_scan_matches_reference() {
        let o = Owned::random(7, 3, 2, 4);
        let tape = Tape::new();
        let t = |shape: &[usize], v: &[f64]| tape.constant(Tensor::new(shape.to_vec(), v.to_vec()).unwrap());
        let y = t(&[7, 3], &o.u)
            .selective_scan(
                t(&[7, 3], &o.delta),
                t(&[3, 2], &o.a),
                t(&[7, 2], &o.b),
                t(&[7, 2], &o.c),
                Some(t(&[3], &o.d)),
            )
            .unwrap();
        assert_eq!(y.value().data(), selective_scan_reference(&o.view(true)).unwrap().as_slice());
    }

    #[test]
    fn gradcheck_all_scan_operands() {
        for (skip, taylor) in [(true, false), (false, false), (true, true)] {
            let mut o = Owned::random(6, 3, 4, 5);
            if taylor {
                // |Δa| stays below the switch even under perturbation.
                o.a.iter_mut().for_each(|a| *a *= 1e-5);
            }
            let mut inputs = vec![
                Tensor::new([6, 3], o.u.clone()).unwrap(),
                Tensor::new([6, 3], o.delta.clone()).unwrap(),
                Tensor::new([3, 4], o.a.clone()).unwrap(),
                Tensor::new([6, 4], o.b.clone()).unwrap(),
                Tensor::new([6, 4], o.c.clone()).unwrap(),
            ];
            if skip {
                inputs.push(Tensor::new([3], o.d.clone()).unwrap());
            }
            let eps = if taylor { 1e-6 } else { 1e-5 };
            let rep = grad_check(
                |tape, v| {
                    let w = tape.constant(Tensor::from_fn([6, 3], |i| (i as f64 * 0.7).sin()));
                    v[0].selective_scan(v[1], v[2], v[3], v[4], v.get(5).copied())?
                        .mul(w)?
                        .sum()
                },
                &inputs,
                eps,
            )
            .unwrap();
            assert!(rep.max_rel_error <= 1e-5, "skip={skip} taylor={taylor}: {rep:?}");
        }
    }

    proptest! {
        #[test]
        fn chunked_matches_sequential(l in 1usize..40, dm in 1usize..4, n in 1usize..5, chunk in 1usize..12, seed in 0u64..1000) {
            let o = Owned::random(l, dm, n, seed);
            let seq = selective_scan_reference(&o.view(true)).unwrap();
            let blk = selective_scan_chunked(&o.view(true), chunk).unwrap();
            for (p, q) in seq.iter().zip(&blk) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }

        #[test]
        fn state_stays_bounded(l in 1usize..200, seed in 0u64..1000) {
            let mut o = Owned::random(l, 2, 3, seed);
            o.d.iter_mut().for_each(|d| *d = 0.0);
            let y = selective_scan_reference(&o.view(false)).unwrap();
            // |h| ≤ sup|phi b u| / (1 − sup a_bar), and phi ≤ Δ for a < 0.
            let mut drive: f64 = 0.0;
            let mut a_sup: f64 = 0.0;
            for t in 0..l {
                for ch in 0..2 {
                    let dt = o.delta[t * 2 + ch];
                    for j in 0..3 {
                        a_sup = a_sup.max((dt * o.a[ch * 3 + j]).exp());
                        drive = drive.max(dt * (o.b[t * 3 + j] * o.u[t * 2 + ch]).abs());
                    }
                }
            }
            let bound = 3.0 * drive / (1.0 - a_sup);
            prop_assert!(y.iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
        }
    }
}
