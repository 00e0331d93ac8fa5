//! LQ paths advanced in lockstep, stored component-major (`[component][lane]`)
//! so the inner loops run over lanes. Each lane performs exactly the
//! operations of `LqModel::integrate` followed by `LqModel::fused`, in the
//! same order, so results match the per-path simulator bit for bit.

use super::{Integrands, LqModel, Query};

/// `out += A x` lane-wise, `a` column-major with `rows` rows.
#[inline(always)]
fn mvb(out: &mut [f64], a: &[f64], rows: usize, x: &[f64], nb: usize) {
    let cols = x.len() / nb;
    for j in 0..cols {
        let xj = &x[j * nb..(j + 1) * nb];
        for i in 0..rows {
            let aij = a[j * rows + i];
            let o = &mut out[i * nb..(i + 1) * nb];
            for (o, &x) in o.iter_mut().zip(xj) {
                *o += aij * x;
            }
        }
    }
}

/// `acc[b] = Σ_c u[c][b]·v[c][b]` lane-wise, summed from zero.
#[inline(always)]
fn dotb(acc: &mut [f64], u: &[f64], v: &[f64], nb: usize) {
    acc.fill(0.0);
    for (uc, vc) in u.chunks_exact(nb).zip(v.chunks_exact(nb)) {
        for ((a, &p), &q) in acc.iter_mut().zip(uc).zip(vc) {
            *a += p * q;
        }
    }
}

fn finite(flags: &mut [bool], v: &[f64], nb: usize) {
    for c in v.chunks_exact(nb) {
        for (f, s) in flags.iter_mut().zip(c) {
            *f &= s.is_finite();
        }
    }
}

pub(super) fn lq_integrands(
    model: &LqModel<'_>,
    start: usize,
    x0: &[f64],
    dw: &[f64],
    nb: usize,
    query: &Query,
) -> Vec<Option<Integrands>> {
    if nb == 0 {
        return Vec::new();
    }
    let spec = model.spec;
    let grid = &spec.grid;
    let dt = grid.dt();
    let (nx, na, nw) = (spec.state_dim(), spec.control_dim(), spec.noise_dim());
    let (nd, np) = (model.dirs.len(), model.pairs.len());
    let nodes = grid.len() - start;
    let n_inc = (nodes - 1) * nw;
    let (sx, sa) = (nx * nb, na * nb);

    let mut x = vec![0.0; sx];
    for (c, &v) in x0.iter().enumerate() {
        x[c * nb..(c + 1) * nb].fill(v);
    }
    let mut y = vec![0.0; nd * sx];
    let mut z = vec![0.0; np * sx];
    let (mut xn, mut yn, mut zn) = (vec![0.0; sx], vec![0.0; nd * sx], vec![0.0; np * sx]);
    let mut alpha = vec![0.0; sa];
    let mut dalpha = vec![0.0; nd * sa];
    let mut d2alpha = vec![0.0; np * sa];
    let (mut su, mut sv) = (vec![0.0; sx], vec![0.0; sx]);
    let (mut au, mut av) = (vec![0.0; sa], vec![0.0; sa]);
    let mut dwk = vec![0.0; nw * nb];
    let mut ok = vec![true; nb];

    let (nv, nf, ns) = (query.values.len(), query.first.len(), query.second.len());
    let mut acc_v = vec![0.0; nv * nb];
    let mut acc_f = vec![0.0; nf * nb];
    let mut acc_s = vec![0.0; ns * nb];
    let mut agents: Vec<usize> = query
        .values
        .iter()
        .chain(query.first.iter().map(|(i, _)| i))
        .chain(query.second.iter().map(|(i, _)| i))
        .copied()
        .collect();
    agents.sort_unstable();
    agents.dedup();
    let need_dirs = ns > 0;
    let (mut qx, mut ra) = (vec![0.0; sx], vec![0.0; sa]);
    let (mut qy, mut rda) = (vec![0.0; nd * sx], vec![0.0; nd * sa]);
    let (mut ga, mut gb) = (vec![0.0; sx], vec![0.0; sx]);
    let (mut t1, mut t2, mut t3, mut t4) = (vec![0.0; nb], vec![0.0; nb], vec![0.0; nb], vec![0.0; nb]);

    for k in 0..nodes {
        let m = start + k;
        let km = model.k[m].as_slice();
        let last = k + 1 == nodes;

        // Controls and their sensitivities.
        alpha.fill(0.0);
        mvb(&mut alpha, km, na, &x, nb);
        for (d, dir) in model.dirs.iter().enumerate() {
            let out = &mut dalpha[d * sa..(d + 1) * sa];
            out.fill(0.0);
            mvb(out, km, na, &y[d * sx..(d + 1) * sx], nb);
            let g = &dir.gain[m];
            mvb(&mut out[dir.range.start * nb..dir.range.end * nb], g.as_slice(), g.nrows(), &x, nb);
        }
        for (p, &(a, b)) in model.pairs.iter().enumerate() {
            let (da, db) = (&model.dirs[a], &model.dirs[b]);
            au.fill(0.0);
            av.fill(0.0);
            let (gga, ggb) = (&da.gain[m], &db.gain[m]);
            mvb(&mut au[db.range.start * nb..db.range.end * nb], ggb.as_slice(), ggb.nrows(), &y[a * sx..(a + 1) * sx], nb);
            mvb(&mut av[da.range.start * nb..da.range.end * nb], gga.as_slice(), gga.nrows(), &y[b * sx..(b + 1) * sx], nb);
            let out = &mut d2alpha[p * sa..(p + 1) * sa];
            for ((o, u), v) in out.iter_mut().zip(&au).zip(&av) {
                *o = u + v;
            }
            mvb(out, km, na, &z[p * sx..(p + 1) * sx], nb);
        }
        for v in [&x, &y, &z, &alpha, &dalpha, &d2alpha] {
            finite(&mut ok, v, nb);
        }

        // Running cost, trapezoid weights.
        let w = if k == 0 || last { 0.5 * dt } else { dt };
        for &i in &agents {
            let c = &spec.agents[i];
            let (q, r) = (c.q.node(m), c.r.node(m));
            qx.fill(0.0);
            mvb(&mut qx, q.as_slice(), q.nrows(), &x, nb);
            ra.fill(0.0);
            mvb(&mut ra, r.as_slice(), r.nrows(), &alpha, nb);
            if need_dirs {
                qy.fill(0.0);
                rda.fill(0.0);
                for d in 0..nd {
                    mvb(&mut qy[d * sx..(d + 1) * sx], q.as_slice(), q.nrows(), &y[d * sx..(d + 1) * sx], nb);
                    mvb(&mut rda[d * sa..(d + 1) * sa], r.as_slice(), r.nrows(), &dalpha[d * sa..(d + 1) * sa], nb);
                }
            }
            for (e, _) in query.values.iter().enumerate().filter(|(_, &j)| j == i) {
                dotb(&mut t1, &qx, &x, nb);
                dotb(&mut t2, &ra, &alpha, nb);
                for (o, (u, v)) in acc_v[e * nb..(e + 1) * nb].iter_mut().zip(t1.iter().zip(&t2)) {
                    *o += w * 0.5 * (u + v);
                }
            }
            for (e, &(_, d)) in query.first.iter().enumerate().filter(|(_, &(j, _))| j == i) {
                dotb(&mut t1, &qx, &y[d * sx..(d + 1) * sx], nb);
                dotb(&mut t2, &ra, &dalpha[d * sa..(d + 1) * sa], nb);
                for (o, (u, v)) in acc_f[e * nb..(e + 1) * nb].iter_mut().zip(t1.iter().zip(&t2)) {
                    *o += w * (u + v);
                }
            }
            for (e, &(_, p)) in query.second.iter().enumerate().filter(|(_, &(j, _))| j == i) {
                let (a, b) = model.pairs[p];
                let (ya, yb) = (&y[a * sx..(a + 1) * sx], &y[b * sx..(b + 1) * sx]);
                let (dxa, dxb) = (&dalpha[a * sa..(a + 1) * sa], &dalpha[b * sa..(b + 1) * sa]);
                dotb(&mut t1, &qy[a * sx..(a + 1) * sx], yb, nb);
                dotb(&mut t2, &qy[b * sx..(b + 1) * sx], ya, nb);
                dotb(&mut t3, &rda[a * sa..(a + 1) * sa], dxb, nb);
                dotb(&mut t4, &rda[b * sa..(b + 1) * sa], dxa, nb);
                let o = &mut acc_s[e * nb..(e + 1) * nb];
                for l in 0..nb {
                    let sq = 0.5 * (t1[l] + t2[l]);
                    let sr = 0.5 * (t3[l] + t4[l]);
                    t1[l] = sq + sr;
                }
                dotb(&mut t2, &qx, &z[p * sx..(p + 1) * sx], nb);
                dotb(&mut t3, &ra, &d2alpha[p * sa..(p + 1) * sa], nb);
                for l in 0..nb {
                    o[l] += w * (t1[l] + t2[l] + t3[l]);
                }
            }
            if last {
                let g = c.g.as_slice();
                qx.fill(0.0);
                mvb(&mut qx, g, nx, &x, nb);
                for (e, _) in query.values.iter().enumerate().filter(|(_, &j)| j == i) {
                    dotb(&mut t1, &qx, &x, nb);
                    for (o, u) in acc_v[e * nb..(e + 1) * nb].iter_mut().zip(&t1) {
                        *o += 0.5 * u;
                    }
                }
                for (e, &(_, d)) in query.first.iter().enumerate().filter(|(_, &(j, _))| j == i) {
                    dotb(&mut t1, &qx, &y[d * sx..(d + 1) * sx], nb);
                    for (o, u) in acc_f[e * nb..(e + 1) * nb].iter_mut().zip(&t1) {
                        *o += u;
                    }
                }
                for (e, &(_, p)) in query.second.iter().enumerate().filter(|(_, &(j, _))| j == i) {
                    let (a, b) = model.pairs[p];
                    let (ya, yb) = (&y[a * sx..(a + 1) * sx], &y[b * sx..(b + 1) * sx]);
                    ga.fill(0.0);
                    gb.fill(0.0);
                    mvb(&mut ga, g, nx, ya, nb);
                    mvb(&mut gb, g, nx, yb, nb);
                    dotb(&mut t1, &ga, yb, nb);
                    dotb(&mut t2, &gb, ya, nb);
                    dotb(&mut t3, &qx, &z[p * sx..(p + 1) * sx], nb);
                    for (l, o) in acc_s[e * nb..(e + 1) * nb].iter_mut().enumerate() {
                        *o += 0.5 * (t1[l] + t2[l]) + t3[l];
                    }
                }
            }
        }
        if last {
            break;
        }

        // Euler–Maruyama step.
        for l in 0..nb {
            for j in 0..nw {
                dwk[j * nb + l] = dw[l * n_inc + k * nw + j];
            }
        }
        let lm = model.l[m].as_slice();
        su.fill(0.0);
        mvb(&mut su, lm, nx, &x, nb);
        sv.fill(0.0);
        mvb(&mut sv, spec.sigma.as_slice(), nx, &dwk, nb);
        for (((o, c), u), v) in xn.iter_mut().zip(&x).zip(&su).zip(&sv) {
            *o = c + (dt * u + v);
        }
        for (d, dir) in model.dirs.iter().enumerate() {
            let cur = &y[d * sx..(d + 1) * sx];
            su.fill(0.0);
            mvb(&mut su, lm, nx, cur, nb);
            mvb(&mut su, dir.bk[m].as_slice(), nx, &x, nb);
            for ((o, c), u) in yn[d * sx..(d + 1) * sx].iter_mut().zip(cur).zip(&su) {
                *o = c + dt * u;
            }
        }
        for (p, &(a, b)) in model.pairs.iter().enumerate() {
            su.fill(0.0);
            sv.fill(0.0);
            mvb(&mut su, model.dirs[b].bk[m].as_slice(), nx, &y[a * sx..(a + 1) * sx], nb);
            mvb(&mut sv, model.dirs[a].bk[m].as_slice(), nx, &y[b * sx..(b + 1) * sx], nb);
            let cur = &z[p * sx..(p + 1) * sx];
            let next = &mut zn[p * sx..(p + 1) * sx];
            for ((o, u), v) in next.iter_mut().zip(&su).zip(&sv) {
                *o = u + v;
            }
            mvb(next, lm, nx, cur, nb);
            for (o, c) in next.iter_mut().zip(cur) {
                *o = c + dt * *o;
            }
        }
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut y, &mut yn);
        std::mem::swap(&mut z, &mut zn);
    }

    let lane = |acc: &[f64], n: usize, l: usize| -> Vec<f64> { (0..n).map(|e| acc[e * nb + l]).collect() };
    (0..nb)
        .map(|l| {
            let s = Integrands {
                values: lane(&acc_v, nv, l),
                first: lane(&acc_f, nf, l),
                second: lane(&acc_s, ns, l),
            };
            (ok[l] && s.all_finite()).then_some(s)
        })
        .collect()
}
