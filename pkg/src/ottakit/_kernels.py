"""Fused batch forward/backward of the dual-head network (numba).

Mirrors ``model.loss_and_grads`` term by term. Per run, the whole batch is
laid out feature-major: activations are ``(features, S * n)`` with column
``s * n + b`` holding token ``s`` of item ``b``. The innermost loops then
run over the batch columns, which the compiler can vectorize. Block weights
are passed stacked as ``(R, E, ...)``; every other tensor as ``(R, ...)``.
"""

import math

import numba
import numpy as np

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327
_LN_EPS = 1e-5
_FM = {"reassoc", "contract", "nsz", "arcp"}


@numba.njit(cache=True, fastmath=_FM)
def _mm(w, x, out, N):
    # out[j, n] = sum_i w[i, j] * x[i, n]
    n_in, n_out = w.shape
    for j in range(n_out):
        for n in range(N):
            out[j, n] = 0.0
        for i in range(n_in):
            wij = w[i, j]
            for n in range(N):
                out[j, n] += wij * x[i, n]


@numba.njit(cache=True, fastmath=_FM)
def _mm_t(w, dy, out, N, acc):
    # out[i, n] (+)= sum_j w[i, j] * dy[j, n]
    n_in, n_out = w.shape
    for i in range(n_in):
        if not acc:
            for n in range(N):
                out[i, n] = 0.0
        for j in range(n_out):
            wij = w[i, j]
            for n in range(N):
                out[i, n] += wij * dy[j, n]


@numba.njit(cache=True, fastmath=_FM)
def _gw(x, dy, gw, N):
    # gw[i, j] += sum_n x[i, n] * dy[j, n]
    n_in, n_out = gw.shape
    for i in range(n_in):
        for j in range(n_out):
            acc = 0.0
            for n in range(N):
                acc += x[i, n] * dy[j, n]
            gw[i, j] += acc


@numba.njit(cache=True, fastmath=_FM)
def _rowsum_acc(dy, g, N):
    for j in range(dy.shape[0]):
        acc = 0.0
        for n in range(N):
            acc += dy[j, n]
        g[j] += acc


@numba.njit(cache=True, fastmath=_FM)
def _add_bias(y, b, N):
    for j in range(y.shape[0]):
        bj = b[j]
        for n in range(N):
            y[j, n] += bj


@numba.njit(cache=True, fastmath=_FM)
def _ln_fwd(x, gamma, beta, xh, inv, y, mu, N):
    h = x.shape[0]
    for n in range(N):
        mu[n] = 0.0
        inv[n] = 0.0
    for j in range(h):
        for n in range(N):
            mu[n] += x[j, n]
    for n in range(N):
        mu[n] /= h
    for j in range(h):
        for n in range(N):
            t = x[j, n] - mu[n]
            inv[n] += t * t
    for n in range(N):
        inv[n] = 1.0 / math.sqrt(inv[n] / h + _LN_EPS)
    for j in range(h):
        g = gamma[j]
        be = beta[j]
        for n in range(N):
            t = (x[j, n] - mu[n]) * inv[n]
            xh[j, n] = t
            y[j, n] = t * g + be


@numba.njit(cache=True, fastmath=_FM)
def _ln_bwd(dy, gamma, xh, inv, dx_acc, ggamma, gbeta, m1, m2, N):
    # dx_acc += dLN/dx; gradients of gamma/beta accumulated
    h = dy.shape[0]
    for n in range(N):
        m1[n] = 0.0
        m2[n] = 0.0
    for j in range(h):
        g = gamma[j]
        ag = 0.0
        ab = 0.0
        for n in range(N):
            dyn = dy[j, n]
            d = dyn * g
            m1[n] += d
            m2[n] += d * xh[j, n]
            ag += dyn * xh[j, n]
            ab += dyn
        ggamma[j] += ag
        gbeta[j] += ab
    for n in range(N):
        m1[n] /= h
        m2[n] /= h
    for j in range(h):
        g = gamma[j]
        for n in range(N):
            dx_acc[j, n] += inv[n] * (dy[j, n] * g - m1[n] - xh[j, n] * m2[n])


@numba.njit(cache=True, fastmath=_FM)
def _gelu_fwd(u, g, dg, N):
    for j in range(u.shape[0]):
        for n in range(N):
            x = u[j, n]
            cdf = 0.5 + 0.5 * math.erf(x * _INV_SQRT2)
            g[j, n] = x * cdf
            dg[j, n] = cdf + x * math.exp(-0.5 * x * x) * _INV_SQRT_2PI


@numba.njit(cache=True, fastmath=_FM)
def _encode(X, mcol, masked, nb, S, ew, eb, pos, mtok, wq, wk, wv, wo, w1, b1, w2, b2, g1, be1, g2, be2,
            xs, xh1, inv1, a, q, k, v, P, o, x1, xh2, inv2, c, u, gg, dgg, tmp_h, vec):
    """Encoder forward over ``nb`` items; caches everything the backward needs."""
    N = S * nb
    E = wq.shape[0]
    h = ew.shape[1]
    scale = 1.0 / math.sqrt(h)
    x0 = xs[0]
    _mm(ew, X, x0, N)
    for j in range(h):
        ebj = eb[j]
        mj = mtok[j]
        for s in range(S):
            pj = pos[s, j]
            for b in range(nb):
                n = s * nb + b
                if masked and mcol[n]:
                    x0[j, n] = mj + pj
                else:
                    x0[j, n] += ebj + pj
    for bk in range(E):
        xin = xs[bk]
        _ln_fwd(xin, g1[bk], be1[bk], xh1[bk], inv1[bk], a[bk], vec, N)
        _mm(wq[bk], a[bk], q[bk], N)
        _mm(wk[bk], a[bk], k[bk], N)
        _mm(wv[bk], a[bk], v[bk], N)
        qb = q[bk]
        kb = k[bk]
        vb = v[bk]
        Pb = P[bk]
        for s in range(S):
            for t in range(S):
                for b in range(nb):
                    Pb[s, t, b] = 0.0
                for j in range(h):
                    for b in range(nb):
                        Pb[s, t, b] += qb[j, s * nb + b] * kb[j, t * nb + b]
            for b in range(nb):
                mx = -1e300
                for t in range(S):
                    val = Pb[s, t, b] * scale
                    Pb[s, t, b] = val
                    if val > mx:
                        mx = val
                tot = 0.0
                for t in range(S):
                    e = math.exp(Pb[s, t, b] - mx)
                    Pb[s, t, b] = e
                    tot += e
                for t in range(S):
                    Pb[s, t, b] /= tot
            for j in range(h):
                for b in range(nb):
                    o[bk, j, s * nb + b] = 0.0
                for t in range(S):
                    for b in range(nb):
                        o[bk, j, s * nb + b] += Pb[s, t, b] * vb[j, t * nb + b]
        _mm(wo[bk], o[bk], tmp_h, N)
        for j in range(h):
            for n in range(N):
                x1[bk, j, n] = xin[j, n] + tmp_h[j, n]
        _ln_fwd(x1[bk], g2[bk], be2[bk], xh2[bk], inv2[bk], c[bk], vec, N)
        _mm(w1[bk], c[bk], u[bk], N)
        _add_bias(u[bk], b1[bk], N)
        _gelu_fwd(u[bk], gg[bk], dgg[bk], N)
        _mm(w2[bk], gg[bk], tmp_h, N)
        xo = xs[bk + 1]
        for j in range(h):
            bj = b2[bk, j]
            for n in range(N):
                xo[j, n] = x1[bk, j, n] + tmp_h[j, n] + bj


@numba.njit(cache=True, fastmath=_FM)
def _encode_back(dx, X, mcol, masked, nb, S, ew, wq, wk, wv, wo, w1, w2, g1, g2,
                 G_ew, G_eb, G_pos, G_mtok, G_wq, G_wk, G_wv, G_wo, G_w1, G_b1, G_w2, G_b2,
                 G_g1, G_be1, G_g2, G_be2,
                 xh1, inv1, a, q, k, v, P, o, xh2, inv2, c, gg, dgg,
                 tmp_h, tmp_h2, du, dx1, dq, dk, dv, do, dP, m1, m2):
    """Backpropagate ``dx`` (gradient at the encoder output) into the G_* buffers."""
    N = S * nb
    E = wq.shape[0]
    h = ew.shape[1]
    H4 = w1.shape[2]
    d = ew.shape[0]
    scale = 1.0 / math.sqrt(h)
    for bk in range(E - 1, -1, -1):
        # MLP
        _gw(gg[bk], dx, G_w2[bk], N)
        _rowsum_acc(dx, G_b2[bk], N)
        _mm_t(w2[bk], dx, du, N, False)
        for j in range(H4):
            for n in range(N):
                du[j, n] *= dgg[bk, j, n]
        _gw(c[bk], du, G_w1[bk], N)
        _rowsum_acc(du, G_b1[bk], N)
        _mm_t(w1[bk], du, tmp_h, N, False)
        for j in range(h):
            for n in range(N):
                dx1[j, n] = dx[j, n]
        _ln_bwd(tmp_h, g2[bk], xh2[bk], inv2[bk], dx1, G_g2[bk], G_be2[bk], m1, m2, N)
        # attention
        _gw(o[bk], dx1, G_wo[bk], N)
        _mm_t(wo[bk], dx1, do, N, False)
        qb = q[bk]
        kb = k[bk]
        vb = v[bk]
        Pb = P[bk]
        for j in range(h):
            for n in range(N):
                dv[j, n] = 0.0
                dq[j, n] = 0.0
                dk[j, n] = 0.0
        for s in range(S):
            for t in range(S):
                for b in range(nb):
                    dP[s, t, b] = 0.0
                for j in range(h):
                    for b in range(nb):
                        dP[s, t, b] += do[j, s * nb + b] * vb[j, t * nb + b]
                        dv[j, t * nb + b] += Pb[s, t, b] * do[j, s * nb + b]
            for b in range(nb):
                dot = 0.0
                for t in range(S):
                    dot += dP[s, t, b] * Pb[s, t, b]
                for t in range(S):
                    dP[s, t, b] = Pb[s, t, b] * (dP[s, t, b] - dot) * scale
            for t in range(S):
                for j in range(h):
                    for b in range(nb):
                        dq[j, s * nb + b] += dP[s, t, b] * kb[j, t * nb + b]
                        dk[j, t * nb + b] += dP[s, t, b] * qb[j, s * nb + b]
        _gw(a[bk], dq, G_wq[bk], N)
        _gw(a[bk], dk, G_wk[bk], N)
        _gw(a[bk], dv, G_wv[bk], N)
        _mm_t(wq[bk], dq, tmp_h, N, False)
        _mm_t(wk[bk], dk, tmp_h, N, True)
        _mm_t(wv[bk], dv, tmp_h, N, True)
        for j in range(h):
            for n in range(N):
                dx[j, n] = dx1[j, n]
        _ln_bwd(tmp_h, g1[bk], xh1[bk], inv1[bk], dx, G_g1[bk], G_be1[bk], m1, m2, N)
    # embedding: masked positions feed the mask token, the rest feed the projection
    for j in range(h):
        am = 0.0
        ab = 0.0
        for s in range(S):
            ap = 0.0
            for b in range(nb):
                n = s * nb + b
                g = dx[j, n]
                ap += g
                if masked and mcol[n]:
                    am += g
                    tmp_h2[j, n] = 0.0
                else:
                    ab += g
                    tmp_h2[j, n] = g
            G_pos[s, j] += ap
        G_mtok[j] += am
        G_eb[j] += ab
    _gw(X, tmp_h2, G_ew, N)


@numba.njit(cache=True, fastmath=_FM)
def batch_loss_grads(
    tokens, masks, labels, labeled, recon_weight, lam, sh_a, sh_c,
    ew, eb, pos, mtok, wq, wk, wv, wo, w1, b1, w2, b2, g1, be1, g2, be2,
    dw1, db1, dw2, db2, rw1, rb1, rw2, rb2,
    G_ew, G_eb, G_pos, G_mtok, G_wq, G_wk, G_wv, G_wo, G_w1, G_b1, G_w2, G_b2, G_g1, G_be1, G_g2, G_be2,
    G_dw1, G_db1, G_dw2, G_db2, G_rw1, G_rb1, G_rw2, G_rb2,
    item_loss,
):
    R, B, S, d = tokens.shape
    h = ew.shape[2]
    E = wq.shape[1]
    H4 = w1.shape[3]
    NM = S * B
    use_recon = recon_weight != 0.0
    lab_items = np.empty(B, dtype=np.int64)
    nl = 0
    if lam != 0.0:
        for i in range(B):
            if labeled[i]:
                lab_items[nl] = i
                nl += 1

    # scratch, reused for every run and both passes
    X = np.empty((d, NM))
    mcol = np.zeros(NM, dtype=np.bool_)
    xs = np.empty((E + 1, h, NM))
    xh1 = np.empty((E, h, NM))
    inv1 = np.empty((E, NM))
    a = np.empty((E, h, NM))
    q = np.empty((E, h, NM))
    k = np.empty((E, h, NM))
    v = np.empty((E, h, NM))
    P = np.empty((E, S, S, B))
    o = np.empty((E, h, NM))
    x1 = np.empty((E, h, NM))
    xh2 = np.empty((E, h, NM))
    inv2 = np.empty((E, NM))
    c = np.empty((E, h, NM))
    u = np.empty((E, H4, NM))
    gg = np.empty((E, H4, NM))
    dgg = np.empty((E, H4, NM))
    tmp_h = np.empty((h, NM))
    tmp_h2 = np.empty((h, NM))
    du = np.empty((H4, NM))
    dx = np.empty((h, NM))
    dx1 = np.empty((h, NM))
    dq = np.empty((h, NM))
    dk = np.empty((h, NM))
    dv = np.empty((h, NM))
    do = np.empty((h, NM))
    dP = np.empty((S, S, B))
    vec = np.empty(NM)
    m1 = np.empty(NM)
    m2 = np.empty(NM)
    hd = np.empty((h, NM))
    gd = np.empty((h, NM))
    dgd = np.empty((h, NM))
    rec = np.empty((d, NM))
    pooled = np.empty((h, B))
    hr = np.empty((h, B))
    gr = np.empty((h, B))
    dgr = np.empty((h, B))
    yv = np.empty((2, B))
    dy = np.empty((2, B))
    dh1 = np.empty((h, B))
    denom = np.empty(B)

    for r in range(R):
        for i in range(B):
            item_loss[r, i] = 0.0
        for pas in range(2):
            if pas == 0:
                if not use_recon:
                    continue
                masked = True
                nb = B
            else:
                if nl == 0:
                    continue
                masked = False
                nb = nl
            N = S * nb
            for s in range(S):
                for b in range(nb):
                    n = s * nb + b
                    item = b if masked else lab_items[b]
                    mcol[n] = masks[r, item, s] if masked else False
                    for ii in range(d):
                        X[ii, n] = tokens[r, item, s, ii]
            _encode(X, mcol, masked, nb, S, ew[r], eb[r], pos[r], mtok[r], wq[r], wk[r], wv[r], wo[r],
                    w1[r], b1[r], w2[r], b2[r], g1[r], be1[r], g2[r], be2[r],
                    xs, xh1, inv1, a, q, k, v, P, o, x1, xh2, inv2, c, u, gg, dgg, tmp_h, vec)
            xE = xs[E]

            # heads -> dx (gradient wrt encoder output)
            if masked:
                _mm(dw1[r], xE, hd, N)
                _add_bias(hd, db1[r], N)
                _gelu_fwd(hd, gd, dgd, N)
                _mm(dw2[r], gd, rec, N)
                for b in range(B):
                    nm = 0
                    for s in range(S):
                        if mcol[s * B + b]:
                            nm += 1
                    denom[b] = nm * d
                # rec becomes drec in place
                for ii in range(d):
                    bias = db2[r, ii]
                    for s in range(S):
                        for b in range(B):
                            n = s * B + b
                            if mcol[n]:
                                diff = rec[ii, n] + bias - X[ii, n]
                                item_loss[r, b] += recon_weight * diff * diff / denom[b]
                                rec[ii, n] = 2.0 * recon_weight / B * diff / denom[b]
                            else:
                                rec[ii, n] = 0.0
                _gw(gd, rec, G_dw2[r], N)
                _rowsum_acc(rec, G_db2[r], N)
                _mm_t(dw2[r], rec, tmp_h, N, False)
                for j in range(h):
                    for n in range(N):
                        tmp_h[j, n] *= dgd[j, n]
                _gw(xE, tmp_h, G_dw1[r], N)
                _rowsum_acc(tmp_h, G_db1[r], N)
                _mm_t(dw1[r], tmp_h, dx, N, False)
            else:
                for j in range(h):
                    for b in range(nb):
                        acc = 0.0
                        for s in range(S):
                            acc += xE[j, s * nb + b]
                        pooled[j, b] = acc / S
                _mm(rw1[r], pooled, hr, nb)
                _add_bias(hr, rb1[r], nb)
                _gelu_fwd(hr, gr, dgr, nb)
                _mm(rw2[r], gr, yv, nb)
                for b in range(nb):
                    item = lab_items[b]
                    sh = 0.0
                    for j in range(2):
                        res = yv[j, b] + rb2[r, j] - labels[r, item, j]
                        l = abs(res)
                        sig = 1.0 / (1.0 + math.exp(sh_a * (sh_c - l)))
                        sh += l * l * sig
                        dy[j, b] = lam / B * 0.5 * (2.0 * res * sig + sh_a * res * l * sig * (1.0 - sig))
                    item_loss[r, item] += lam * sh / 2.0
                _gw(gr, dy, G_rw2[r], nb)
                _rowsum_acc(dy, G_rb2[r], nb)
                _mm_t(rw2[r], dy, dh1, nb, False)
                for j in range(h):
                    for b in range(nb):
                        dh1[j, b] *= dgr[j, b]
                _gw(pooled, dh1, G_rw1[r], nb)
                _rowsum_acc(dh1, G_rb1[r], nb)
                _mm_t(rw1[r], dh1, pooled, nb, False)
                for j in range(h):
                    for s in range(S):
                        for b in range(nb):
                            dx[j, s * nb + b] = pooled[j, b] / S

            _encode_back(dx, X, mcol, masked, nb, S, ew[r], wq[r], wk[r], wv[r], wo[r], w1[r], w2[r],
                         g1[r], g2[r],
                         G_ew[r], G_eb[r], G_pos[r], G_mtok[r], G_wq[r], G_wk[r], G_wv[r], G_wo[r],
                         G_w1[r], G_b1[r], G_w2[r], G_b2[r], G_g1[r], G_be1[r], G_g2[r], G_be2[r],
                         xh1, inv1, a, q, k, v, P, o, xh2, inv2, c, gg, dgg,
                         tmp_h, tmp_h2, du, dx1, dq, dk, dv, do, dP, m1, m2)
