"""Hot inner loops, each in a numba-compiled form and a pure-numpy twin.

The backend is picked once, at import time.  Numba is used when it imports
cleanly unless ``HESTONFQI_DISABLE_NUMBA`` is set to a truthy value, in which
case every public kernel below resolves to its ``*_np`` variant.  Both
variants perform the same floating point operations in the same order, so
the two backends agree bit-for-bit on every platform we test on.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

_DISABLED = os.environ.get("HESTONFQI_DISABLE_NUMBA", "").strip().lower() in {
    "1",
    "true",
    "yes",
    "on",
}
USE_NUMBA = numba is not None and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# splitmix64, shared by both tree builders
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MUL1 = 0xBF58476D1CE4E5B9
_SM_MUL2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / 9007199254740992.0

_U_GAMMA = np.uint64(_SM_GAMMA)
_U_MUL1 = np.uint64(_SM_MUL1)
_U_MUL2 = np.uint64(_SM_MUL2)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_U11 = np.uint64(11)


def _sm_uniform_py(state: list) -> float:
    """Advance ``state[0]`` (a python int) and return a double in [0, 1)."""
    s = (state[0] + _SM_GAMMA) & _MASK64
    state[0] = s
    z = s
    z = ((z ^ (z >> 30)) * _SM_MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * _SM_MUL2) & _MASK64
    z = z ^ (z >> 31)
    return (z >> 11) * _INV_2_53


def _sm_uniform_nb(state):
    s = state[0] + _U_GAMMA
    state[0] = s
    z = s
    z = (z ^ (z >> _U30)) * _U_MUL1
    z = (z ^ (z >> _U27)) * _U_MUL2
    z = z ^ (z >> _U31)
    return float(z >> _U11) * _INV_2_53


_sm_uniform_nb = _jit(_sm_uniform_nb)


# ---------------------------------------------------------------------------
# Heston / mean-reverting Euler paths (full truncation)
# ---------------------------------------------------------------------------


def heston_paths_nb(zs, zv, log_s0, v0, kappa, theta, sigma, rho, r, dt):
    m, n = zs.shape
    log_s = np.empty((m, n + 1))
    var = np.empty((m, n + 1))
    a = math.sqrt(1.0 - rho * rho)
    for p in range(m):
        x = log_s0
        v = v0
        log_s[p, 0] = x
        var[p, 0] = v
        for k in range(n):
            vp = v if v > 0.0 else 0.0
            sq = math.sqrt(vp * dt)
            x = x + (r - 0.5 * vp) * dt + sq * (a * zs[p, k] + rho * zv[p, k])
            v = v + kappa * (theta - vp) * dt + sigma * sq * zv[p, k]
            log_s[p, k + 1] = x
            var[p, k + 1] = v
    return log_s, var


heston_paths_nb = _jit(heston_paths_nb)


def heston_paths_np(zs, zv, log_s0, v0, kappa, theta, sigma, rho, r, dt):
    m, n = zs.shape
    log_s = np.empty((m, n + 1))
    var = np.empty((m, n + 1))
    a = math.sqrt(1.0 - rho * rho)
    x = np.full(m, float(log_s0))
    v = np.full(m, float(v0))
    log_s[:, 0] = x
    var[:, 0] = v
    for k in range(n):
        vp = np.maximum(v, 0.0)
        sq = np.sqrt(vp * dt)
        x = x + (r - 0.5 * vp) * dt + sq * (a * zs[:, k] + rho * zv[:, k])
        v = v + kappa * (theta - vp) * dt + sigma * sq * zv[:, k]
        log_s[:, k + 1] = x
        var[:, k + 1] = v
    return log_s, var


def reverting_paths_nb(zs, zv, x0, v0, kappa, theta, sigma, rho, eq, rate, dt):
    m, n = zs.shape
    log_s = np.empty((m, n + 1))
    var = np.empty((m, n + 1))
    a = math.sqrt(1.0 - rho * rho)
    for p in range(m):
        x = x0
        v = v0
        log_s[p, 0] = x
        var[p, 0] = v
        for k in range(n):
            vp = v if v > 0.0 else 0.0
            sq = math.sqrt(vp * dt)
            x = x + rate * (eq - x) * dt + sq * (a * zs[p, k] + rho * zv[p, k])
            v = v + kappa * (theta - vp) * dt + sigma * sq * zv[p, k]
            log_s[p, k + 1] = x
            var[p, k + 1] = v
    return log_s, var


reverting_paths_nb = _jit(reverting_paths_nb)


def reverting_paths_np(zs, zv, x0, v0, kappa, theta, sigma, rho, eq, rate, dt):
    m, n = zs.shape
    log_s = np.empty((m, n + 1))
    var = np.empty((m, n + 1))
    a = math.sqrt(1.0 - rho * rho)
    x = np.full(m, float(x0))
    v = np.full(m, float(v0))
    log_s[:, 0] = x
    var[:, 0] = v
    for k in range(n):
        vp = np.maximum(v, 0.0)
        sq = np.sqrt(vp * dt)
        x = x + rate * (eq - x) * dt + sq * (a * zs[:, k] + rho * zv[:, k])
        v = v + kappa * (theta - vp) * dt + sigma * sq * zv[:, k]
        log_s[:, k + 1] = x
        var[:, k + 1] = v
    return log_s, var


# ---------------------------------------------------------------------------
# Extended Kalman filter over a log-price series
# ---------------------------------------------------------------------------


def ekf_pass_py(log_s, v0, p0, kappa, theta, sigma, rho, r, dt, eps):
    """Returns (v_hat, p_cov, loglik, bad_step); bad_step is -1 on success."""
    n = log_s.shape[0] - 1
    v_out = np.empty(n)
    p_out = np.empty(n)
    v = v0
    p = p0
    h = -0.5 * dt
    f = 1.0 - kappa * dt
    ll = 0.0
    for k in range(n):
        vbar = v + kappa * theta * dt - kappa * v * dt
        if vbar < eps:
            vbar = eps
        pbar = f * p * f + sigma * sigma * v * dt
        # L Q M^T with Q = I: only the second components overlap
        cross = sigma * math.sqrt(v * dt) * rho * math.sqrt(vbar * dt)
        s = h * pbar * h + vbar * dt + 2.0 * h * cross
        if s < 1e-300:
            return v_out, p_out, ll, k
        gain = (pbar * h + cross) / s
        resid = log_s[k + 1] - log_s[k] - (r - 0.5 * vbar) * dt
        ll += -0.5 * (math.log(2.0 * math.pi * s) + resid * resid / s)
        v = vbar + gain * resid
        if v < eps:
            v = eps
        p = pbar - gain * (h * pbar + cross)
        if p < 0.0:
            p = 0.0
        v_out[k] = v
        p_out[k] = p
    return v_out, p_out, ll, -1


ekf_pass_nb = _jit(ekf_pass_py)
ekf_pass_np = ekf_pass_py


# ---------------------------------------------------------------------------
# Extremely randomized regression tree
# ---------------------------------------------------------------------------


def build_tree_nb(x, y, min_split, min_leaf, n_cand, seed):
    n, d = x.shape
    cap = 2 * (n // min_leaf) + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    idx = np.arange(n)
    buf = np.empty(n, dtype=np.int64)
    lo = np.empty(d)
    hi = np.empty(d)
    feats = np.empty(d, dtype=np.int64)
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)

    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        cnt = end - start

        s = 0.0
        ymin = y[idx[start]]
        ymax = ymin
        for i in range(start, end):
            yi = y[idx[i]]
            s += yi
            if yi < ymin:
                ymin = yi
            if yi > ymax:
                ymax = yi
        value[node] = s / cnt
        if cnt < min_split or ymin == ymax:
            continue

        for j in range(d):
            lo[j] = x[idx[start], j]
            hi[j] = lo[j]
        for i in range(start + 1, end):
            row = idx[i]
            for j in range(d):
                xv = x[row, j]
                if xv < lo[j]:
                    lo[j] = xv
                if xv > hi[j]:
                    hi[j] = xv
        m = 0
        for j in range(d):
            if lo[j] < hi[j]:
                feats[m] = j
                m += 1
        if m == 0:
            continue
        k = n_cand if n_cand < m else m

        best_score = -np.inf
        best_f = -1
        best_t = 0.0
        for c in range(k):
            jj = c + int(_sm_uniform_nb(state) * (m - c))
            tmp = feats[c]
            feats[c] = feats[jj]
            feats[jj] = tmp
            f = feats[c]
            t = lo[f] + _sm_uniform_nb(state) * (hi[f] - lo[f])
            nl = 0
            sl = 0.0
            for i in range(start, end):
                row = idx[i]
                if x[row, f] <= t:
                    nl += 1
                    sl += y[row]
            nr = cnt - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            sr = s - sl
            score = sl * sl / nl + sr * sr / nr
            if score > best_score:
                best_score = score
                best_f = f
                best_t = t
        if best_f < 0:
            continue

        nl = 0
        nr = 0
        for i in range(start, end):
            row = idx[i]
            if x[row, best_f] <= best_t:
                idx[start + nl] = row
                nl += 1
            else:
                buf[nr] = row
                nr += 1
        for i in range(nr):
            idx[start + nl + i] = buf[i]

        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = lid
        right[node] = rid
        st_node[top] = rid
        st_start[top] = start + nl
        st_end[top] = end
        top += 1
        st_node[top] = lid
        st_start[top] = start
        st_end[top] = start + nl
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


build_tree_nb = _jit(build_tree_nb)


def _seq_sum(a: np.ndarray) -> float:
    # left-to-right accumulation, matching the compiled loop exactly
    return float(np.add.accumulate(a)[-1]) if a.size else 0.0


def build_tree_np(x, y, min_split, min_leaf, n_cand, seed):
    n, d = x.shape
    feature, threshold, left, right, value = [], [], [], [], []
    idx = np.arange(n)
    state = [int(seed) & _MASK64]

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    stack = [(new_node(), 0, n)]
    while stack:
        node, start, end = stack.pop()
        cnt = end - start
        rows = idx[start:end]
        yn = y[rows]
        s = _seq_sum(yn)
        value[node] = s / cnt
        if cnt < min_split or yn.min() == yn.max():
            continue
        xn = x[rows]
        lo = xn.min(axis=0)
        hi = xn.max(axis=0)
        feats = [j for j in range(d) if lo[j] < hi[j]]
        m = len(feats)
        if m == 0:
            continue
        k = min(n_cand, m)

        best_score = -math.inf
        best_f = -1
        best_t = 0.0
        for c in range(k):
            jj = c + int(_sm_uniform_py(state) * (m - c))
            feats[c], feats[jj] = feats[jj], feats[c]
            f = feats[c]
            t = lo[f] + _sm_uniform_py(state) * (hi[f] - lo[f])
            mask = xn[:, f] <= t
            nl = int(mask.sum())
            nr = cnt - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            sl = _seq_sum(yn[mask])
            sr = s - sl
            score = sl * sl / nl + sr * sr / nr
            if score > best_score:
                best_score, best_f, best_t = score, f, t
        if best_f < 0:
            continue

        mask = xn[:, best_f] <= best_t
        nl = int(mask.sum())
        idx[start:end] = np.concatenate([rows[mask], rows[~mask]])
        lid = new_node()
        rid = new_node()
        feature[node] = best_f
        threshold[node] = float(best_t)
        left[node] = lid
        right[node] = rid
        stack.append((rid, start + nl, end))
        stack.append((lid, start, start + nl))

    return (
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )


def predict_forest_nb(x, feature, threshold, left, right, value, roots):
    m = x.shape[0]
    n_trees = roots.shape[0]
    out = np.empty(m)
    for i in range(m):
        acc = 0.0
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if x[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += value[node]
        out[i] = acc / n_trees
    return out


predict_forest_nb = _jit(predict_forest_nb)


def predict_forest_np(x, feature, threshold, left, right, value, roots):
    m = x.shape[0]
    rows = np.arange(m)
    acc = np.zeros(m)
    for root in roots:
        node = np.full(m, root, dtype=np.int64)
        while True:
            f = feature[node]
            internal = f >= 0
            if not internal.any():
                break
            xv = x[rows, np.where(internal, f, 0)]
            nxt = np.where(xv <= threshold[node], left[node], right[node])
            node = np.where(internal, nxt, node)
        acc = acc + value[node]
    return acc / len(roots)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    heston_paths = heston_paths_nb
    reverting_paths = reverting_paths_nb
    ekf_pass = ekf_pass_nb
    build_tree = build_tree_nb
    predict_forest = predict_forest_nb
else:
    heston_paths = heston_paths_np
    reverting_paths = reverting_paths_np
    ekf_pass = ekf_pass_np
    build_tree = build_tree_np
    predict_forest = predict_forest_np
