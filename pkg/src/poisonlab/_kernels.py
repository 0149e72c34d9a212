"""Hot numeric kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The compiled path is used when numba imports cleanly and the environment
variable ``POISONLAB_DISABLE_NUMBA`` is unset (or ``0``). Both paths are
kept numerically interchangeable; ``tests/test_kernels.py`` pins that.
"""
import os

import numpy as np

_DISABLED = os.environ.get("POISONLAB_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in a subprocess
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA


# --------------------------------------------------------------------------
# tabular TD sweeps (sequential, so the numpy path is a plain loop)


def _tabq_sweeps_py(s_bin, a, r, nb, term, q, alpha, gamma, n_sweeps, tol):
    n = s_bin.shape[0]
    n_actions = q.shape[1]
    log = np.zeros(n_sweeps)
    done = 0
    for sweep in range(n_sweeps):
        abs_sum = 0.0
        max_step = 0.0
        for i in range(n):
            boot = 0.0
            if not term[i]:
                j = nb[i]
                boot = q[j, 0]
                for b in range(1, n_actions):
                    if q[j, b] > boot:
                        boot = q[j, b]
            delta = r[i] + gamma * boot - q[s_bin[i], a[i]]
            abs_sum += abs(delta)
            step = alpha * delta
            if abs(step) > max_step:
                max_step = abs(step)
            q[s_bin[i], a[i]] += step
        log[sweep] = abs_sum / n
        done = sweep + 1
        if max_step < tol:
            break
    return q, log[:done]


# --------------------------------------------------------------------------
# value iteration on an explicit model
#   r_exp[s, a]       expected immediate reward
#   cont[s, a, s']    P(s' | s, a) * (1 - terminal(s, a, s'))


def _value_iteration_np(r_exp, cont, gamma, tol, max_iter):
    n_s, n_a = r_exp.shape
    v = np.zeros(n_s)
    q = r_exp.copy()
    residuals = np.zeros(max_iter)
    flat = cont.reshape(n_s * n_a, n_s)
    for it in range(max_iter):
        q = r_exp + gamma * (flat @ v).reshape(n_s, n_a)
        v_new = q.max(axis=1)
        res = np.max(np.abs(v_new - v))
        residuals[it] = res
        v = v_new
        if res < tol:
            return q, v, residuals[: it + 1]
    return q, v, residuals


def _value_iteration_nb(r_exp, cont, gamma, tol, max_iter):
    n_s, n_a = r_exp.shape
    v = np.zeros(n_s)
    v_new = np.zeros(n_s)
    q = r_exp.copy()
    residuals = np.zeros(max_iter)
    for it in range(max_iter):
        res = 0.0
        for s in range(n_s):
            best = -np.inf
            for b in range(n_a):
                acc = 0.0
                for t in range(n_s):
                    acc += cont[s, b, t] * v[t]
                q[s, b] = r_exp[s, b] + gamma * acc
                if q[s, b] > best:
                    best = q[s, b]
            v_new[s] = best
            d = abs(best - v[s])
            if d > res:
                res = d
        residuals[it] = res
        v[:] = v_new
        if res < tol:
            return q, v, residuals[: it + 1]
    return q, v, residuals


# --------------------------------------------------------------------------
# gaussian RBF activations and their state jacobian


def _rbf_np(x, centers, bandwidth):
    diff = x[:, None, :] - centers[None, :, :]
    return np.exp(-0.5 * np.sum(diff * diff, axis=2) / (bandwidth * bandwidth))


def _rbf_jac_np(x, centers, bandwidth):
    # d phi_k / d x_j = -phi_k * (x_j - c_kj) / bw^2, shape (n, k, d)
    diff = x[:, None, :] - centers[None, :, :]
    phi = np.exp(-0.5 * np.sum(diff * diff, axis=2) / (bandwidth * bandwidth))
    return -phi[:, :, None] * diff / (bandwidth * bandwidth)


def _rbf_nb(x, centers, bandwidth):
    n, d = x.shape
    k = centers.shape[0]
    out = np.empty((n, k))
    inv = 0.5 / (bandwidth * bandwidth)
    for i in range(n):
        for c in range(k):
            acc = 0.0
            for j in range(d):
                t = x[i, j] - centers[c, j]
                acc += t * t
            out[i, c] = np.exp(-acc * inv)
    return out


def _rbf_jac_nb(x, centers, bandwidth):
    n, d = x.shape
    k = centers.shape[0]
    out = np.empty((n, k, d))
    bw2 = bandwidth * bandwidth
    for i in range(n):
        for c in range(k):
            acc = 0.0
            for j in range(d):
                t = x[i, j] - centers[c, j]
                acc += t * t
            phi = np.exp(-0.5 * acc / bw2)
            for j in range(d):
                out[i, c, j] = -phi * (x[i, j] - centers[c, j]) / bw2
    return out


# --------------------------------------------------------------------------
# projected gradient ascent of w.eps over {eps >= 0, ||eps||_2 <= radius}


def _project_ascent_py(w, radius, step, tol, max_iter):
    n = w.shape[0]
    eps = np.full(n, radius / np.sqrt(n))
    obj = 0.0
    for i in range(n):
        obj += w[i] * eps[i]
    for it in range(max_iter):
        cand = eps + step * w
        for i in range(n):
            if cand[i] < 0.0:
                cand[i] = 0.0
        norm = np.sqrt(np.sum(cand * cand))
        if norm > radius:
            cand *= radius / norm
        new_obj = 0.0
        for i in range(n):
            new_obj += w[i] * cand[i]
        move = np.max(np.abs(cand - eps))
        eps = cand
        if abs(new_obj - obj) < tol and move < tol:
            return eps, it + 1
        obj = new_obj
    return eps, -1


if USE_NUMBA:
    tabq_sweeps = njit(cache=True)(_tabq_sweeps_py)
    value_iteration = njit(cache=True)(_value_iteration_nb)
    rbf = njit(cache=True)(_rbf_nb)
    rbf_jacobian = njit(cache=True)(_rbf_jac_nb)
    project_ascent = njit(cache=True)(_project_ascent_py)
else:
    tabq_sweeps = _tabq_sweeps_py
    value_iteration = _value_iteration_np
    rbf = _rbf_np
    rbf_jacobian = _rbf_jac_np
    project_ascent = _project_ascent_py

# Explicit handles on both paths, for tests and the benchmark.
NUMPY_KERNELS = {
    "tabq_sweeps": _tabq_sweeps_py,
    "value_iteration": _value_iteration_np,
    "rbf": _rbf_np,
    "rbf_jacobian": _rbf_jac_np,
    "project_ascent": _project_ascent_py,
}
ACTIVE_KERNELS = {
    "tabq_sweeps": tabq_sweeps,
    "value_iteration": value_iteration,
    "rbf": rbf,
    "rbf_jacobian": rbf_jacobian,
    "project_ascent": project_ascent,
}
