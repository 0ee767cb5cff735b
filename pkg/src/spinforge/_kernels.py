"""Numba kernels shared by the sampler and the mean-field solvers.

Random numbers are counter-based: the uniform used by node ``i`` during the
sweep starting at stream position ``step`` is a pure function of
``(key, step + i)``. Sample streams therefore do not depend on thread count or
on how nodes of one color class are scheduled.
"""

import numba as nb
import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


@nb.njit(inline="always")
def _mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(inline="always")
def uniform_pm1(key, counter):
    """Uniform double in [-1, 1) for stream ``key`` at position ``counter``."""
    z = _mix64(key + (counter + _ONE) * _GAMMA)
    return float(z >> _S11) * _INV53 * 2.0 - 1.0


@nb.njit(inline="always")
def _activation(x, lut, lut_scale):
    if lut.shape[0] == 1:
        return np.tanh(x)
    q = np.rint(x * lut_scale)
    if q > 32767.0:
        q = 32767.0
    elif q < -32768.0:
        q = -32768.0
    return lut[int(q) + 32768]


@nb.njit(inline="always")
def _local_field(i, spins, indptr, nbr, nbr_edge, w, h):
    acc = h[i]
    for p in range(indptr[i], indptr[i + 1]):
        acc += w[nbr_edge[p]] * spins[nbr[p]]
    return acc


@nb.njit(inline="always")
def _update_node(i, spins, indptr, nbr, nbr_edge, w, h, beta, key, step, lut, lut_scale):
    th = _activation(beta * _local_field(i, spins, indptr, nbr, nbr_edge, w, h), lut, lut_scale)
    r = uniform_pm1(key, step + np.uint64(i))
    spins[i] = 1 if th > r else -1


@nb.njit(cache=True)
def draw_uniform(key, counter):
    return uniform_pm1(np.uint64(key), np.uint64(counter))


@nb.njit(cache=True)
def sweep_ordered(spins, free, order, indptr, nbr, nbr_edge, w, h, beta, key, step, lut, lut_scale):
    """One pass over ``order``, updating free nodes in place."""
    for t in range(order.shape[0]):
        i = order[t]
        if free[i]:
            _update_node(i, spins, indptr, nbr, nbr_edge, w, h, beta, key, step, lut, lut_scale)


@nb.njit(inline="always")
def _run_one_chain(spins, free, order, indptr, nbr, nbr_edge, ea, eb, w, h, beta, key, step,
                   n_burn, n_sweeps, lut, lut_scale, sum_m, sum_c):
    n = spins.shape[0]
    stride = np.uint64(n)
    for k in range(n_burn + n_sweeps):
        for t in range(order.shape[0]):
            i = order[t]
            if free[i]:
                _update_node(i, spins, indptr, nbr, nbr_edge, w, h, beta, key, step, lut, lut_scale)
        step += stride
        if k >= n_burn:
            for i in range(n):
                sum_m[i] += spins[i]
            for e in range(ea.shape[0]):
                sum_c[e] += spins[ea[e]] * spins[eb[e]]
    return step


@nb.njit(cache=True, parallel=True)
def run_chains(spins, free, order, indptr, nbr, nbr_edge, ea, eb, w, h, beta, keys, steps,
               n_burn, n_sweeps, lut, lut_scale, sum_m, sum_c):
    """Advance ``C`` independent chains; one chain per worker thread.

    ``spins``/``free`` are ``(C, N)``; ``sum_m`` ``(C, N)`` and ``sum_c`` ``(C, E)``
    receive integer running sums over the post-burn-in sweeps. ``steps`` is
    advanced in place.
    """
    for c in nb.prange(spins.shape[0]):
        steps[c] = _run_one_chain(
            spins[c], free[c], order, indptr, nbr, nbr_edge, ea, eb, w, h, beta, keys[c], steps[c],
            n_burn, n_sweeps, lut, lut_scale, sum_m[c], sum_c[c],
        )


@nb.njit(cache=True, parallel=True)
def run_chain_colored(spins, free, class_nodes, class_ptr, indptr, nbr, nbr_edge, ea, eb, w, h,
                      beta, key, step, n_burn, n_sweeps, lut, lut_scale, sum_m, sum_c):
    """Single chain, parallel over the members of each color class.

    Produces exactly the same stream as :func:`run_chains` with chromatic order.
    """
    n = spins.shape[0]
    stride = np.uint64(n)
    for k in range(n_burn + n_sweeps):
        for c in range(class_ptr.shape[0] - 1):
            for t in nb.prange(class_ptr[c], class_ptr[c + 1]):
                i = class_nodes[t]
                if free[i]:
                    _update_node(i, spins, indptr, nbr, nbr_edge, w, h, beta, key, step, lut, lut_scale)
        step += stride
        if k >= n_burn:
            for i in nb.prange(n):
                sum_m[i] += spins[i]
            for e in nb.prange(ea.shape[0]):
                sum_c[e] += spins[ea[e]] * spins[eb[e]]
    return step


@nb.njit(cache=True)
def nmft_iterate(indptr, nbr, nbr_edge, w, h, beta, free_nodes, skip, m_old, lam, tol, t_max,
                 m_new, fields):
    """Damped synchronous mean-field iteration over ``free_nodes`` (minus ``skip``).

    ``m_old`` holds the starting point, with clamped coordinates already at
    their clamp values; it is overwritten with the damped iterate. ``m_new``
    and ``fields`` receive the last undamped update ``tanh(beta * I)`` and
    ``I``. Returns ``(converged, iterations, residual)``; the residual is the
    smaller of the relative and the absolute change, so it is ``<= tol``
    exactly when the iteration counts as converged.
    """
    for t in range(free_nodes.shape[0]):
        i = free_nodes[t]
        m_new[i] = m_old[i]
    res = np.inf
    for it in range(1, t_max + 1):
        num = 0.0
        den = 0.0
        for t in range(free_nodes.shape[0]):
            i = free_nodes[t]
            if i == skip:
                continue
            acc = h[i]
            for p in range(indptr[i], indptr[i + 1]):
                acc += w[nbr_edge[p]] * m_old[nbr[p]]
            fields[i] = acc
            mn = np.tanh(beta * acc)
            m_new[i] = mn
            num += abs(mn - m_old[i])
            den += abs(mn + m_old[i])
        res = min(num / max(den, 1e-12), num)
        done = res <= tol
        for t in range(free_nodes.shape[0]):
            i = free_nodes[t]
            if i != skip:
                m_old[i] = lam * m_new[i] + (1.0 - lam) * m_old[i]
        if done:
            return True, it, res
    return False, t_max, res


@nb.njit(cache=True)
def hmft_kernel(indptr, nbr, nbr_edge, ea, eb, w, h, beta, free_nodes, m_start, lam, tol, t_max):
    """Hierarchical mean-field: base solve plus two clamped solves per free node.

    ``m_start`` carries clamp values on clamped nodes and the initial guess on
    free ones. Returns ``(m_base, fields_base, corr, n_calls, n_failed,
    base_converged)``.
    """
    n = m_start.shape[0]
    n_edges = ea.shape[0]
    m_old = m_start.copy()
    m_base = m_start.copy()
    fields_base = np.zeros(n)
    base_ok, _, _ = nmft_iterate(indptr, nbr, nbr_edge, w, h, beta, free_nodes, -1, m_old, lam,
                                 tol, t_max, m_base, fields_base)
    n_calls = 1
    n_failed = 0 if base_ok else 1

    is_free = np.zeros(n, dtype=np.bool_)
    for t in range(free_nodes.shape[0]):
        is_free[free_nodes[t]] = True

    est = np.zeros((n_edges, 2))
    m_new = np.empty(n)
    fields = np.zeros(n)
    for t in range(free_nodes.shape[0]):
        k = free_nodes[t]
        p_up = 0.5 * (1.0 + m_base[k])
        for v in (-1.0, 1.0):
            pk = p_up if v > 0 else 1.0 - p_up
            for q in range(n):
                m_old[q] = m_base[q]
            m_old[k] = v
            ok, _, _ = nmft_iterate(indptr, nbr, nbr_edge, w, h, beta, free_nodes, k, m_old, lam,
                                    tol, t_max, m_new, fields)
            m_new[k] = v
            n_calls += 1
            if not ok:
                n_failed += 1
            for p in range(indptr[k], indptr[k + 1]):
                i = nbr[p]
                e = nbr_edge[p]
                d = 0 if ea[e] == k else 1
                mi = m_new[i] if is_free[i] else m_start[i]
                est[e, d] += v * pk * mi

    corr = np.empty(n_edges)
    for e in range(n_edges):
        a = ea[e]
        b = eb[e]
        if is_free[a] and is_free[b]:
            corr[e] = 0.5 * (est[e, 0] + est[e, 1])
        elif is_free[a]:
            corr[e] = est[e, 0]
        elif is_free[b]:
            corr[e] = est[e, 1]
        else:
            corr[e] = m_start[a] * m_start[b]
    return m_base, fields_base, corr, n_calls, n_failed, base_ok
