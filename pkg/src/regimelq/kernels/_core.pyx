# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: chain sampling, modulator accumulation, SDE stepping.

Semantics (RNG draw order, segment arithmetic) mirror kernels/_python.py;
the cross-backend agreement test pins the two together.
"""

import numpy as np

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from libc.math cimport exp, fabs, isfinite
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport (
    random_standard_exponential,
    random_standard_uniform,
)

cnp.import_array()

BACKEND_NAME = "compiled"

DEF BLOWUP_LIMIT = 1e10

MODE_OPEN = 0
MODE_CLOSED_TABLE = 1
MODE_CLOSED_SCENARIO = 2


class KernelBlowup(RuntimeError):
    def __init__(self, path, node):
        self.path = int(path)
        self.node = int(node)
        super().__init__(f"blow-up on path {path} at node {node}")


cdef bitgen_t *_bitgen(object gen) except NULL:
    capsule = gen.bit_generator.capsule
    if not PyCapsule_IsValid(capsule, "BitGenerator"):
        raise ValueError("invalid BitGenerator capsule")
    return <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")


def chain_jumps_constant(double[:, ::1] rates, double t0, double t_end,
                         Py_ssize_t i0, object gens, Py_ssize_t max_jumps):
    cdef Py_ssize_t num = len(gens)
    cdef Py_ssize_t d = rates.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ptr = np.zeros(num + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] buf_t = np.empty(max_jumps)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] buf_j = np.empty(max_jumps, dtype=np.int64)
    cdef double[::1] bt = buf_t
    cdef cnp.int64_t[::1] bj = buf_j
    cdef bitgen_t *bg
    cdef Py_ssize_t p, i, j, count, target, jj
    cdef double t, r, u, acc
    times_out = []
    targets_out = []
    cdef cnp.int64_t total = 0
    for p in range(num):
        bg = _bitgen(gens[p])
        t = t0
        i = i0
        count = 0
        while True:
            r = -rates[i, i]
            if r <= 0.0:
                break
            t = t + random_standard_exponential(bg) / r
            if t >= t_end:
                break
            u = random_standard_uniform(bg)
            acc = 0.0
            target = -1
            for j in range(d):
                if j == i:
                    continue
                acc += rates[i, j]
                if u * r < acc:
                    target = j
                    break
            if target < 0:
                for j in range(d - 1, -1, -1):
                    if j != i and rates[i, j] > 0.0:
                        target = j
                        break
                if target < 0:
                    break
            if count >= max_jumps:
                raise RuntimeError(f"path {p} exceeded {max_jumps} jumps")
            bt[count] = t
            bj[count] = target
            i = target
            count += 1
        total += count
        ptr[p + 1] = total
        times_out.append(buf_t[:count].copy())
        targets_out.append(buf_j[:count].copy())
    if total:
        return ptr, np.concatenate(times_out), np.concatenate(targets_out)
    return ptr, np.empty(0), np.empty(0, dtype=np.int64)


def modulator_paths(double[::1] nodes, cnp.int64_t[:, ::1] regimes,
                    double[:, ::1] dw, cnp.int64_t[::1] jump_ptr,
                    cnp.int64_t[::1] jump_step, double[::1] jump_times,
                    cnp.int64_t[::1] jump_targets, double[::1] jump_dw,
                    double[:, ::1] cw, double[:, ::1] cd):
    cdef Py_ssize_t num_paths = dw.shape[0]
    cdef Py_ssize_t num_steps = dw.shape[1]
    cdef Py_ssize_t K = cw.shape[0]
    cdef double h = nodes[1] - nodes[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.empty(
        (num_paths, num_steps + 1, K))
    cdef double[:, :, ::1] m = out
    cdef Py_ssize_t p, k, kk, jp, jp_end, i
    cdef double t_cur, dw_rem, dt_rem, dt_seg, dw_seg, acc
    for p in range(num_paths):
        for kk in range(K):
            m[p, 0, kk] = 1.0
        jp = jump_ptr[p]
        jp_end = jump_ptr[p + 1]
        for k in range(num_steps):
            i = regimes[p, k]
            t_cur = nodes[k]
            dw_rem = dw[p, k]
            dt_rem = nodes[k + 1] - nodes[k]
            for kk in range(K):
                m[p, k + 1, kk] = m[p, k, kk]
            while jp < jp_end and jump_step[jp] == k:
                dt_seg = jump_times[jp] - t_cur
                dw_seg = jump_dw[jp]
                for kk in range(K):
                    m[p, k + 1, kk] = m[p, k + 1, kk] * exp(
                        cw[kk, i] * dw_seg + cd[kk, i] * dt_seg)
                i = jump_targets[jp]
                t_cur = jump_times[jp]
                dw_rem -= dw_seg
                dt_rem -= dt_seg
                jp += 1
            for kk in range(K):
                m[p, k + 1, kk] = m[p, k + 1, kk] * exp(
                    cw[kk, i] * dw_rem + cd[kk, i] * dt_rem)
    return out


def simulate_paths(double[::1] nodes, cnp.int64_t[:, ::1] regimes,
                   double[:, ::1] dw, cnp.int64_t[::1] jump_ptr,
                   cnp.int64_t[::1] jump_step, double[::1] jump_times,
                   cnp.int64_t[::1] jump_targets, double[::1] jump_dw,
                   double[:, :, :, ::1] coef_a, double[:, :, :, ::1] coef_b,
                   double[:, :, :, ::1] coef_c, double[:, :, :, ::1] coef_d,
                   double[:, :, ::1] b_det, double[:, :, ::1] sig_det,
                   double[:, ::1] mod_cw, double[:, ::1] mod_cd,
                   Py_ssize_t b_mod, double[::1] b_base, double[::1] b_dir,
                   Py_ssize_t s_mod, double[::1] s_base, double[::1] s_dir,
                   int mode, double[:, :, ::1] u_in,
                   double[:, :, :, ::1] theta, double[:, :, ::1] v_tab,
                   double[:, :, ::1] v_scn, double[::1] x0,
                   Py_ssize_t stop_step):
    cdef Py_ssize_t num_paths = dw.shape[0]
    cdef Py_ssize_t num_steps = dw.shape[1]
    cdef Py_ssize_t n = x0.shape[0]
    cdef Py_ssize_t m_dim
    if mode == 0:
        m_dim = u_in.shape[2]
    else:
        m_dim = theta.shape[2]
    cdef Py_ssize_t K = mod_cw.shape[0]
    cdef double h = nodes[1] - nodes[0]
    cdef Py_ssize_t last = num_steps if stop_step < 0 else min(stop_step, num_steps)

    cdef cnp.ndarray[cnp.float64_t, ndim=3] X_arr = np.empty(
        (num_paths, num_steps + 1, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=3] U_arr = np.zeros(
        (num_paths, num_steps + 1, m_dim))
    cdef cnp.ndarray[cnp.float64_t, ndim=3] M_arr = np.ones(
        (num_paths, num_steps + 1, K))
    cdef double[:, :, ::1] X = X_arr
    cdef double[:, :, ::1] U = U_arr
    cdef double[:, :, ::1] M = M_arr

    cdef cnp.ndarray[cnp.float64_t, ndim=1] scratch = np.empty(3 * n + m_dim + K)
    cdef double[::1] x = scratch[:n]
    cdef double[::1] drift = scratch[n:2 * n]
    cdef double[::1] diff = scratch[2 * n:3 * n]
    cdef double[::1] u = scratch[3 * n:3 * n + m_dim]
    cdef double[::1] mods = scratch[3 * n + m_dim:]

    cdef Py_ssize_t p, k, kk, ii, jj, jp, jp_end, i, bad
    cdef double t_cur, dw_rem, dt_rem, dt_seg, dw_seg, acc, mb, ms

    for p in range(num_paths):
        for ii in range(n):
            x[ii] = x0[ii]
            X[p, 0, ii] = x0[ii]
        for kk in range(K):
            mods[kk] = 1.0
        jp = jump_ptr[p]
        jp_end = jump_ptr[p + 1]
        for k in range(last):
            i = regimes[p, k]
            # control frozen at the step's left node
            if mode == 0:
                for jj in range(m_dim):
                    u[jj] = u_in[p, k, jj]
            else:
                for jj in range(m_dim):
                    acc = 0.0
                    for ii in range(n):
                        acc += theta[k, i, jj, ii] * x[ii]
                    if mode == 1:
                        u[jj] = acc + v_tab[k, i, jj]
                    else:
                        u[jj] = acc + v_scn[p, k, jj]
            for jj in range(m_dim):
                U[p, k, jj] = u[jj]

            t_cur = nodes[k]
            dw_rem = dw[p, k]
            dt_rem = nodes[k + 1] - nodes[k]
            while jp < jp_end and jump_step[jp] == k:
                dt_seg = jump_times[jp] - t_cur
                dw_seg = jump_dw[jp]
                _segment(x, drift, diff, u, mods, i, k, dt_seg, dw_seg,
                         coef_a, coef_b, coef_c, coef_d, b_det, sig_det,
                         mod_cw, mod_cd, b_mod, b_base, b_dir,
                         s_mod, s_base, s_dir, n, m_dim, K)
                i = jump_targets[jp]
                t_cur = jump_times[jp]
                dw_rem -= dw_seg
                dt_rem -= dt_seg
                jp += 1
            _segment(x, drift, diff, u, mods, i, k, dt_rem, dw_rem,
                     coef_a, coef_b, coef_c, coef_d, b_det, sig_det,
                     mod_cw, mod_cd, b_mod, b_base, b_dir,
                     s_mod, s_base, s_dir, n, m_dim, K)

            bad = 0
            for ii in range(n):
                X[p, k + 1, ii] = x[ii]
                if not isfinite(x[ii]) or fabs(x[ii]) > BLOWUP_LIMIT:
                    bad = 1
            for kk in range(K):
                M[p, k + 1, kk] = mods[kk]
            if bad:
                raise KernelBlowup(p, k + 1)

        # terminal/stop-node control, frozen state past a truncated run
        i = regimes[p, last]
        if mode == 0:
            for jj in range(m_dim):
                U[p, last, jj] = u_in[p, last, jj]
        else:
            for jj in range(m_dim):
                acc = 0.0
                for ii in range(n):
                    acc += theta[last, i, jj, ii] * x[ii]
                if mode == 1:
                    U[p, last, jj] = acc + v_tab[last, i, jj]
                else:
                    U[p, last, jj] = acc + v_scn[p, last, jj]
        for k in range(last + 1, num_steps + 1):
            for ii in range(n):
                X[p, k, ii] = x[ii]
            for kk in range(K):
                M[p, k, kk] = mods[kk]
    return X_arr, U_arr, M_arr


cdef inline void _segment(double[::1] x, double[::1] drift, double[::1] diff,
                          double[::1] u, double[::1] mods, Py_ssize_t i,
                          Py_ssize_t k, double dt, double dw_seg,
                          double[:, :, :, ::1] coef_a,
                          double[:, :, :, ::1] coef_b,
                          double[:, :, :, ::1] coef_c,
                          double[:, :, :, ::1] coef_d,
                          double[:, :, ::1] b_det, double[:, :, ::1] sig_det,
                          double[:, ::1] mod_cw, double[:, ::1] mod_cd,
                          Py_ssize_t b_mod, double[::1] b_base,
                          double[::1] b_dir, Py_ssize_t s_mod,
                          double[::1] s_base, double[::1] s_dir,
                          Py_ssize_t n, Py_ssize_t m_dim,
                          Py_ssize_t K) noexcept:
    cdef Py_ssize_t ii, jj, kk
    cdef double acc, mb, ms
    for ii in range(n):
        acc = 0.0
        for jj in range(n):
            acc += coef_a[k, i, ii, jj] * x[jj]
        for jj in range(m_dim):
            acc += coef_b[k, i, ii, jj] * u[jj]
        mb = b_base[k] * mods[b_mod] * b_dir[ii] if b_mod >= 0 else 0.0
        drift[ii] = acc + b_det[k, i, ii] + mb
        acc = 0.0
        for jj in range(n):
            acc += coef_c[k, i, ii, jj] * x[jj]
        for jj in range(m_dim):
            acc += coef_d[k, i, ii, jj] * u[jj]
        ms = s_base[k] * mods[s_mod] * s_dir[ii] if s_mod >= 0 else 0.0
        diff[ii] = acc + sig_det[k, i, ii] + ms
    for ii in range(n):
        x[ii] = x[ii] + drift[ii] * dt + diff[ii] * dw_seg
    for kk in range(K):
        mods[kk] = mods[kk] * exp(mod_cw[kk, i] * dw_seg + mod_cd[kk, i] * dt)
