"""Numpy fallback kernels.

This module is the reference semantics for the compiled core: same RNG draw
order, same per-segment arithmetic. Jump-free steps are vectorized across
paths; the (rare) steps containing chain jumps fall back to an explicit
per-segment walk so regimes switch at their exact times.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"

_BLOWUP_LIMIT = 1e10


class KernelBlowup(RuntimeError):
    def __init__(self, path, node):
        self.path = int(path)
        self.node = int(node)
        super().__init__(f"blow-up on path {path} at node {node}")


# -- chain sampling -----------------------------------------------------------


def chain_jumps_constant(rates, t0, t_end, i0, gens, max_jumps):
    """Exact competing-exponentials sampler for a constant generator.

    One bit-generator per path; each path consumes draws in the order
    (exponential gap, uniform target)* so the outcome is a pure function of
    its own stream.
    """
    rates = np.asarray(rates, dtype=float)
    num = len(gens)
    times, targets = [], []
    ptr = np.zeros(num + 1, dtype=np.int64)
    for p, g in enumerate(gens):
        t = t0
        i = i0
        count = 0
        while True:
            r = -rates[i, i]
            if r <= 0.0:
                break
            t = t + g.standard_exponential() / r
            if t >= t_end:
                break
            u = g.random()
            acc = 0.0
            target = -1
            for j in range(rates.shape[0]):
                if j == i:
                    continue
                acc += rates[i, j]
                if u * r < acc:
                    target = j
                    break
            if target < 0:  # row sums slightly off; take the last admissible
                for j in range(rates.shape[0] - 1, -1, -1):
                    if j != i and rates[i, j] > 0.0:
                        target = j
                        break
                if target < 0:
                    break
            times.append(t)
            targets.append(target)
            i = target
            count += 1
            if count >= max_jumps:
                raise RuntimeError(f"path {p} exceeded {max_jumps} jumps")
        ptr[p + 1] = len(times)
    return ptr, np.asarray(times, dtype=float), np.asarray(targets, dtype=np.int64)


# -- modulator accumulation ---------------------------------------------------


def modulator_paths(nodes, regimes, dw, jump_ptr, jump_step, jump_times,
                    jump_targets, jump_dw, cw, cd):
    """exp(int c(alpha) dW + int d(alpha) dr) at the grid nodes, per path.

    cw/cd have shape (K, D): K independent modulators share the walk.
    """
    num_paths, num_steps = dw.shape
    K = cw.shape[0]
    h = nodes[1] - nodes[0]
    log_m = np.zeros((num_paths, num_steps + 1, K))
    reg = regimes[:, :-1]  # regime at each step's left node
    for kk in range(K):
        log_m[:, 1:, kk] = cw[kk][reg] * dw + cd[kk][reg] * h
    # correct the steps that contain jumps
    for p in range(num_paths):
        for j in range(jump_ptr[p], jump_ptr[p + 1]):
            k = jump_step[j]
            if j > jump_ptr[p] and jump_step[j - 1] == k:
                continue  # whole step recomputed at its first jump
            incr = _step_log_increment(
                p, k, nodes, regimes, dw, jump_ptr, jump_step,
                jump_times, jump_targets, jump_dw, cw, cd,
            )
            log_m[p, k + 1, :] = incr
    return np.exp(np.cumsum(log_m, axis=1))


def _step_log_increment(p, k, nodes, regimes, dw, jump_ptr, jump_step,
                        jump_times, jump_targets, jump_dw, cw, cd):
    out = np.zeros(cw.shape[0])
    for i, dt_seg, dw_seg, _ in _segments(
        p, k, nodes, regimes, dw, jump_ptr, jump_step,
        jump_times, jump_targets, jump_dw,
    ):
        out += cw[:, i] * dw_seg + cd[:, i] * dt_seg
    return out


def _segments(p, k, nodes, regimes, dw, jump_ptr, jump_step, jump_times,
              jump_targets, jump_dw):
    """Yield (regime, dt, dW, is_last) segments of step k for path p."""
    t_cur = nodes[k]
    dw_rem = dw[p, k]
    dt_rem = nodes[k + 1] - nodes[k]
    i = regimes[p, k]
    for j in range(jump_ptr[p], jump_ptr[p + 1]):
        if jump_step[j] != k:
            continue
        dt_seg = jump_times[j] - t_cur
        dw_seg = jump_dw[j]
        yield i, dt_seg, dw_seg, False
        i = jump_targets[j]
        t_cur = jump_times[j]
        dw_rem -= dw_seg
        dt_rem -= dt_seg
    yield i, dt_rem, dw_rem, True


# -- forward SDE stepping -----------------------------------------------------

MODE_OPEN = 0
MODE_CLOSED_TABLE = 1
MODE_CLOSED_SCENARIO = 2


def simulate_paths(nodes, regimes, dw, jump_ptr, jump_step, jump_times,
                   jump_targets, jump_dw, coef_a, coef_b, coef_c, coef_d,
                   b_det, sig_det, mod_cw, mod_cd, b_mod, b_base, b_dir,
                   s_mod, s_base, s_dir, mode, u_in, theta, v_tab, v_scn,
                   x0, stop_step):
    """Euler-Maruyama with exact jump-time step splitting.

    Controls are frozen at each step's left node (recorded in U); drift and
    diffusion coefficient matrices switch regime at exact jump times. Returns
    (X, U, M) where M holds the modulator paths (empty K axis when none).
    """
    num_paths, num_steps = dw.shape
    n = x0.shape[0]
    m = theta.shape[2] if mode != MODE_OPEN else u_in.shape[2]
    K = mod_cw.shape[0]
    h = nodes[1] - nodes[0]

    X = np.empty((num_paths, num_steps + 1, n))
    U = np.zeros((num_paths, num_steps + 1, m))
    M = np.ones((num_paths, num_steps + 1, K))
    X[:, 0, :] = x0

    x = np.broadcast_to(x0, (num_paths, n)).copy()
    mods = np.ones((num_paths, K))
    has_jump = np.zeros((num_paths, num_steps), dtype=bool)
    for p in range(num_paths):
        for j in range(jump_ptr[p], jump_ptr[p + 1]):
            has_jump[p, jump_step[j]] = True

    last = num_steps if stop_step < 0 else min(stop_step, num_steps)
    for k in range(last):
        reg = regimes[:, k]
        u = _control(mode, k, reg, x, u_in, theta, v_tab, v_scn)
        U[:, k, :] = u

        plain = ~has_jump[:, k]
        if np.any(plain):
            xk = x[plain]
            uk = u[plain]
            rk = reg[plain]
            mb = (b_base[k] * mods[plain, b_mod, None] * b_dir
                  if b_mod >= 0 else 0.0)
            ms = (s_base[k] * mods[plain, s_mod, None] * s_dir
                  if s_mod >= 0 else 0.0)
            drift = (np.einsum("pij,pj->pi", coef_a[k][rk], xk)
                     + np.einsum("pij,pj->pi", coef_b[k][rk], uk)
                     + b_det[k][rk] + mb)
            diff = (np.einsum("pij,pj->pi", coef_c[k][rk], xk)
                    + np.einsum("pij,pj->pi", coef_d[k][rk], uk)
                    + sig_det[k][rk] + ms)
            dwk = dw[plain, k][:, None]
            x[plain] = xk + drift * h + diff * dwk
            if K:
                rkk = reg[plain]
                mods[plain] *= np.exp(
                    mod_cw[:, rkk].T * dw[plain, k][:, None]
                    + mod_cd[:, rkk].T * h
                )
        for p in np.nonzero(has_jump[:, k])[0]:
            xp = x[p].copy()
            mp = mods[p].copy()
            for i, dt_seg, dw_seg, _ in _segments(
                p, k, nodes, regimes, dw, jump_ptr, jump_step,
                jump_times, jump_targets, jump_dw,
            ):
                xp, mp = _apply_segment(
                    xp, mp, i, k, u[p], dt_seg, dw_seg,
                    coef_a, coef_b, coef_c, coef_d, b_det, sig_det,
                    mod_cw, mod_cd, b_mod, b_base, b_dir, s_mod, s_base, s_dir,
                )
            x[p] = xp
            mods[p] = mp

        X[:, k + 1, :] = x
        if K:
            M[:, k + 1, :] = mods
        bad = ~np.isfinite(x).all(axis=1) | (np.abs(x).max(axis=1) > _BLOWUP_LIMIT)
        if np.any(bad):
            raise KernelBlowup(np.nonzero(bad)[0][0], k + 1)

    if last == num_steps:
        U[:, num_steps, :] = _control(
            mode, num_steps, regimes[:, num_steps], x, u_in, theta, v_tab, v_scn
        )
    else:  # truncated run: state frozen past the stop node
        X[:, last + 1:, :] = x[:, None, :]
        if K:
            M[:, last + 1:, :] = mods[:, None, :]
        U[:, last, :] = _control(
            mode, last, regimes[:, last], x, u_in, theta, v_tab, v_scn
        )
    return X, U, M


def _control(mode, k, reg, x, u_in, theta, v_tab, v_scn):
    if mode == MODE_OPEN:
        return u_in[:, k, :].copy()
    u = np.einsum("pij,pj->pi", theta[k][reg], x)
    if mode == MODE_CLOSED_TABLE:
        u += v_tab[k][reg]
    else:
        u += v_scn[:, k, :]
    return u


def _apply_segment(x, mods, i, k, u, dt, dw_seg, coef_a, coef_b, coef_c,
                   coef_d, b_det, sig_det, mod_cw, mod_cd, b_mod, b_base,
                   b_dir, s_mod, s_base, s_dir):
    mb = b_base[k] * mods[b_mod] * b_dir if b_mod >= 0 else 0.0
    ms = s_base[k] * mods[s_mod] * s_dir if s_mod >= 0 else 0.0
    drift = coef_a[k, i] @ x + coef_b[k, i] @ u + b_det[k, i] + mb
    diff = coef_c[k, i] @ x + coef_d[k, i] @ u + sig_det[k, i] + ms
    x = x + drift * dt + diff * dw_seg
    if mods.size:
        mods = mods * np.exp(mod_cw[:, i] * dw_seg + mod_cd[:, i] * dt)
    return x, mods
