import numpy as np

from regimelq import TimeGrid, generate_scenarios
from regimelq.oracle import modulator_values, oracle_check


def test_oracle_check_all_pass():
    rows = oracle_check(paths=2500, steps=800, seed=20240801)
    failures = [r for r in rows if not r[1]]
    assert not failures, failures
    names = {name for name, _, _ in rows}
    assert any(n.startswith("homogeneous/") for n in names)
    assert any(n.startswith("driven/") for n in names)
    assert any(n.startswith("classical/") for n in names)
    assert any(n.startswith("indefinite/") for n in names)


def test_modulator_is_exact_per_segment(driven_suite):
    # recompute one path's modulator from the raw scenario data
    grid = TimeGrid(0.0, 1.0, 50)
    scen = generate_scenarios(driven_suite.spec, grid, 200, seed=13)
    m_all = modulator_values(scen)
    # pick the path with the most jumps to exercise the splitting
    counts = np.diff(scen.jump_ptr)
    p = int(np.argmax(counts))
    c = np.array([np.sqrt(2.0), 2.0])
    d = np.array([-2.0, -4.0])
    log_m = 0.0
    jp = scen.jump_ptr[p]
    for k in range(grid.steps):
        t_cur = grid.nodes[k]
        dw_rem = scen.dW[p, k]
        dt_rem = grid.h
        i = scen.grid_regimes[p, k]
        while jp < scen.jump_ptr[p + 1] and scen.jump_step[jp] == k:
            dt_seg = scen.jump_times[jp] - t_cur
            dw_seg = scen.jump_dw[jp]
            log_m += c[i] * dw_seg + d[i] * dt_seg
            i = scen.jump_targets[jp]
            t_cur = scen.jump_times[jp]
            dw_rem -= dw_seg
            dt_rem -= dt_seg
            jp += 1
        log_m += c[i] * dw_rem + d[i] * dt_rem
    assert counts[p] >= 1
    assert np.isclose(m_all[p, -1], np.exp(log_m), rtol=1e-12)


def test_modulator_first_moment_matches_feynman_kac(driven_suite):
    # E[M(t)] = E[exp(-int alpha)] solves the coupled linear ODE system
    import scipy.linalg

    grid = TimeGrid(0.0, 1.0, 100)
    scen = generate_scenarios(driven_suite.spec, grid, 20000, seed=99)
    m_paths = modulator_values(scen)
    lam = driven_suite.spec.generator.matrix
    flow = lam - np.diag([1.0, 2.0])
    for t in (0.25, 0.5, 1.0):
        exact = (scipy.linalg.expm(t * flow) @ np.ones(2))[0]
        sample = m_paths[:, grid.node_index(t)]
        se = sample.std(ddof=1) / np.sqrt(sample.size)
        assert abs(sample.mean() - exact) <= 3 * se
