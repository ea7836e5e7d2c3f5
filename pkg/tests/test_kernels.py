import math

import numpy as np
import pytest
from scipy import stats

from loopsoup.configuration import Configuration, N_obs
from loopsoup.interaction import hamiltonian
from loopsoup.kernels import (
    GibbsChain,
    KernelError,
    MCMCConfig,
    RejectionCapError,
    estimate_Z,
    lattice_shifts,
    mcmc_dirichlet,
    mcmc_excursion,
    mcmc_free,
    resample_excursions,
    sample_gn,
    truncated_kernel,
)
from loopsoup.measures import LoopMeasureSpec, LoopProposal, measure_mass, sample_free
from loopsoup.paths import BoundaryData, Containment, Domain, Loop, TimeGrid, containment, sample_bridge_batch, sample_loop, split_excursions
from loopsoup.verification import batch_means_se, containment_profile, sequential_bridge

from conftest import params

G = TimeGrid(1.0, 16)


def spec(domain, p=None, j_max=64):
    return LoopMeasureSpec(domain, p or params(), G, j_max=j_max)


def cfg(steps, burn=1000, thin=5, **kw):
    return MCMCConfig(steps=steps, burn_in=burn, thin=thin, **kw)


def test_mcmc_config_validation():
    with pytest.raises(ValueError):
        MCMCConfig(p_birth=0.5, p_death=0.5, p_move=0.5)
    with pytest.raises(ValueError):
        MCMCConfig(thin=0)
    assert MCMCConfig(steps=1000, burn_in=200, thin=10).retained == 80


def test_retained_equals_formula(rng):
    c = cfg(2000, 500, 10)
    chain = GibbsChain(spec(Domain.box(0, 2)), "dirichlet", None, c, rng)
    assert len(chain.run()) == c.retained == chain.report.retained


def test_free_gas_dirichlet_short(rng):
    box = Domain.box(0.0, 2.0)
    s = spec(box)
    p_j, _ = containment_profile(box, G, 64, 40_000, np.random.default_rng(1))
    ref = box.volume * float((np.arange(1, 65) * s.weights * p_j).sum())
    N = [N_obs(eta, box) for eta in mcmc_dirichlet(s, None, cfg(80_000, 2000, 5), rng)]
    assert abs(np.mean(N) - ref) < 3 * batch_means_se(N) + 0.003


def test_hard_core_emissions_respect_core(rng):
    p = params("hard_core", a=0.4)
    box = Domain.box(0.0, 3.0)
    for eta in mcmc_dirichlet(spec(box, p), None, cfg(6000, 1000, 50), rng):
        loops = list(eta)
        for i, a in enumerate(loops):
            for b in loops[i + 1 :]:
                A, B = a.periods(), b.periods()
                r = np.linalg.norm(A[:, None] - B[None], axis=-1)
                assert r.min() >= 0.4
        assert hamiltonian(eta, box, p.potential).total < math.inf


def test_very_negative_mu_empties_box(rng):
    p = params(mu=-20.0)
    N = [N_obs(e, Domain.box(0, 2)) for e in mcmc_free(spec(Domain.box(0, 2), p), None, cfg(3000, 500, 10), rng)]
    assert max(N) == 0


def test_free_kernel_matches_reference(rng):
    box = Domain.box(0.0, 2.0)
    s = spec(box)
    N = [N_obs(e, box) for e in mcmc_free(s, None, cfg(60_000, 2000, 20), rng)]
    ref = [sample_free(s, rng).particles for _ in range(3000)]
    se = math.sqrt(batch_means_se(N) ** 2 + np.var(ref) / len(ref))
    assert abs(np.mean(N) - np.mean(ref)) < 3 * se


def test_boundary_irrelevant_without_interaction():
    box = Domain.box(0.0, 2.0)
    s = spec(box)
    ring = Configuration(sample_loop(np.array([x, 1.0, 1.0]), 1, G, np.random.default_rng(3)) for x in (-0.5, 2.5))
    a = [N_obs(e, box) for e in mcmc_free(s, None, cfg(3000, 0, 10), np.random.default_rng(9))]
    b = [N_obs(e, box) for e in mcmc_free(s, ring, cfg(3000, 0, 10), np.random.default_rng(9))]
    assert a == b


def test_repulsive_ring_lowers_particle_number(rng):
    box = Domain.box(0.0, 2.0)
    p = params("gaussian", A=2.0, sigma=1.0)
    r = np.random.default_rng(4)
    ring = []
    for x in np.linspace(-0.5, 2.5, 5):
        for y in np.linspace(-0.5, 2.5, 5):
            for z in (-0.4, 2.4):
                ring.append(Loop(1, np.tile([x, y, z], (G.m, 1)), G))
    N = [N_obs(e, box) for e in mcmc_free(spec(box, p), Configuration(ring), cfg(40_000, 2000, 10), rng)]
    free = spec(box)
    mean_free = box.volume * float((np.arange(1, 65) * free.weights).sum())
    assert np.mean(N) + 3 * batch_means_se(N) < mean_free


def test_resample_excursions_basic(rng):
    assert resample_excursions(Domain.box(0, 1), BoundaryData(), G, rng) == []
    box = Domain.box(-100.0, 100.0)
    x, y = np.zeros(3), np.full(3, 0.2)
    (pts,) = resample_excursions(box, BoundaryData(((x, y, 0.5),)), G, rng)
    assert pts.shape == (8, 3) and np.array_equal(pts[0], x) and np.array_equal(pts[-1], y)


def test_resample_excursions_cap():
    box = Domain.box(0.0, 1.0)
    x = np.array([0.01, 0.5, 0.5])
    bd = BoundaryData(((x, x, 8.0),))
    with pytest.raises(RejectionCapError):
        resample_excursions(box, bd, G, np.random.default_rng(0), cap=20)
    assert resample_excursions(box, bd, G, np.random.default_rng(0), cap=20, on_cap="skip") == [None]


def test_stay_inside_rate_matches_fine_grid_oracle(rng):
    box = Domain.box(0.0, 1.0)
    c = np.full(3, 0.5)
    k, n = 16, 40_000
    cand = sample_bridge_batch(c, c, k - 1, G.dt, rng, n)
    p = box.interior_mask(cand[:, 1:-1]).all(axis=1).mean()
    fine = sequential_bridge(c, c, 4 * (k - 1), G.dt / 4, rng, n)[:, ::4]
    q = box.interior_mask(fine[:, 1:-1]).all(axis=1).mean()
    se = math.sqrt(p * (1 - p) / n + q * (1 - q) / n)
    assert abs(p - q) < 3 * se
    (pts,) = resample_excursions(box, BoundaryData(((c, c, (k - 1) * G.dt),)), G, rng)
    assert box.interior_mask(pts).all()


def _crossing_conditioning(rng, box):
    while True:
        w = sample_loop(np.array([box.hi[0] - 0.1, 1.0, 1.0]), 2, G, rng)
        if containment(w, box) is Containment.CROSSING:
            try:
                split_excursions(w, box)
            except ValueError:
                continue
            return w


def test_excursion_chain_keeps_exterior_and_boundary_data(rng):
    box = Domain.box(0.0, 2.0)
    w = _crossing_conditioning(rng, box)
    interior, exterior, bd = split_excursions(w, box)
    p = params("gaussian", A=1.0, sigma=1.0)
    for eta in mcmc_excursion(spec(box, p), Configuration([w]), cfg(1500, 0, 50), rng):
        (c,) = eta.crossing(box)
        a, b, bd2 = split_excursions(c, box)
        assert [(f.offset, f.steps) for f in b] == [(f.offset, f.steps) for f in exterior]
        for f, g in zip(b, exterior):
            assert np.array_equal(f.points, g.points)
        for (x, y, t), (x2, y2, t2) in zip(bd, bd2):
            assert np.array_equal(x, x2) and np.array_equal(y, y2) and t == t2


def test_excursion_rebridging_preserves_stay_inside_law(rng):
    # No interaction: the interior excursion's midpoint law equals that of a direct rejection draw.
    box = Domain.box(0.0, 2.0)
    w = None
    r = np.random.default_rng(11)
    while w is None:
        cand = _crossing_conditioning(r, box)
        a, _, _ = split_excursions(cand, box)
        if max(f.steps for f in a) >= 12:
            w = cand
    a, _, _ = split_excursions(w, box)
    f = max(a, key=lambda f: f.steps)
    mid = f.steps // 2
    chain = GibbsChain(spec(box), "excursion", Configuration([w]), cfg(20_000, 0, 20), rng)
    got = []
    for eta in chain.samples():
        (c,) = eta.crossing(box)
        got.append(c.points[(f.offset + mid) % c.points.shape[0], 0])
    x, y = f.points[0], f.points[-1]
    direct = []
    while len(direct) < 2000:
        cand = sample_bridge_batch(x, y, f.steps - 1, G.dt, rng, 2000)
        ok = box.interior_mask(cand[:, 1:-1]).all(axis=1)
        direct.extend(cand[ok, mid, 0].tolist())
    assert stats.ks_2samp(got[::5], direct[:2000]).pvalue > 0.01


def test_excursion_without_crossing_equals_dirichlet(rng):
    box = Domain.box(0.0, 2.0)
    s = spec(box)
    a = [N_obs(e, box) for e in mcmc_excursion(s, None, cfg(40_000, 1000, 5), np.random.default_rng(1))]
    b = [N_obs(e, box) for e in mcmc_dirichlet(s, None, cfg(40_000, 1000, 5), np.random.default_rng(2))]
    se = math.sqrt(batch_means_se(a) ** 2 + batch_means_se(b) ** 2)
    assert abs(np.mean(a) - np.mean(b)) < 3 * se


def test_zero_weight_start_aborts(rng):
    p = params("hard_core", a=1.0)
    box = Domain.box(0.0, 3.0)
    a = Loop(1, np.full((16, 3), 1.5), G)
    b = Loop(1, np.full((16, 3), 1.6), G)
    with pytest.raises(KernelError):
        GibbsChain(spec(box, p), "dirichlet", Configuration([a, b]), cfg(10), rng)


def test_detailed_balance_identity_on_logged_moves(rng):
    p = params("gaussian", A=1.0, sigma=1.0)
    box = Domain.box(0.0, 3.0)
    chain = GibbsChain(spec(box, p), "free", None, cfg(0), rng)
    beta, mass = 1.0, chain.mass
    checked = 0
    for _ in range(3000):
        u = rng.random()
        n = chain.n_mortal
        if u < 0.5:
            w = chain.proposal.draw(rng)
            dH, row = chain.cache.delta_birth(w)
            fwd = math.log(mass / (n + 1)) - beta * dH
            chain.cache.commit_birth(w, row)
            rev = math.log((n + 1) / mass) - beta * chain.cache.delta_death(len(chain.cache) - 1)
            a_f, a_r = min(1.0, math.exp(fwd)), min(1.0, math.exp(rev))
            # pi(x) q(x->y) a(x->y) == pi(y) q(y->x) a(y->x)  <=>  a_f / a_r == exp(fwd)
            assert math.isclose(a_f / a_r, math.exp(fwd), rel_tol=1e-9)
            if rng.random() > a_f:
                chain.cache.commit_death(len(chain.cache) - 1)
            checked += 1
        elif n:
            i = int(rng.integers(n))
            old = chain.cache.loops[i]
            new = sample_loop(old.start, old.j, G, rng)
            dH, row = chain.cache.delta_replace(i, new)
            chain.cache.commit_replace(i, new, row)
            dH_back, row_back = chain.cache.delta_replace(i, old)
            assert math.isclose(dH, -dH_back, rel_tol=1e-9, abs_tol=1e-12)
            if rng.random() > min(1.0, math.exp(-beta * dH)):
                chain.cache.commit_replace(i, old, row_back)
            checked += 1
    chain.cache.check(1e-9)
    assert checked > 1000


def test_chain_log_records_consistent_ratios(rng):
    p = params("gaussian", A=1.0, sigma=1.0)
    chain = GibbsChain(spec(Domain.box(0, 3), p), "dirichlet", None, cfg(0), rng)
    chain.log = []
    for _ in range(3000):
        chain.step()
    for rec in chain.log:
        if rec["move"] == "birth" and rec["dH"] is not None:
            assert math.isclose(rec["log_ratio"], math.log(chain.mass / (rec["n"] + 1)) - rec["dH"], rel_tol=1e-12, abs_tol=1e-12)
        if rec["move"] == "death" and rec["dH"] is not None:
            assert math.isclose(rec["log_ratio"], math.log(rec["n"] / chain.mass) - rec["dH"], rel_tol=1e-12, abs_tol=1e-12)


def test_cache_consistency_over_many_moves(rng):
    p = params("gaussian", A=1.0, sigma=1.0)
    chain = GibbsChain(spec(Domain.box(0, 4), p), "free", None, cfg(10_000, 0, 1, check_every=10), rng)
    chain.advance(10_000)
    chain.cache.check(1e-9)


def test_estimate_Z_trivial_and_lower_bound(rng):
    box = Domain.box(0.0, 1.5)
    assert estimate_Z(spec(box), None, 50, "dirichlet", rng) == (1.0, 0.0)
    p = params("hard_core", a=0.5)
    s = spec(box, p, j_max=8)
    z, se = estimate_Z(s, None, 400, "free", rng)
    assert z + 3 * se >= math.exp(-measure_mass(s, check=False))


def test_estimate_Z_against_brute_force(rng):
    box = Domain.box(0.0, 1.5)
    p = params("hard_core", a=0.3)
    s = spec(box, p, j_max=2)
    z, se = estimate_Z(s, None, 20_000, "dirichlet", rng)
    # Oracle: sum over k <= 3 free Poisson loops drawn with an independent bridge construction.
    prop = LoopProposal(s)
    lam = prop.mass
    pot = p.potential
    oracle = math.exp(-lam)
    for k in range(1, 4):
        vals = []
        for _ in range(4000):
            loops = []
            for _ in range(k):
                j = int(prop.lengths(rng, 1)[0])
                x = box.uniform(rng)
                pts = sequential_bridge(x, x, j * G.m, G.dt, rng, 1)[0, :-1]
                loops.append(Loop(j, pts, G))
            # Thinning: loops that leave the box are not part of the reference process.
            loops = [w for w in loops if containment(w, box) is Containment.INSIDE]
            e = hamiltonian(Configuration(loops), box, pot).total
            vals.append(0.0 if e == math.inf else math.exp(-e))
        oracle += math.exp(-lam) * lam**k / math.factorial(k) * np.mean(vals)
    assert abs(z - oracle) < 3 * se + 2e-3


def test_truncated_kernel_identity_and_compact_range(rng):
    box = Domain.box(0.0, 2.0)
    p = params("compact_bump", A=1.0, a=0.5)
    near = [Loop(1, np.tile([2.2, 1.0, 1.0], (16, 1)), G)]
    far = [Loop(1, np.tile([9.0, 1.0, 1.0], (16, 1)), G)]
    eta = Configuration(near + far)
    c = cfg(3000, 0, 10)
    full = GibbsChain(spec(box, p), "dirichlet", eta, c, np.random.default_rng(5))
    t1 = truncated_kernel(spec(box, p), Domain.box(-20, 20), eta, c, np.random.default_rng(5))
    t2 = truncated_kernel(spec(box, p), Domain.box(-1.0, 3.0), eta, c, np.random.default_rng(5))
    for ch in (full, t1, t2):
        ch.run()
    assert full.report.traces["energy"] == t1.report.traces["energy"] == t2.report.traces["energy"]
    with pytest.raises(ValueError):
        truncated_kernel(spec(box, p), Domain.box(0.5, 1.0), eta, c, rng)


def test_truncation_gap_shrinks_for_gaussian(rng):
    box = Domain.box(0.0, 2.0)
    p = params("gaussian", A=1.0, sigma=1.0)
    inner = [sample_loop(np.full(3, 1.0), 1, G, rng)]
    outer = [sample_loop(rng.uniform(-4, 6, 3), 1, G, rng) for _ in range(60)]
    eta = Configuration(inner + outer)
    c = cfg(0)
    full = GibbsChain(spec(box, p), "dirichlet", eta, c, rng).cache.total
    gaps = [
        full - truncated_kernel(spec(box, p), Domain.box(1 - r, 1 + r), eta, c, rng).cache.total for r in (1.5, 3.0, 5.0)
    ]
    assert gaps[0] >= gaps[1] >= gaps[2] >= 0


def test_lattice_shifts():
    s = lattice_shifts(3, 3)
    assert s.shape == (27, 3) and s.min() >= -1.5 and s.max() < 1.5
    assert lattice_shifts(1, 3).tolist() == [[0, 0, 0]]


def test_gn_single_tile(rng):
    c = cfg(400, 400, 1)
    eta = sample_gn(1, spec(Domain.box(0, 1)), c, rng)
    box = Domain.cube(1, 3)
    assert all(containment(w, box) is Containment.INSIDE for w in eta)


def test_gn_tiles_independent_and_shift_invariant(rng):
    c = cfg(150, 150, 1)
    s = spec(Domain.box(0, 2))
    left = Domain((-2, -1, -1), (0, 1, 1))
    right = Domain((0, -1, -1), (2, 1, 1))
    a, b, u0, u1 = [], [], [], []
    for _ in range(250):
        eta = sample_gn(2, s, c, rng, window=2)
        a.append(N_obs(eta, left))
        b.append(N_obs(eta, right))
        u0.append(N_obs(eta, Domain((0, 0, 0), (1, 1, 1))))
        u1.append(N_obs(eta, Domain((1, 0, 0), (2, 1, 1))))
    a, b = np.asarray(a, float), np.asarray(b, float)
    prod = (a - a.mean()) * (b - b.mean())
    assert abs(prod.mean()) < 3 * prod.std() / math.sqrt(len(prod)) + 1e-12
    se = math.sqrt(np.var(u0) / len(u0) + np.var(u1) / len(u1))
    assert abs(np.mean(u0) - np.mean(u1)) <= 3 * se + 1e-12
