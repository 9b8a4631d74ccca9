"""Acceptance criteria 1-10 at their stated tolerances.

Run with pytest, or directly (``python tests/test_acceptance.py``) for one PASS/FAIL line per criterion.
Criteria 5-10 share one cached set of runs on the default ``demo`` configuration, seeds 1-5.
"""
from __future__ import annotations

import functools
import json
import sys
import tempfile
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import gradcheck  # noqa: E402
import oracles as ref  # noqa: E402
from fedscal import adaptation as ad  # noqa: E402
from fedscal import harness as hz  # noqa: E402
from fedscal.federation import run_federation, server_aggregate  # noqa: E402
from fedscal.model import LossSpec, ModelParams, forward, init_params, loss_and_encoder_grad  # noqa: E402
from fedscal.numerics import RngStream  # noqa: E402

CFG = hz.load_config("demo")
SEEDS = (1, 2, 3, 4, 5)
METHOD_ARMS = ("loa", "fedloa", "fedscal")
ABLATION = ("scal-none", "scal-local", "scal-global", "tau-fixed")
PT = 0.01  # one percentage point of accuracy

REPORT: dict[int, str] = {}


@dataclass
class Verdict:
    passed: bool
    detail: str


def record(n: int, v: Verdict) -> Verdict:
    REPORT[n] = f"criterion {n:>2}: {'PASS' if v.passed else 'FAIL'}  {v.detail}"
    print(REPORT[n])
    return v


# ---------------------------------------------------------------- shared runs


@dataclass
class Runs:
    cells: dict  # (arm, seed) -> CellResult
    method_seconds: float
    setups: dict


def _arm(name: str) -> hz.Arm:
    if name in METHOD_ARMS:
        return next(a for a in hz.method_arms(replace(CFG, methods=METHOD_ARMS)) if a.name == name)
    return hz.ablation_arm(CFG, name)


@functools.lru_cache(maxsize=1)
def runs() -> Runs:
    cells, setups = {}, {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        setups[seed] = hz.prepare_seed(CFG, seed)
        for name in METHOD_ARMS:
            cells[(name, seed)] = hz.run_cell(CFG, _arm(name), setups[seed])
    method_seconds = time.perf_counter() - t0
    for seed in SEEDS:
        for name in ABLATION:
            cells[(name, seed)] = hz.run_cell(CFG, _arm(name), setups[seed])
    return Runs(cells, method_seconds, setups)


def final_mean(arm: str, metric: str) -> float:
    r = runs()
    return float(np.mean([r.cells[(arm, s)].history[-1].metrics[metric] for s in SEEDS]))


# ---------------------------------------------------------------- criterion 1


def criterion_1() -> Verdict:
    t0 = time.perf_counter()
    worst, seen = 0.0, set()
    for k in range(100):
        params, X, spec, combo = gradcheck.random_instance(k)
        seen.add(combo)
        worst = max(worst, gradcheck.max_relative_error(params, X, spec))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and seen == set(gradcheck.COMBOS) and dt <= 30
    return Verdict(ok, f"max rel err {worst:.2e} over 100 instances, {len(seen)}/31 term subsets, {dt:.1f}s")


# ---------------------------------------------------------------- criterion 2


def _instance(seed: int, n: int = 12):
    rng = RngStream(seed, 0)
    d, h, J = 4, 6, 3 + seed % 3
    p = init_params(d, h, J, rng)
    p = p.with_encoder_vector(p.encoder_vector() * 2.0)
    return p, rng.normal((n, d)), rng


def _maxdiff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def criterion_2() -> Verdict:
    t0 = time.perf_counter()
    errs: dict[str, float] = {}

    def note(name, v):
        errs[name] = max(errs.get(name, 0.0), v)

    for seed in range(8):
        p, X, rng = _instance(seed, n=8 + seed)
        P, F = ref.probs_of(p, X), ref.feats_of(p, X)
        cache = forward(p, X)
        note("forward/softmax", max(_maxdiff(cache.probs, P), _maxdiff(cache.hidden, F)))

        protos = ad.compute_prototypes(p, X)
        cents, valid = ref.prototypes(P, F)
        note("prototypes", _maxdiff(protos.centroids[protos.valid], np.array(cents)[np.array(valid)]))
        note("prototype validity", float(protos.valid.tolist() != valid))
        labels = ad.assign_pseudo_labels(protos, p, X).labels
        note("pseudo-labels", float(labels.tolist() != [ref.nearest(f, cents, valid) for f in F]))

        t = ad.loa_terms(cache.probs, labels, 0.3)
        note("loa", _maxdiff([t["ent"], t["div"], t["pce"]], ref.loa_terms(P, labels.tolist(), 0.3)))

        tau = float(np.quantile(cache.probs.max(axis=1), 0.4))
        weak, strong = X + 0.1 * rng.normal(X.shape), X + 0.3 * rng.normal(X.shape)
        server = init_params(4, 6, len(P[0]), RngStream(100 + seed, 0))
        server = server.with_encoder_vector(server.encoder_vector() * 3.0)
        lt = ad.gated_targets(forward(p, weak).probs, tau)
        gt = ad.gated_targets(forward(server, weak).probs, tau)
        note("gate", float(lt.tolist() != [ref.gate(r, tau) for r in ref.probs_of(p, weak)]))
        Ps = ref.probs_of(p, strong)
        l_ref, _ = ref.align(lt.tolist(), Ps)
        g_ref, _ = ref.align(gt.tolist(), Ps)
        note("client alignment", abs(ad.alignment_value(forward(p, strong).probs, lt)[0] - l_ref))
        note("server alignment", abs(ad.server_align_loss(server, p, weak, strong, tau)[0] - g_ref))
        lam_l, lam_g = 0.7, 1.3
        note("scal total", abs(ad.scal_loss(l_ref, g_ref, ad.SCAlConfig(lam_l, lam_g)) - (lam_l * l_ref + lam_g * g_ref)))

        spec = LossSpec(ent=1.0, div=1.0, pce=0.3, pseudo_labels=labels, local=lam_l, glob=lam_g,
                        strong=strong, local_targets=lt, global_targets=gt)
        total = loss_and_encoder_grad(p, X, spec).loss
        ent, div, pce = ref.loa_terms(P, labels.tolist(), 0.3)
        note("client objective", abs(total - (ent + div + pce + lam_l * l_ref + lam_g * g_ref)))

        st = ad.update_threshold(ad.ThresholdState(0.8, -0.1, 0.15), p, X)
        want_tau, want_gamma = ref.skew_threshold([ref.entropy_row(r) for r in P], 0.8, -0.1, 0.15)
        note("threshold", max(abs(st.tau - want_tau), abs(st.gamma - want_gamma)))

        bmd = ad.BMDState(ratio=1.5, momentum=0.7, temperature=1.0, alpha=0.8, beta=1.2)
        bp = ad.bmd_prototypes(p, X, bmd)
        note("bmd centroids", _maxdiff(bp.centroids, ref.bmd_centroids(P, F, 1.5)))
        old = bmd.centroids.copy()
        xb = X[: len(X) // 2]
        new = ad.bmd_ema_update(bmd, forward(p, xb).hidden)
        note("bmd ema", _maxdiff(new, ref.bmd_ema(old.tolist(), ref.feats_of(p, xb), 1.0, 0.7)))
        D = ref.bmd_affinity(F, bmd.centroids.tolist(), 1.0)
        note("bmd affinity", _maxdiff(ad.prototype_affinity(cache.hidden, bmd.centroids, 1.0), D))
        bt = ad.bmd_terms(cache.probs, labels, np.array(D), bmd)
        note("bmd loss", abs(bt["total"] - ref.bmd_loss(P, labels.tolist(), D, 0.8, 1.2)))
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-10 and dt <= 10
    bad = [k for k, v in errs.items() if v > 1e-10]
    return Verdict(ok, f"{len(errs)} operations, max abs diff {worst:.2e}{' in ' + ','.join(bad) if bad else ''}, {dt:.1f}s")


# ---------------------------------------------------------------- criterion 3


def _trace(state, drop=()):
    rows = [r.to_json() for r in state.history]
    for r in rows:
        for k in drop:
            r.pop(k)
    return json.dumps(rows, sort_keys=True)


def criterion_3() -> Verdict:
    t0 = time.perf_counter()
    notes, ok = [], True

    # dyadic entries: every partial sum and the division by 4 are exact, so the mean must be bit-equal
    rng = RngStream(0, 9)
    dyadic = [init_params(5, 7, 4, rng) for _ in range(4)]
    dyadic = [ModelParams(*(np.round(getattr(p, b) * 64) / 64 for b in ("enc_w", "enc_b", "cls_w", "cls_b"))) for p in dyadic]
    flats_d = [p.flat() for p in dyadic]
    exact_d = np.array([float(sum(Fraction(float(f[i])) for f in flats_d) / 4) for i in range(flats_d[0].size)])
    bit_equal = bool(np.array_equal(server_aggregate(dyadic).flat(), exact_d))
    # general entries: within the recursive-summation error bound of the exact rational mean
    ps = [init_params(5, 7, 4, RngStream(s, 0)) for s in range(6)]
    got = server_aggregate(ps).flat()
    flats = [p.flat() for p in ps]
    n, u = len(flats), np.finfo(float).eps / 2
    exact = np.array([sum(Fraction(float(f[i])) for f in flats) / n for i in range(got.size)])
    err = np.array([abs(Fraction(float(g)) - e) for g, e in zip(got, exact)], dtype=float)
    bound = (n * u / (1 - n * u)) * np.sum(np.abs(flats), axis=0) / n + u * np.abs(got)
    ordered = np.array(ref.mean_blocks([f.tolist() for f in flats]))
    agg_ok = bit_equal and bool(np.all(err <= bound)) and bool(np.array_equal(got, ordered))
    ok &= agg_ok
    notes.append(f"aggregate exact on dyadic inputs {bit_equal}, error/bound {np.max(np.divide(err, bound, out=np.zeros_like(err), where=bound > 0)):.2f} on random inputs")

    setup = hz.prepare_seed(CFG, 1)
    views = [c.unlabeled() for c in setup.clients]
    base = replace(CFG.federation, seed=1)
    fedloa = run_federation(replace(base, method="fedloa"), views, setup.init)
    off = ad.SCAlConfig(0.0, 0.0, base.scal.beta, adaptive_threshold=False)
    scal0 = run_federation(replace(base, method="fedscal", scal=off), views, setup.init)
    same_fixed = _trace(scal0) == _trace(fedloa) and scal0.params.content_hash() == fedloa.params.content_hash()
    scal0a = run_federation(replace(base, method="fedscal", scal=replace(off, adaptive_threshold=True)), views, setup.init)
    same_adaptive = _trace(scal0a, ("tau", "gamma")) == _trace(fedloa, ("tau", "gamma"))
    same_adaptive &= scal0a.params.content_hash() == fedloa.params.content_hash()
    ok &= same_fixed and same_adaptive
    notes.append(f"lambda=0 trace equal: fixed-tau {same_fixed}, adaptive-tau {same_adaptive}")

    one = [setup.clients[0].unlabeled()]
    single = replace(base, participation=1.0, rounds=5)
    a = run_federation(replace(single, method="fedloa"), one, setup.init)
    b = run_federation(replace(single, method="loa"), one, setup.init)
    k1 = _trace(a) == _trace(b) and a.params.content_hash() == b.local_params[one[0].client_id].content_hash()
    ok &= k1
    notes.append(f"K=1 FedLoA==LoA {k1}")
    dt = time.perf_counter() - t0
    ok &= dt <= 60
    return Verdict(bool(ok), "; ".join(notes) + f", {dt:.1f}s")


# ---------------------------------------------------------------- criterion 4


def criterion_4() -> Verdict:
    r = runs()
    taus = [
        t
        for (arm, _), cell in r.cells.items()
        if arm in ("fedscal", "scal-none", "scal-local", "scal-global")
        for rec in cell.history
        for t in rec.tau.values()
    ]
    rounds = {len(c.history) for c in r.cells.values()}
    in_bounds = all(0.7 <= t <= 0.95 for t in taus)
    p = init_params(4, 6, 3, RngStream(0, 0))
    X = np.tile(RngStream(1, 0).normal((1, 4)), (10, 1))
    flat = ad.update_threshold(ad.ThresholdState(0.8, -0.1, 0.15), p, X)
    sigma0 = flat.tau == 0.8 and flat.gamma == 0.0
    ok = in_bounds and sigma0 and rounds == {30} and len(taus) > 0
    return Verdict(ok, f"{len(taus)} recorded tau in [{min(taus):.4f}, {max(taus):.4f}]; sigma=0 gives tau={flat.tau!r}")


# ---------------------------------------------------------------- criterion 5


def criterion_5() -> Verdict:
    r = runs()
    deltas = []
    for s in SEEDS:
        a, b = r.cells[("fedscal", s)].series("pacc"), r.cells[("fedloa", s)].series("pacc")
        deltas.append(float(np.mean(np.subtract(a, b)[-10:])))
    positive = sum(d > 0 for d in deltas)
    gap = final_mean("fedscal", "pacc") - final_mean("fedloa", "pacc")
    ok = positive >= 4 and gap >= 2 * PT and r.method_seconds <= 300
    return Verdict(
        ok,
        f"last-10 mean dpAcc per seed {[round(d, 4) for d in deltas]} ({positive}/5 > 0); "
        f"final pAcc FedSCAl-FedLoA {gap / PT:+.2f} pt; runs {r.method_seconds:.0f}s",
    )


# ---------------------------------------------------------------- criterion 6


def criterion_6() -> Verdict:
    s, f, l = (final_mean(a, "acc") for a in ("fedscal", "fedloa", "loa"))
    strict = s > f
    fl = f > l
    loa_ok = fl or (l - f) <= 0.5 * PT
    ok = strict and loa_ok
    tail = "" if fl else f" (FedLoA<LoA by {(l - f) / PT:.2f} pt, report-only within 0.5 pt)"
    return Verdict(ok, f"acc FedSCAl {s:.4f}, FedLoA {f:.4f}, LoA {l:.4f}{tail}")


# ---------------------------------------------------------------- criterion 7


def criterion_7() -> Verdict:
    both = final_mean("fedscal", "acc")
    local, glob, none = (final_mean(a, "acc") for a in ("scal-local", "scal-global", "scal-none"))
    tol = 0.5 * PT
    upper = both >= local - tol and both >= glob - tol
    lower = local >= none - tol and glob >= none - tol
    return Verdict(
        upper and lower,
        f"acc both {both:.4f}, local-only {local:.4f}, global-only {glob:.4f}, none {none:.4f}; "
        f"both-minus-single {(both - local) / PT:+.2f}/{(both - glob) / PT:+.2f} pt",
    )


# ---------------------------------------------------------------- criterion 8


def criterion_8() -> Verdict:
    adaptive, fixed = final_mean("fedscal", "acc"), final_mean("tau-fixed", "acc")
    margin = adaptive - fixed
    return Verdict(margin >= -0.5 * PT, f"adaptive {adaptive:.4f}, fixed {fixed:.4f}, margin {margin / PT:+.2f} pt")


# ---------------------------------------------------------------- criterion 9


def criterion_9() -> Verdict:
    r = runs()
    violations, rounds = 0, 0
    for (arm, _), cell in r.cells.items():
        if cell.method != "fedscal":
            continue
        for rec in cell.history:
            m = rec.metrics
            violations += m["inclusion_violations"]
            violations += int(m["both_wrong"] > min(m["local_wrong"], m["global_wrong"]))
            rounds += 1
    return Verdict(violations == 0 and rounds > 0, f"{violations} violations over {rounds} fedscal round records (checked per batch)")


# ---------------------------------------------------------------- criterion 10


def criterion_10() -> Verdict:
    r = runs()
    same = []
    with tempfile.TemporaryDirectory() as d:
        for name in METHOD_ARMS + ("scal-local",):
            first = hz.rows_to_csv(r.cells[(name, 1)].rows).encode()
            hz.run_cell(CFG, _arm(name), hz.prepare_seed(CFG, 1), Path(d) / name)
            same.append((Path(d) / name / "metrics.csv").read_bytes() == first)
    return Verdict(all(same), f"{sum(same)}/{len(same)} repeated seed-1 runs byte-identical")


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 11)}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    v = record(n, CRITERIA[n]())
    assert v.passed, REPORT[n]


if __name__ == "__main__":
    results = [record(n, fn()).passed for n, fn in CRITERIA.items()]
    sys.exit(0 if all(results) else 1)
