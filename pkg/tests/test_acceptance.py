"""Acceptance criteria 1-10, one PASS/FAIL line each (see the terminal summary).

Criterion 9 runs the full-size toy model with shortened sampling (20 DDIM
steps, 128 samples per toy-FID) and a small search so that it fits its time
limit on one core; criterion 10 uses shortened runs of the real commands.
"""

import itertools
import math
import time

import numpy as np
import pytest

from qdit.cli import main
from qdit.gptq import HessianAccumulator, gptq_quantize_layer, rtn_quantize_layer, weighted_error
from qdit.geometry import LayerShape
from qdit.metrics import GaussianStats, fit_gaussian, frechet_distance
from qdit.model import DiffusionSchedule, ToyDiTConfig, calibrate, ddim_sample, init_random, initial_noise, uniform_groups
from qdit.quantizer import (
    QuantParams,
    calibrate_static_activation,
    compute_params,
    dequantize,
    dynamic_quantize_activation,
    fake_quant,
    group_quantize_weights,
    quantize,
    quantize_activation_with,
    quantized_matmul,
)
from qdit.search import BitOpsModel, FitnessContext, GroupConfig, SearchParams, bitops, evolve, feasible_uniform_configs


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_1_quantizer_roundtrip(report):
    rng = np.random.default_rng(1)
    worst, exact = -np.inf, True
    with Timer() as t:
        for bits in (2, 4, 8):
            for _ in range(100):
                lo = rng.uniform(-10, 10)
                p = compute_params(lo, lo + rng.uniform(1e-3, 20), bits)
                s = float(p.scale)
                x = s * (rng.uniform(0, p.qmax, 3334) - float(p.zero_point))
                worst = max(worst, float(np.max(np.abs(fake_quant(x, p) - x) - s / 2)))
                k = np.arange(p.qmax + 1)
                grid = dequantize(k, p)
                exact &= np.array_equal(fake_quant(grid, p), grid) and np.array_equal(quantize(grid, p), k)
    ok = worst <= 1e-6 and exact and t.seconds < 5
    assert report(1, ok, f"max(|fq(x)-x| - s/2) = {worst:.2e} over 1.0e6 values, grid exact: {exact}, {t.seconds:.2f}s")


def test_2_group_degeneracy(report):
    rng = np.random.default_rng(2)
    same = 0
    with Timer() as t:
        for _ in range(100):
            d_in, d_out = rng.integers(1, 300), rng.integers(1, 40)
            bits = int(rng.choice([2, 4, 8]))
            w = (rng.standard_normal((d_in, d_out)) * rng.uniform(0.01, 10)).astype(np.float32)
            q = group_quantize_weights(w, d_in, bits)
            p = compute_params(w.min(axis=0), w.max(axis=0), bits)
            same += (
                np.array_equal(q.codes, quantize(w, p))
                and q.params.scale.tobytes() == p.scale[None].tobytes()
                and np.array_equal(q.params.zero_point[0], p.zero_point)
            )
    ok = same == 100 and t.seconds < 5
    assert report(2, ok, f"{same}/100 matrices bitwise equal to per-column quantization, {t.seconds:.2f}s")


def test_3_quantized_matmul_oracle(report):
    rng = np.random.default_rng(3)
    worst, ragged = 0.0, 0
    with Timer() as t:
        for _ in range(50):
            b, n, d, o = rng.integers(1, 5), rng.integers(1, 20), rng.integers(1, 300), rng.integers(1, 70)
            g = int(rng.integers(1, d + 1))
            ragged += d % g != 0
            bw, ba = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            x = rng.standard_normal((b, n, d)).astype(np.float32)
            w = rng.standard_normal((d, o)).astype(np.float32)
            xq, wq = dynamic_quantize_activation(x, g, ba), group_quantize_weights(w, g, bw)
            ref = xq.dequantize() @ wq.dequantize()
            scale = max(float(np.abs(ref).max()), 1e-30)
            worst = max(worst, float(np.abs(quantized_matmul(xq, wq) - ref).max()) / scale)
    ok = worst <= 1e-5 and t.seconds < 10
    assert report(3, ok, f"max relative error {worst:.2e} over 50 cases ({ragged} ragged), {t.seconds:.2f}s")


def test_4_gptq_quality(report):
    rng = np.random.default_rng(4)
    wins, identity_ok, worst_ratio = 0, True, 0.0
    with Timer() as t:
        for _ in range(100):
            w = rng.standard_normal((32, 32))
            h = HessianAccumulator.zeros(32).accumulate(rng.standard_normal((256, 32)))
            wins += weighted_error(w, gptq_quantize_layer(w, h, 32, 4), h) <= weighted_error(w, rtn_quantize_layer(w, 32, 4), h)
            g = int(rng.choice([4, 8, 32]))
            identity_ok &= np.array_equal(gptq_quantize_layer(w, np.eye(32), g, 4).codes, group_quantize_weights(w, g, 4).codes)
        codes = np.array(list(itertools.product(range(4), repeat=4))).T  # (4, 256) candidate columns
        for _ in range(100):
            w = rng.standard_normal((4, 1))
            h = HessianAccumulator.zeros(4).accumulate(rng.standard_normal((256, 4))).h
            q = gptq_quantize_layer(w, h, 4, 2)
            p = QuantParams(q.params.scale, q.params.zero_point, 2)
            delta = dequantize(codes, p) - w
            best = float(np.min(np.einsum("ic,ij,jc->c", delta, h, delta)))
            worst_ratio = max(worst_ratio, weighted_error(w, q, h) / best)
    ok = wins >= 95 and identity_ok and worst_ratio <= 2.0 and t.seconds < 60
    assert report(
        4,
        ok,
        f"GPTQ <= RTN on {wins}/100 seeds, identity Hessian == RTN: {identity_ok}, "
        f"worst exhaustive ratio {worst_ratio:.4f} (100 seeds), {t.seconds:.2f}s",
    )


def test_5_frechet_distance(report):
    rng = np.random.default_rng(5)
    errs = {}
    with Timer() as t:
        m = rng.standard_normal((64, 64))
        a = GaussianStats(rng.standard_normal(64), m @ m.T / 64, 1000)
        a_copy = GaussianStats(a.mu.copy(), a.sigma.copy() + 0.0, 1000)
        errs["self"] = abs(frechet_distance(a, a_copy))
        one = []
        for _ in range(50):
            m1, m2, s1, s2 = rng.standard_normal(4) * [3, 3, 1, 1]
            s1, s2 = abs(s1) + 0.01, abs(s2) + 0.01
            d = frechet_distance(GaussianStats([m1], [[s1 * s1]], 2), GaussianStats([m2], [[s2 * s2]], 2))
            one.append(abs(d - ((m1 - m2) ** 2 + (s1 - s2) ** 2)))
        errs["1-D"] = max(one)
        v1, v2 = rng.uniform(0.1, 4, 64), rng.uniform(0.1, 4, 64)
        mu1, mu2 = rng.standard_normal(64), rng.standard_normal(64)
        d = frechet_distance(GaussianStats(mu1, np.diag(v1), 2), GaussianStats(mu2, np.diag(v2), 2))
        errs["diagonal"] = abs(d - (np.sum((mu1 - mu2) ** 2) + np.sum((np.sqrt(v1) - np.sqrt(v2)) ** 2)))
        m = rng.standard_normal((64, 64))
        b = GaussianStats(rng.standard_normal(64), m @ m.T / 64, 1000)
        dab = frechet_distance(a, b)
        errs["symmetry"] = abs(dab - frechet_distance(b, a))
        q, _ = np.linalg.qr(rng.standard_normal((64, 64)))
        rot = lambda s: GaussianStats(q @ s.mu, q @ s.sigma @ q.T, s.n)  # noqa: E731
        errs["rotation"] = abs(dab - frechet_distance(rot(a), rot(b)))
    ok = max(errs["self"], errs["1-D"], errs["diagonal"]) <= 1e-8 and max(errs["symmetry"], errs["rotation"]) <= 1e-6 and t.seconds < 5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert report(5, ok, f"errors: {detail}, {t.seconds:.2f}s")


def test_6_ddim_telescoping(report):
    with Timer() as t:
        model = init_random(ToyDiTConfig(seed=6)).zero_output_head()
        s = DiffusionSchedule()
        x0 = ddim_sample(model, s, 16, 6)
        expected = initial_noise(16, 64, 6) / math.sqrt(s.alphas_cumprod[-1])
        rel = float(np.max(np.abs(x0 - expected) / np.abs(expected)))
    ok = rel <= 1e-5 and t.seconds < 5
    assert report(6, ok, f"max relative deviation {rel:.2e} (T={s.steps}), {t.seconds:.2f}s")


def test_7_dynamic_beats_static(report):
    rng = np.random.default_rng(7)
    wins = 0
    with Timer() as t:
        for _ in range(100):
            calib = [rng.standard_normal((4, 16, 64)).astype(np.float32) for _ in range(4)]
            layout, p = calibrate_static_activation(calib, 16, 8)
            x = 3 * rng.standard_normal((4, 16, 64)).astype(np.float32)
            static = quantize_activation_with(x, layout, p).dequantize()
            dynamic = dynamic_quantize_activation(x, 16, 8).dequantize()
            wins += np.mean((dynamic - x) ** 2) < np.mean((static - x) ** 2)
    ok = wins >= 99 and t.seconds < 10
    assert report(7, ok, f"dynamic MSE < static MSE on {wins}/100 trials (b=8, g=16, 3x shift), {t.seconds:.2f}s")


def test_8_search_correctness(report):
    space = (8, 16, 32)
    m = BitOpsModel(tuple(LayerShape(f"l{i}", 32, 16, 4) for i in range(3)), 4, 8)
    budget = bitops(GroupConfig((16, 16, 16)), m)
    configs = [GroupConfig(s) for s in itertools.product(space, repeat=3)]
    feasible = [g for g in configs if bitops(g, m) <= budget]
    hits, all_feasible, monotone = 0, True, True
    with Timer() as t:
        for seed in range(100):
            c = np.random.default_rng(1000 + seed).uniform(-1, 1, 3)
            f = lambda g: float(sum(ci * space.index(gi) for ci, gi in zip(c, g.sizes)))  # noqa: E731
            target = min(feasible, key=lambda g: (f(g), g.sizes))
            res = evolve(SearchParams(space, 16, 20, 0.2, 8), f, m, seed, budget)
            hits += res.best == target
            all_feasible &= all(bitops(g, m) <= budget for g in res.evaluated)
            best = [h.best_fitness for h in res.history]
            monotone &= all(x >= y for x, y in zip(best, best[1:]))
    ok = hits >= 95 and all_feasible and monotone and t.seconds < 30
    assert report(
        8,
        ok,
        f"oracle optimum found in {hits}/100 runs ({len(configs)} configs, {len(feasible)} feasible), "
        f"all evaluated feasible: {all_feasible}, best-ever monotone: {monotone}, {t.seconds:.2f}s",
    )


# criterion 9 settings: shortened sampling so five model seeds fit in the time limit
E2E_SEEDS = (0, 1, 2, 3, 4)
E2E_STEPS = 20
E2E_N_FID = 128
E2E_SEARCH = SearchParams(population=2, iterations=2, topk=2)
SLACK = 1.05


def ladder_for_seed(seed: int) -> dict:
    model = init_random(ToyDiTConfig(seed=seed))
    schedule = DiffusionSchedule(steps=E2E_STEPS)
    sample_seed = 1000 + seed
    reference = fit_gaussian(ddim_sample(model, schedule, E2E_N_FID, sample_seed))
    calib = calibrate(model, schedule, 32, 2000 + seed)
    weight_cache: dict = {}

    def context(bits_w):
        return FitnessContext(model, schedule, reference, calib, bits_w, 8, E2E_N_FID, sample_seed, weight_cache=weight_cache)

    g32 = GroupConfig(uniform_groups(model, 32))
    fid = {bits: context(bits)(g32) for bits in (8, 6)}
    w4 = context(4)
    fid[4] = w4(g32)
    m = BitOpsModel(model.geometry().layers, 4, 8)
    budget = bitops(g32, m)
    result = evolve(E2E_SEARCH, w4, m, 3000 + seed, budget)
    uniform = min(w4(g) for g in feasible_uniform_configs(E2E_SEARCH.space, m, budget))
    return {"fid": fid, "searched": result.best_fitness, "uniform": uniform, "best": str(result.best)}


@pytest.mark.slow
def test_9_end_to_end_ladder(report):
    rows, ordered, search_ok = [], True, True
    with Timer() as t:
        for seed in E2E_SEEDS:
            r = ladder_for_seed(seed)
            f = r["fid"]
            ok_seed = 0.0 <= f[8] <= SLACK * f[6] and f[6] <= SLACK * f[4]
            ordered &= ok_seed
            search_ok &= r["searched"] <= r["uniform"]
            rows.append(
                f"seed {seed}: W8A8 {f[8]:.2f} W6A8 {f[6]:.2f} W4A8 {f[4]:.2f} "
                f"searched {r['searched']:.2f} best uniform {r['uniform']:.2f}"
            )
    for row in rows:
        print("  " + row)
    ok = ordered and search_ok and t.seconds < 15 * 60
    assert report(
        9,
        ok,
        f"fp(=0) <= W8A8 <= W6A8 <= W4A8 (5% slack) on {len(E2E_SEEDS)} seeds: {ordered}, "
        f"searched <= best uniform: {search_ok}, {t.seconds:.0f}s; " + "; ".join(rows),
    )


DETERMINISM_CFG = """
model_seed = 10
sampler_seed = 11
steps = 4
n_fid = 80
calib_samples = 8
population = 4
iterations = 2
topk = 2
"""


@pytest.mark.slow
def test_10_determinism(report, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(DETERMINISM_CFG)
    with Timer() as t:
        codes = [main(["search", "--config", str(cfg), "--out", str(tmp_path / f"s{i}")]) for i in range(2)]
        eval_cfg = tmp_path / "eval.cfg"
        eval_cfg.write_text(DETERMINISM_CFG + f"group_config = {tmp_path / 's0' / 'best_config.txt'}\nmodes = fp,rtn,+group,+dynamic,+search\n")
        codes += [main(["eval", "--config", str(eval_cfg), "--out", str(tmp_path / f"e{i}")]) for i in range(2)]
    same = {}
    for prefix, names in (("s", ("best_config.txt", "search_history.csv", "run_config.txt")), ("e", ("eval_report.csv", "run_config.txt"))):
        for name in names:
            same[f"{prefix}:{name}"] = (tmp_path / f"{prefix}0" / name).read_bytes() == (tmp_path / f"{prefix}1" / name).read_bytes()
    ok = codes == [0, 0, 0, 0] and all(same.values())
    assert report(10, ok, f"search and eval reruns byte-identical: {all(same.values())} ({len(same)} files), {t.seconds:.0f}s")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
