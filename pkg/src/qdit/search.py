"""Evolutionary allocation of per-layer group sizes under a BitOps budget.

Each iteration evaluates the population, merges it into the TopK set and
rebuilds the population: half by crossover of two TopK parents, half by
mutation of one TopK parent, keeping only candidates within the budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, QDiTError
from .geometry import LayerShape
from .metrics import GaussianStats, fit_gaussian, frechet_distance
from .model import Calibration, DiffusionSchedule, QuantSpec, ToyDiT, ddim_sample, quantize_model
from .numerics import Rng

log = logging.getLogger(__name__)

TOY_SPACE = (8, 16, 32, 48, 72)
FULL_SPACE = (32, 64, 128, 192, 288)
RESCALE_COST = 512
RESAMPLE_CAP = 1000


@dataclass(frozen=True, order=True)
class GroupConfig:
    sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(g) for g in self.sizes))

    def __len__(self) -> int:
        return len(self.sizes)

    def __str__(self) -> str:
        return "-".join(str(g) for g in self.sizes)

    @classmethod
    def parse(cls, text: str) -> "GroupConfig":
        try:
            return cls(tuple(int(tok) for tok in text.strip().split("-")))
        except ValueError as exc:
            raise ConfigError(f"bad group config {text!r}") from exc

    @classmethod
    def uniform(cls, g: int, n: int) -> "GroupConfig":
        return cls((int(g),) * n)

    def validate(self, space: Sequence[int], n_layers: int) -> "GroupConfig":
        if len(self.sizes) != n_layers:
            raise ConfigError(f"group config has {len(self.sizes)} entries, expected {n_layers}")
        bad = sorted(set(self.sizes) - set(space))
        if bad:
            raise ConfigError(f"group sizes {bad} not in search space {tuple(space)}")
        return self


@dataclass(frozen=True)
class SearchParams:
    space: tuple[int, ...] = TOY_SPACE
    population: int = 16
    iterations: int = 15
    mutation_prob: float = 0.2
    topk: int = 8
    budget: float | None = None  # None: BitOps of the uniform default-group config
    n_fid: int = 512

    def __post_init__(self):
        object.__setattr__(self, "space", tuple(sorted(set(int(g) for g in self.space))))
        if not self.space or min(self.space) < 1:
            raise ConfigError("search space must contain positive group sizes")
        if self.population < 2 or self.population % 2:
            raise ConfigError("population must be even and at least 2")
        if not 1 <= self.topk <= self.population:
            raise ConfigError("topk must lie in [1, population]")
        if not 0.0 < self.mutation_prob < 1.0:
            raise ConfigError("mutation probability must lie in (0, 1)")
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")


@dataclass(frozen=True)
class BitOpsModel:
    layers: tuple[LayerShape, ...]
    bits_w: int
    bits_a: int
    rescale_cost: int = RESCALE_COST


def bitops(g: GroupConfig, m: BitOpsModel) -> int:
    """``sum_l T_l d_out (d_in b_w b_a + ceil(d_in / g_l) C_rs)``; exact integer."""
    if len(g) != len(m.layers):
        raise ConfigError(f"group config has {len(g)} entries, model has {len(m.layers)} layers")
    total = 0
    for layer, size in zip(m.layers, g.sizes):
        groups = -(-layer.d_in // size)
        total += layer.tokens * layer.d_out * (layer.d_in * m.bits_w * m.bits_a + groups * m.rescale_cost)
    return total


# ---------------------------------------------------------------- fitness


@dataclass
class FitnessContext:
    """Everything a fitness evaluation needs, prepared once per search."""

    model: ToyDiT
    schedule: DiffusionSchedule
    reference: GaussianStats
    calibration: Calibration | None
    bits_w: int
    bits_a: int
    n_fid: int
    seed: int
    weights: str = "gptq"
    exclude: tuple[str, ...] = ()
    cache: dict = field(default_factory=dict)
    weight_cache: dict = field(default_factory=dict)

    def __call__(self, g: GroupConfig) -> float:
        return evaluate_fitness(g, self)


def reference_stats(model: ToyDiT, schedule: DiffusionSchedule, n: int, seed: int) -> GaussianStats:
    return fit_gaussian(ddim_sample(model, schedule, n, seed))


def evaluate_fitness(g: GroupConfig, ctx: FitnessContext) -> float:
    """Toy-FID of the model quantized under ``g`` against the fp reference; memoized."""
    if g.sizes in ctx.cache:
        return ctx.cache[g.sizes]
    try:
        spec = QuantSpec(g.sizes, ctx.bits_w, ctx.bits_a, ctx.weights, "dynamic", ctx.exclude)
        qm = quantize_model(ctx.model, spec, ctx.calibration, ctx.weight_cache)
        samples = ddim_sample(ctx.model, ctx.schedule, ctx.n_fid, ctx.seed, qm)
        value = frechet_distance(ctx.reference, fit_gaussian(samples))
    except (QDiTError, FloatingPointError) as exc:
        log.warning("fitness evaluation failed for %s: %s", g, exc)
        value = math.inf
    ctx.cache[g.sizes] = value
    return value


# ---------------------------------------------------------------- operators


def crossover(parents: Sequence[GroupConfig], rng: Rng) -> GroupConfig:
    """Uniform crossover of two distinct parents drawn uniformly from ``parents``.

    With a single parent the child is a copy of it.
    """
    k = len(parents)
    if k == 0:
        raise ConfigError("crossover needs at least one parent")
    if k == 1:
        return parents[0]
    i = rng.integers(k)
    j = rng.integers(k - 1)
    j += j >= i
    a, b = np.array(parents[i].sizes), np.array(parents[j].sizes)
    take_a = rng.uniform(len(a)) < 0.5
    return GroupConfig(tuple(np.where(take_a, a, b)))


def mutate(parent: GroupConfig, rng: Rng, p: float, space: Sequence[int]) -> GroupConfig:
    """Resample each gene uniformly from ``space`` with probability ``p``."""
    n = len(parent)
    hit = rng.uniform(n) < p
    draws = np.asarray(space)[rng.integers(len(space), n)]
    return GroupConfig(tuple(np.where(hit, draws, np.array(parent.sizes))))


# ---------------------------------------------------------------- search loop


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    best_fitness: float
    mean_fitness: float
    best_config: GroupConfig


@dataclass
class SearchResult:
    best: GroupConfig
    best_fitness: float
    history: list[HistoryRow]
    evaluated: dict[GroupConfig, float]
    fallbacks: int = 0


def feasible_uniform_configs(space: Sequence[int], m: BitOpsModel, budget: float) -> list[GroupConfig]:
    n = len(m.layers)
    return [GroupConfig.uniform(g, n) for g in sorted(space) if bitops(GroupConfig.uniform(g, n), m) <= budget]


def _rank_key(item):
    config, value = item
    return (value, config.sizes)


def evolve(
    params: SearchParams,
    fitness: Callable[[GroupConfig], float],
    m: BitOpsModel,
    seed: int,
    budget: float | None = None,
) -> SearchResult:
    """Evolutionary search; returns the best configuration ever evaluated.

    The first population holds every feasible uniform configuration, then
    random feasible ones up to ``population``. TopK keeps the ``topk`` best
    distinct configurations seen so far (ties broken by the smaller config).
    Feasibility is ``bitops <= budget``.
    """
    budget = params.budget if budget is None else budget
    if budget is None:
        raise ConfigError("a BitOps budget is required")
    n = len(m.layers)
    space = params.space
    largest = GroupConfig.uniform(max(space), n)
    if bitops(largest, m) > budget:
        raise ConfigError(
            f"budget {budget} is infeasible: the coarsest configuration needs {bitops(largest, m)} BitOps"
        )
    rng = Rng(seed)
    memo: dict[GroupConfig, float] = {}
    fallbacks = 0

    def feasible(g: GroupConfig) -> bool:
        return bitops(g, m) <= budget

    def score(g: GroupConfig) -> float:
        if g not in memo:
            if not feasible(g):  # guarded by construction; never evaluate outside the budget
                raise AssertionError(f"infeasible candidate {g}")
            memo[g] = float(fitness(g))
        return memo[g]

    def fill(pop: list, target: int, propose: Callable[[], GroupConfig], fallback: list[GroupConfig]) -> None:
        nonlocal fallbacks
        while len(pop) < target:
            for _ in range(RESAMPLE_CAP):
                g = propose()
                if feasible(g):
                    pop.append(g)
                    break
            else:
                missing = target - len(pop)
                log.warning("resample cap reached; filling %d slots with TopK copies", missing)
                fallbacks += missing
                pop.extend(fallback[i % len(fallback)] for i in range(missing))

    def random_config() -> GroupConfig:
        return GroupConfig(tuple(np.asarray(space)[rng.integers(len(space), n)]))

    population = feasible_uniform_configs(space, m, budget)
    fill(population, params.population, random_config, [largest])

    topk: list[GroupConfig] = []
    history: list[HistoryRow] = []
    for it in range(params.iterations):
        values = [score(g) for g in population]
        pool = {g: memo[g] for g in set(topk) | set(population)}
        topk = [g for g, _ in sorted(pool.items(), key=_rank_key)[: params.topk]]
        finite = [v for v in values if math.isfinite(v)]
        mean = float(np.mean(finite)) if finite else math.inf
        history.append(HistoryRow(it, memo[topk[0]], mean, topk[0]))
        log.info("iteration %d: best %.6g mean %.6g %s", it, memo[topk[0]], mean, topk[0])
        if it == params.iterations - 1:
            break
        population = []
        fill(population, params.population // 2, lambda: crossover(topk, rng), topk)
        fill(
            population,
            params.population,
            lambda: mutate(topk[rng.integers(len(topk))], rng, params.mutation_prob, space),
            topk,
        )
    return SearchResult(topk[0], memo[topk[0]], history, memo, fallbacks)


HISTORY_HEADER = ("iteration", "best_fitness", "mean_fitness", "best_config")


def history_rows(result: SearchResult) -> list[tuple]:
    return [(h.iteration, h.best_fitness, h.mean_fitness, str(h.best_config)) for h in result.history]
