"""Constraint-aware evolutionary search over subnet specs."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .cost import Cost, spec_cost
from .network import SubnetSpec, SupernetConfig
from .supernet import Supernet, accuracy, calibration_batches, extract_subnet, recalibrate_bn

log = logging.getLogger(__name__)


class InfeasibleConstraint(RuntimeError):
    pass


@dataclass(frozen=True)
class Constraint:
    max_weight_bytes: int | None = 442_368
    max_macs: int | None = None
    kernels: tuple[int, ...] | None = None
    widths: tuple[int, ...] | None = None
    bits: int = 8

    def __post_init__(self):
        for name in ("max_weight_bytes", "max_macs"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")

    def choices(self, config: SupernetConfig) -> tuple[tuple[int, ...], tuple[int, ...]]:
        kernels = tuple(k for k in config.kernel_choices if self.kernels is None or k in self.kernels)
        widths = tuple(w for w in config.width_choices if self.widths is None or w in self.widths)
        if not kernels or not widths:
            raise InfeasibleConstraint("constraint leaves no kernel or width choices")
        return kernels, widths

    def cost(self, spec: SubnetSpec, config: SupernetConfig) -> Cost:
        return spec_cost(spec, config, self.bits)

    def satisfied(self, spec: SubnetSpec, config: SupernetConfig, cost: Cost | None = None) -> bool:
        kernels, widths = self.choices(config)
        if any(k not in kernels for ks in spec.kernels for k in ks):
            return False
        if any(w not in widths for ws in spec.widths for w in ws):
            return False
        cost = cost or self.cost(spec, config)
        if self.max_weight_bytes is not None and cost.param_bytes > self.max_weight_bytes:
            return False
        return self.max_macs is None or cost.macs <= self.max_macs


@dataclass(frozen=True)
class SearchConfig:
    population: int = 64
    generations: int = 20
    parent_fraction: float = 0.25
    mutation_prob: float = 0.1
    mutation_share: float = 0.5
    seed: int = 0
    max_attempts: int = 10_000

    def __post_init__(self):
        if self.population % 2:
            raise ValueError("population size must be even")
        for name in ("parent_fraction", "mutation_share"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")


@dataclass
class Candidate:
    spec: SubnetSpec
    cost: Cost
    fitness: float | None = None


def random_spec(config: SupernetConfig, rng: np.random.Generator, constraint: Constraint | None = None) -> SubnetSpec:
    kernels, widths = (constraint or Constraint(None)).choices(config)
    depths = [int(rng.integers(1, d + 1)) for d in config.unit_max_depths]
    return SubnetSpec(
        depths,
        [[int(rng.choice(kernels)) for _ in range(d)] for d in depths],
        [[int(rng.choice(widths)) for _ in range(d)] for d in depths],
    )


def random_feasible(config: SupernetConfig, constraint: Constraint, rng: np.random.Generator,
                    max_attempts: int = 10_000) -> Candidate:
    for _ in range(max_attempts):
        spec = random_spec(config, rng, constraint)
        cost = constraint.cost(spec, config)
        if constraint.satisfied(spec, config, cost):
            return Candidate(spec, cost)
    raise InfeasibleConstraint(f"no feasible subnet found in {max_attempts} random draws")


def mutate(spec: SubnetSpec, p: float, rng: np.random.Generator, config: SupernetConfig,
           constraint: Constraint | None = None) -> SubnetSpec:
    """Resample each gene (unit depth, layer kernel, layer width) with probability p."""
    kernels_ch, widths_ch = (constraint or Constraint(None)).choices(config)
    depths, kernels, widths = [], [], []
    for u, d in enumerate(spec.depths):
        if rng.random() < p:
            d = int(rng.integers(1, config.unit_max_depths[u] + 1))
        ks, ws = [], []
        for j in range(d):
            if j < spec.depths[u]:
                k, w = spec.kernels[u][j], spec.widths[u][j]
                if rng.random() < p:
                    k = int(rng.choice(kernels_ch))
                if rng.random() < p:
                    w = int(rng.choice(widths_ch))
            else:
                k, w = int(rng.choice(kernels_ch)), int(rng.choice(widths_ch))
            ks.append(k)
            ws.append(w)
        depths.append(d)
        kernels.append(ks)
        widths.append(ws)
    return SubnetSpec(depths, kernels, widths)


def crossover(a: SubnetSpec, b: SubnetSpec, rng: np.random.Generator, config: SupernetConfig,
              constraint: Constraint | None = None) -> SubnetSpec:
    """Uniform crossover; depths first, then each layer gene from a parent that has the layer."""
    kernels_ch, widths_ch = (constraint or Constraint(None)).choices(config)
    depths, kernels, widths = [], [], []
    for u in range(config.n_units):
        d = a.depths[u] if rng.random() < 0.5 else b.depths[u]
        ks, ws = [], []
        for j in range(d):
            owners = [p for p in (a, b) if j < p.depths[u]]
            if not owners:
                ks.append(int(rng.choice(kernels_ch)))
                ws.append(int(rng.choice(widths_ch)))
                continue
            ks.append(owners[int(rng.integers(len(owners)))].kernels[u][j])
            ws.append(owners[int(rng.integers(len(owners)))].widths[u][j])
        depths.append(d)
        kernels.append(ks)
        widths.append(ws)
    return SubnetSpec(depths, kernels, widths)


class Evaluator:
    """Accuracy of an extracted, BN-recalibrated subnet on a fixed validation subset (memoized)."""

    def __init__(self, supernet: Supernet, val_samples, val_labels, calib_samples, subset: int = 1024,
                 calib_batches: int = 2, batch_size: int = 64, seed: int = 0):
        val_labels = np.asarray(val_labels)
        if len(val_labels) == 0:
            raise ValueError("validation set is empty")
        rng = np.random.default_rng(seed)
        self.val_index = np.sort(rng.permutation(len(val_labels))[:subset])
        self.val_x = np.asarray(val_samples[self.val_index], dtype=np.float32)
        self.val_y = val_labels[self.val_index]
        self.calib = calibration_batches(calib_samples, calib_batches, batch_size, seed)
        self.supernet = supernet
        self.memo: dict[str, float] = {}

    @property
    def n_evaluations(self) -> int:
        return len(self.memo)

    def __call__(self, spec: SubnetSpec) -> float:
        key = spec.key()
        if key not in self.memo:
            net = recalibrate_bn(extract_subnet(self.supernet, spec), self.calib)
            self.memo[key] = accuracy(net, self.val_x, self.val_y)
        return self.memo[key]


@dataclass
class SearchResult:
    best: Candidate
    history: list[dict]
    audit: list[dict] = field(default_factory=list)

    def report_lines(self) -> str:
        return "".join(json.dumps(h, sort_keys=True) + "\n" for h in self.history)


def evolutionary_search(config: SupernetConfig, constraint: Constraint, search: SearchConfig, evaluate,
                        on_generation=None) -> SearchResult:
    """Elitist search: keep the top parents, refill with mutants and crossovers.

    ``evaluate(spec) -> float`` supplies fitness (higher is better). Every
    candidate admitted to the population is feasible and logged in ``audit``.
    """
    rng = np.random.default_rng(search.seed)
    audit: list[dict] = []
    distinct: set[str] = set()

    def admit(cand: Candidate, generation: int) -> Candidate:
        cand.fitness = float(evaluate(cand.spec))
        distinct.add(cand.spec.key())
        audit.append({"generation": generation, "spec": cand.spec.key(), "param_bytes": cand.cost.param_bytes,
                      "macs": cand.cost.macs, "feasible": constraint.satisfied(cand.spec, config, cand.cost)})
        return cand

    def rank(pop):
        return [c for _, c in sorted(enumerate(pop), key=lambda ic: (-ic[1].fitness, ic[0]))]

    population = [admit(random_feasible(config, constraint, rng, search.max_attempts), 0)
                  for _ in range(search.population)]
    population = rank(population)
    best = population[0]
    history = []

    def record(gen):
        entry = {
            "generation": gen,
            "best_fitness": best.fitness,
            "best_spec": best.spec.to_dict(),
            "population_mean_fitness": float(np.mean([c.fitness for c in population])),
            "evaluations_so_far": len(distinct),
        }
        history.append(entry)
        if on_generation is not None:
            on_generation(entry)

    record(0)
    n_parents = max(1, int(round(search.population * search.parent_fraction)))
    for gen in range(1, search.generations + 1):
        parents = population[:n_parents]
        n_children = search.population - n_parents
        n_mut = int(round(n_children * search.mutation_share))
        children = []
        for c in range(n_children):
            for _ in range(search.max_attempts):
                if c < n_mut:
                    p = parents[int(rng.integers(n_parents))]
                    spec = mutate(p.spec, search.mutation_prob, rng, config, constraint)
                else:
                    i, j = rng.integers(n_parents, size=2)
                    spec = crossover(parents[int(i)].spec, parents[int(j)].spec, rng, config, constraint)
                cost = constraint.cost(spec, config)
                if constraint.satisfied(spec, config, cost):
                    cand = Candidate(spec, cost)
                    break
            else:
                cand = random_feasible(config, constraint, rng, search.max_attempts)
            children.append(admit(cand, gen))
        population = rank(parents + children)
        if population[0].fitness > best.fitness:
            best = population[0]
        record(gen)
    return SearchResult(best, history, audit)
