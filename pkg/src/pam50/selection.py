"""Per-slide patch-subset search with a four-objective NSGA-II.

A candidate subset is a binary vector over the slide's uncertainty-filtered
patches. Objectives (all maximized):

    diversity       mean pairwise cosine distance of selected embeddings
    informativeness mean embedding L2 norm
    compactness     negative subset size
    reliability     negative mean uncertainty

The evolutionary loop is the classic elitist (mu+lambda) NSGA-II: fast
non-dominated sorting, crowding distance, binary tournaments, uniform
crossover on bits, per-gene bit-flip mutation, and a repair step that keeps
every genome at or above the minimum subset size. RNG is consumed only by
selection/variation, never by objective evaluation, so results do not
depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, UsageError

N_OBJECTIVES = 4


@dataclass
class SelectionProblem:
    embeddings: np.ndarray
    uncertainties: np.ndarray
    k_min: int = 16

    def __post_init__(self):
        z = np.asarray(self.embeddings, dtype=np.float64)
        u = np.asarray(self.uncertainties, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 1:
            raise DataError(f"embeddings must be (N', dim) with N' >= 1, got {z.shape}")
        if u.shape != (z.shape[0],):
            raise DataError("uncertainties must align with embeddings")
        if self.k_min < 2:
            raise UsageError(f"k_min must be >= 2 (diversity needs a pair), got {self.k_min}")
        self.embeddings = z
        self.uncertainties = u
        self.norms = np.linalg.norm(z, axis=1)
        # Zero-norm embeddings get a zero unit row: cosine treated as 0.
        safe = np.where(self.norms > 0, self.norms, 1.0)
        self.unit = z / safe[:, None]
        self.unit[self.norms == 0] = 0.0

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class SubsetGenome:
    bits: np.ndarray
    objectives: np.ndarray | None = None
    rank: int | None = None
    crowding: float = 0.0

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def copy(self) -> "SubsetGenome":
        return SubsetGenome(
            bits=self.bits.copy(),
            objectives=None if self.objectives is None else self.objectives.copy(),
            rank=self.rank,
            crowding=self.crowding,
        )


@dataclass
class GAConfig:
    population: int = 50
    generations: int = 50
    tournament_size: int = 2
    crossover_prob: float = 0.9
    mutation_prob: float = 0.1
    per_gene_flip_rate: float | None = None  # default 1/N'
    init_density: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise UsageError("population must be >= 2")
        for name in ("crossover_prob", "mutation_prob", "init_density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise UsageError(f"{name} must be in [0, 1], got {v}")


def eval_objectives(bits: np.ndarray, problem: SelectionProblem) -> np.ndarray:
    """Four-objective value vector of a subset; empty subsets get a zero sentinel."""
    sel = np.flatnonzero(bits)
    k = len(sel)
    if k == 0:
        return np.zeros(N_OBJECTIVES)
    if k == 1:
        diversity = 0.0  # pair denominator vanishes; no-diversity value
    else:
        g = problem.unit[sel] @ problem.unit[sel].T
        mean_cos = (g.sum() - np.trace(g)) / (k * (k - 1))
        diversity = 1.0 - mean_cos
    informativeness = problem.norms[sel].mean()
    compactness = -float(k)
    reliability = -problem.uncertainties[sel].mean()
    return np.array([diversity, informativeness, compactness, reliability])


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    """Pareto dominance for maximized objective vectors."""
    a = np.asarray(a)
    b = np.asarray(b)
    return bool(np.all(a >= b) and np.any(a > b))


def _objective_matrix(population) -> np.ndarray:
    if isinstance(population, np.ndarray):
        return np.asarray(population, dtype=np.float64)
    objs = []
    for ind in population:
        if ind.objectives is None:
            raise DataError("nondominated_sort needs evaluated objectives")
        objs.append(ind.objectives)
    return np.asarray(objs, dtype=np.float64)


def nondominated_sort(population) -> list[list[int]]:
    """Fast non-dominated sort; returns fronts of indices, best first.

    Accepts a list of genomes (their ``rank`` is filled in) or a plain
    (n, objectives) array.
    """
    objs = _objective_matrix(population)
    n = objs.shape[0]
    ge = np.all(objs[:, None, :] >= objs[None, :, :], axis=2)
    gt = np.any(objs[:, None, :] > objs[None, :, :], axis=2)
    dom = ge & gt  # dom[i, j]: i dominates j

    n_dominators = dom.sum(axis=0)
    fronts: list[list[int]] = []
    remaining = n_dominators.copy()
    current = np.flatnonzero(remaining == 0)
    assigned = np.zeros(n, dtype=bool)
    rank = np.zeros(n, dtype=int)
    level = 0
    while current.size:
        fronts.append([int(i) for i in current])
        rank[current] = level
        assigned[current] = True
        decrement = dom[current].sum(axis=0)
        remaining = remaining - decrement
        nxt = np.flatnonzero((remaining == 0) & ~assigned)
        current = nxt
        level += 1
    if not isinstance(population, np.ndarray):
        for i, ind in enumerate(population):
            ind.rank = int(rank[i])
    return fronts


def crowding_distance(front_objectives: np.ndarray) -> np.ndarray:
    """NSGA-II crowding distance; boundary individuals get +inf."""
    objs = np.asarray(front_objectives, dtype=np.float64)
    m = objs.shape[0]
    if m == 0:
        raise DataError("crowding_distance needs a nonempty front")
    dist = np.zeros(m)
    if m <= 2:
        return np.full(m, np.inf)
    for j in range(objs.shape[1]):
        order = np.argsort(objs[:, j], kind="stable")
        vals = objs[order, j]
        dist[order[0]] = np.inf
        dist[order[-1]] = np.inf
        spread = vals[-1] - vals[0]
        if spread == 0:
            continue
        interior = order[1:-1]
        dist[interior] += (vals[2:] - vals[:-2]) / spread
    return dist


def _assign_crowding(population: list[SubsetGenome], fronts: list[list[int]]) -> None:
    for front in fronts:
        objs = np.asarray([population[i].objectives for i in front])
        for idx, d in zip(front, crowding_distance(objs)):
            population[idx].crowding = float(d)


def _tournament(parents: list[SubsetGenome], rng: np.random.Generator, size: int) -> SubsetGenome:
    picks = rng.integers(0, len(parents), size=size)
    best = parents[picks[0]]
    for i in picks[1:]:
        cand = parents[i]
        if cand.rank < best.rank:
            best = cand
        elif cand.rank == best.rank:
            if cand.crowding > best.crowding:
                best = cand
            elif cand.crowding == best.crowding and rng.random() < 0.5:
                best = cand
    return best


def mutate_bits(bits: np.ndarray, flip_rate: float, rng: np.random.Generator) -> np.ndarray:
    return bits ^ (rng.random(bits.shape) < flip_rate)


def repair(bits: np.ndarray, k_min: int, rng: np.random.Generator) -> np.ndarray:
    """Activate uniformly random zero genes until popcount reaches k_min."""
    deficit = k_min - int(np.count_nonzero(bits))
    if deficit > 0:
        zeros = np.flatnonzero(~bits)
        picked = rng.choice(zeros, size=deficit, replace=False)
        bits = bits.copy()
        bits[picked] = True
    return bits


def make_offspring(
    parents: list[SubsetGenome],
    problem: SelectionProblem,
    config: GAConfig,
    rng: np.random.Generator,
) -> list[SubsetGenome]:
    """M children via tournament selection, uniform crossover and bit flips."""
    n = problem.n_patches
    flip_rate = config.per_gene_flip_rate if config.per_gene_flip_rate is not None else 1.0 / n
    children: list[SubsetGenome] = []
    while len(children) < config.population:
        pa = _tournament(parents, rng, config.tournament_size)
        pb = _tournament(parents, rng, config.tournament_size)
        if rng.random() < config.crossover_prob:
            swap = rng.random(n) < 0.5
            c1 = np.where(swap, pb.bits, pa.bits)
            c2 = np.where(swap, pa.bits, pb.bits)
        else:
            c1 = pa.bits.copy()
            c2 = pb.bits.copy()
        for bits in (c1, c2):
            if rng.random() < config.mutation_prob:
                bits = mutate_bits(bits, flip_rate, rng)
            bits = repair(bits, problem.k_min, rng)
            children.append(SubsetGenome(bits=bits))
    return children[: config.population]


@dataclass
class EvolveResult:
    population: list[SubsetGenome]
    pareto_front: list[SubsetGenome]
    per_gen_best: list[np.ndarray] = field(default_factory=list)
    generations: int = 0


def evolve(problem: SelectionProblem, config: GAConfig) -> EvolveResult:
    """Run the (mu+lambda) NSGA-II loop; fully deterministic given the seed.

    The returned Pareto front is the non-dominated set over every genome
    evaluated during the run (the run optimum, as in common NSGA-II
    implementations), not just the final population: with four objectives
    the true front can exceed the population size, and crowding truncation
    would otherwise drop front members it has already seen.
    """
    n = problem.n_patches
    if n < problem.k_min:
        raise DataError(
            f"only {n} patches after filtering but k_min={problem.k_min}; lower k_min"
        )
    rng = np.random.default_rng(config.seed)
    archive: dict[bytes, SubsetGenome] = {}

    def record(ind: SubsetGenome) -> None:
        archive.setdefault(ind.bits.tobytes(), ind)

    population = []
    for _ in range(config.population):
        bits = rng.random(n) < config.init_density
        bits = repair(bits, problem.k_min, rng)
        population.append(SubsetGenome(bits=bits))
    for ind in population:
        ind.objectives = eval_objectives(ind.bits, problem)
        record(ind)

    per_gen_best: list[np.ndarray] = []
    for _ in range(config.generations):
        fronts = nondominated_sort(population)
        _assign_crowding(population, fronts)
        offspring = make_offspring(population, problem, config, rng)
        for ind in offspring:
            ind.objectives = eval_objectives(ind.bits, problem)
            record(ind)
        combined = population + offspring
        fronts = nondominated_sort(combined)
        _assign_crowding(combined, fronts)
        # refill preferring distinct genomes: duplicate-filled populations
        # waste front slots and lose coverage of large Pareto fronts
        next_pop: list[SubsetGenome] = []
        seen: set[bytes] = set()
        for front in fronts:
            ordered = sorted(front, key=lambda i: -combined[i].crowding)
            for i in ordered:
                if len(next_pop) >= config.population:
                    break
                key = combined[i].bits.tobytes()
                if key in seen:
                    continue
                seen.add(key)
                next_pop.append(combined[i])
            if len(next_pop) >= config.population:
                break
        if len(next_pop) < config.population:
            for front in fronts:
                for i in sorted(front, key=lambda i: -combined[i].crowding):
                    if len(next_pop) >= config.population:
                        break
                    next_pop.append(combined[i])
        population = next_pop
        per_gen_best.append(np.max([ind.objectives for ind in population], axis=0))

    candidates = list(archive.values())
    fronts = nondominated_sort(candidates)
    pareto = [candidates[i] for i in fronts[0]]
    crowd = crowding_distance(np.asarray([g.objectives for g in pareto]))
    for genome, d in zip(pareto, crowd):
        genome.crowding = float(d)
    fronts_pop = nondominated_sort(population)
    _assign_crowding(population, fronts_pop)
    return EvolveResult(
        population=population,
        pareto_front=pareto,
        per_gen_best=per_gen_best,
        generations=config.generations,
    )


def pick_subset(front: Sequence[SubsetGenome]) -> SubsetGenome:
    """One genome from a front: max sum of min-max-normalized objectives.

    Ties break toward the smaller subset, then the lexicographically lowest
    bit vector.
    """
    if not front:
        raise DataError("pick_subset needs a nonempty front")
    objs = np.asarray([g.objectives for g in front], dtype=np.float64)
    lo = objs.min(axis=0)
    hi = objs.max(axis=0)
    spread = hi - lo
    normed = np.where(spread > 0, (objs - lo) / np.where(spread > 0, spread, 1.0), 0.5)
    scores = normed.sum(axis=1)
    best_score = scores.max()
    ties = [i for i in range(len(front)) if scores[i] == best_score]
    chosen = min(ties, key=lambda i: (front[i].popcount, tuple(front[i].bits.astype(int))))
    return front[chosen]
