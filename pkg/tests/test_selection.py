import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pam50.errors import DataError, UsageError
from pam50.selection import (
    GAConfig,
    SelectionProblem,
    SubsetGenome,
    crowding_distance,
    dominates,
    eval_objectives,
    evolve,
    make_offspring,
    mutate_bits,
    nondominated_sort,
    pick_subset,
    repair,
)

from oracles import brute_front_ranks, hypervolume, pareto_filter


def bits_of(indices, n):
    b = np.zeros(n, dtype=bool)
    b[list(indices)] = True
    return b


def random_problem(seed, n=10, dim=8, k_min=2):
    rng = np.random.default_rng(seed)
    return SelectionProblem(
        embeddings=rng.standard_normal((n, dim)),
        uncertainties=rng.uniform(0.0, 0.3, n),
        k_min=k_min,
    )


class TestEvalObjectives:
    def test_two_orthogonal_unit_embeddings(self):
        problem = SelectionProblem(
            embeddings=np.array([[1.0, 0.0], [0.0, 1.0]]),
            uncertainties=np.array([0.1, 0.3]),
            k_min=2,
        )
        phi = eval_objectives(bits_of([0, 1], 2), problem)
        assert phi == pytest.approx([1.0, 1.0, -2.0, -0.2], abs=1e-9)

    def test_identical_embeddings_zero_diversity(self):
        problem = SelectionProblem(
            embeddings=np.array([[1.0, 1.0], [1.0, 1.0]]),
            uncertainties=np.array([0.0, 0.0]),
            k_min=2,
        )
        assert eval_objectives(bits_of([0, 1], 2), problem)[0] == pytest.approx(0.0, abs=1e-9)

    def test_three_vector_worked_example(self):
        problem = SelectionProblem(
            embeddings=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]),
            uncertainties=np.zeros(3),
            k_min=2,
        )
        phi = eval_objectives(bits_of([0, 1, 2], 3), problem)
        assert phi[0] == pytest.approx(2.0 / 3.0, abs=1e-9)

    def test_singleton_diversity_zero(self):
        problem = random_problem(0)
        phi = eval_objectives(bits_of([4], 10), problem)
        assert phi[0] == 0.0
        assert phi[2] == -1.0

    def test_empty_subset_sentinel(self):
        problem = random_problem(1)
        assert np.array_equal(eval_objectives(np.zeros(10, dtype=bool), problem), np.zeros(4))

    def test_zero_norm_embedding_counts_distance_one(self):
        problem = SelectionProblem(
            embeddings=np.array([[0.0, 0.0], [1.0, 0.0]]),
            uncertainties=np.zeros(2),
            k_min=2,
        )
        phi = eval_objectives(bits_of([0, 1], 2), problem)
        assert phi[0] == pytest.approx(1.0, abs=1e-12)

    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 50.0))
    @settings(max_examples=30)
    def test_ranges_and_scaling(self, seed, scale):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 12))
        z = rng.standard_normal((n, 6))
        u = rng.uniform(0, 1, n)
        problem = SelectionProblem(z, u, k_min=2)
        scaled = SelectionProblem(z * scale, u, k_min=2)
        bits = rng.random(n) < 0.6
        if bits.sum() == 0:
            bits[0] = True
        phi = eval_objectives(bits, problem)
        phi_scaled = eval_objectives(bits, scaled)
        assert 0.0 <= phi[0] <= 2.0
        assert phi[1] >= 0.0
        assert -n <= phi[2] <= -1
        assert phi[3] <= 0.0
        assert phi_scaled[0] == pytest.approx(phi[0], abs=1e-9)  # cosine scale-free
        assert phi_scaled[1] == pytest.approx(scale * phi[1], rel=1e-9)


class TestDominates:
    def test_strict(self):
        assert dominates([1, 1, 1, 1], [0, 0, 0, 0])

    def test_self_not_dominating(self):
        assert not dominates([1, 2, 3, 4], [1, 2, 3, 4])

    def test_incomparable(self):
        assert not dominates([1, 0, 0, 0], [0, 1, 0, 0])
        assert not dominates([0, 1, 0, 0], [1, 0, 0, 0])


class TestNondominatedSort:
    def test_two_objective_example(self):
        objs = np.array([[2.0, 2.0], [1.0, 1.0], [3.0, 0.0]])
        fronts = nondominated_sort(objs)
        assert fronts == [[0, 2], [1]]

    def test_identical_individuals_single_front(self):
        objs = np.tile([1.0, 2.0, 3.0, 4.0], (6, 1))
        assert nondominated_sort(objs) == [list(range(6))]

    def test_chain_gives_singleton_fronts(self):
        objs = np.array([[float(i)] * 4 for i in range(5)])
        fronts = nondominated_sort(objs)
        assert fronts == [[4], [3], [2], [1], [0]]

    def test_assigns_ranks_on_genomes(self):
        genomes = [
            SubsetGenome(bits=np.zeros(2, dtype=bool), objectives=np.array(o))
            for o in ([2.0, 2.0], [1.0, 1.0], [3.0, 0.0])
        ]
        nondominated_sort(genomes)
        assert [g.rank for g in genomes] == [0, 1, 0]

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=40)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 40))
        objs = rng.integers(0, 5, size=(n, 4)).astype(float)  # ties likely
        fronts = nondominated_sort(objs)
        ranks = np.empty(n, dtype=int)
        for level, front in enumerate(fronts):
            ranks[front] = level
        assert np.array_equal(ranks, brute_front_ranks(objs))


class TestCrowdingDistance:
    def test_hand_example(self):
        objs = np.array([[0.0, 2.0], [1.0, 1.0], [2.0, 0.0]])
        dist = crowding_distance(objs)
        assert np.isinf(dist[0]) and np.isinf(dist[2])
        assert dist[1] == pytest.approx(2.0)

    def test_front_of_two_all_infinite(self):
        dist = crowding_distance(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.all(np.isinf(dist))

    def test_constant_objective_contributes_zero(self):
        objs = np.array([[0.0, 5.0], [1.0, 5.0], [2.0, 5.0]])
        dist = crowding_distance(objs)
        assert dist[1] == pytest.approx(1.0)  # only the first objective (spread 2)


class TestVariation:
    def make_parents(self, n=6, n_bits=10, seed=0):
        rng = np.random.default_rng(seed)
        parents = []
        for _ in range(n):
            g = SubsetGenome(bits=rng.random(n_bits) < 0.5)
            g.bits[0] = True
            g.objectives = rng.random(4)
            g.rank = 0
            g.crowding = float(rng.random())
            parents.append(g)
        return parents

    def test_operators_disabled_gives_clones(self):
        parents = self.make_parents()
        problem = random_problem(0, n=10, k_min=2)
        config = GAConfig(population=8, crossover_prob=0.0, mutation_prob=0.0, seed=0)
        children = make_offspring(parents, problem, config, np.random.default_rng(0))
        parent_keys = {tuple(p.bits.astype(int)) for p in parents}
        for child in children:
            if child.popcount >= 2:  # untouched by repair
                assert tuple(child.bits.astype(int)) in parent_keys

    def test_total_flip_is_complement(self):
        bits = np.array([True, False, True, False])
        flipped = mutate_bits(bits, 1.0, np.random.default_rng(0))
        assert np.array_equal(flipped, ~bits)

    def test_repair_reaches_k_min(self):
        bits = np.zeros(12, dtype=bool)
        repaired = repair(bits, 4, np.random.default_rng(0))
        assert repaired.sum() == 4

    def test_repair_leaves_compliant_untouched(self):
        bits = np.ones(5, dtype=bool)
        assert np.array_equal(repair(bits, 2, np.random.default_rng(0)), bits)

    def test_offspring_respect_k_min(self):
        parents = self.make_parents()
        problem = random_problem(1, n=10, k_min=4)
        config = GAConfig(population=20, seed=1)
        children = make_offspring(parents, problem, config, np.random.default_rng(1))
        assert len(children) == 20
        assert all(c.popcount >= 4 for c in children)


class TestEvolve:
    def test_deterministic(self):
        problem = random_problem(3)
        config = GAConfig(population=20, generations=10, seed=7)
        a = evolve(problem, config)
        b = evolve(problem, config)
        assert len(a.pareto_front) == len(b.pareto_front)
        for ga, gb in zip(a.pareto_front, b.pareto_front):
            assert np.array_equal(ga.bits, gb.bits)
            assert np.array_equal(ga.objectives, gb.objectives)

    def test_too_few_patches_rejected(self):
        problem = random_problem(4, n=3, k_min=2)
        problem.k_min = 5
        with pytest.raises(DataError):
            evolve(problem, GAConfig(population=10, generations=2, seed=0))

    def test_front_mutually_nondominated(self):
        problem = random_problem(5, n=16)
        result = evolve(problem, GAConfig(population=24, generations=15, seed=5))
        front = [g.objectives for g in result.pareto_front]
        for i, a in enumerate(front):
            for j, b in enumerate(front):
                if i != j:
                    assert not dominates(a, b)

    def test_identical_patches_drive_to_k_min(self):
        # dyadic-exact norm and uncertainty so subset means are exactly equal
        z = np.tile([3.0, 0.0, 0.0], (8, 1))
        problem = SelectionProblem(z, np.full(8, 0.25), k_min=2)
        result = evolve(problem, GAConfig(population=20, generations=30, seed=2))
        assert all(g.popcount == 2 for g in result.pareto_front)
        assert all(g.objectives[0] == pytest.approx(0.0, abs=1e-9) for g in result.pareto_front)

    def test_elitism_per_objective_never_worsens(self):
        problem = random_problem(6, n=14)
        result = evolve(problem, GAConfig(population=16, generations=25, seed=3))
        best = np.array(result.per_gen_best)
        diffs = np.diff(best, axis=0)
        assert np.all(diffs >= -1e-12)

    def test_small_exhaustive_front_membership(self):
        problem = random_problem(7, n=8, k_min=2)
        config = GAConfig(population=30, generations=30, seed=11)
        result = evolve(problem, config)
        feasible = []
        for combo_size in range(2, 9):
            for combo in itertools.combinations(range(8), combo_size):
                feasible.append(eval_objectives(bits_of(combo, 8), problem))
        exhaustive = pareto_filter(np.array(feasible))
        exhaustive_set = {tuple(np.round(row, 12)) for row in exhaustive}
        for genome in result.pareto_front:
            assert tuple(np.round(genome.objectives, 12)) in exhaustive_set


class TestPickSubset:
    def genome(self, phi, bits):
        return SubsetGenome(bits=np.asarray(bits, dtype=bool), objectives=np.asarray(phi, float))

    def test_singleton_front(self):
        g = self.genome([1, 1, -2, 0], [1, 1, 0])
        assert pick_subset([g]) is g

    def test_knee_wins(self):
        front = [
            self.genome([1.0, 0.0, -2, -0.1], [1, 1, 0, 0]),
            self.genome([0.0, 1.0, -2, -0.1], [0, 1, 1, 0]),
            self.genome([0.9, 0.9, -2, -0.1], [1, 0, 1, 0]),
        ]
        assert pick_subset(front) is front[2]

    def test_tie_prefers_smaller_popcount(self):
        front = [
            self.genome([0.5, 0.5, -3, -0.1], [1, 1, 1, 0]),
            self.genome([0.5, 0.5, -3, -0.1], [1, 1, 0, 0]),
        ]
        assert pick_subset(front) is front[1]

    def test_tie_then_lexicographic(self):
        front = [
            self.genome([0.5, 0.5, -2, -0.1], [0, 1, 1, 0]),
            self.genome([0.5, 0.5, -2, -0.1], [0, 1, 0, 1]),
        ]
        assert pick_subset(front) is front[1]  # (0,1,0,1) < (0,1,1,0)

    def test_empty_front_rejected(self):
        with pytest.raises(DataError):
            pick_subset([])


class TestProblemValidation:
    def test_k_min_below_two_rejected(self):
        with pytest.raises(UsageError):
            SelectionProblem(np.zeros((4, 2)), np.zeros(4), k_min=1)

    def test_misaligned_arrays_rejected(self):
        with pytest.raises(DataError):
            SelectionProblem(np.zeros((4, 2)), np.zeros(3))


class TestHypervolumeOracle:
    def test_unit_square(self):
        pts = np.array([[1.0, 1.0]])
        assert hypervolume(pts, np.array([0.0, 0.0])) == pytest.approx(1.0)

    def test_staircase(self):
        pts = np.array([[3.0, 1.0], [2.0, 2.0], [1.0, 3.0]])
        assert hypervolume(pts, np.array([0.0, 0.0])) == pytest.approx(6.0)

    def test_dominated_point_adds_nothing(self):
        pts = np.array([[2.0, 2.0, 2.0], [1.0, 1.0, 1.0]])
        assert hypervolume(pts, np.zeros(3)) == pytest.approx(8.0)

    def test_4d_box_union_vs_monte_carlo(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0.2, 1.0, size=(6, 4))
        ref = np.zeros(4)
        hv = hypervolume(pts, ref)
        samples = rng.uniform(0.0, 1.0, size=(200_000, 4))
        inside = np.any(np.all(samples[:, None, :] <= pts[None, :, :], axis=2), axis=1)
        assert hv == pytest.approx(inside.mean(), abs=0.01)
