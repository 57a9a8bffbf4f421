"""Genome sampling/mutation, aging evolution and the delta-MOS fitness."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denoise_lab import search as S
from denoise_lab.neuralnet import build_from_genome, minimal_genome
from denoise_lab.neuralnet.genome import BOUNDS, Genome
from denoise_lab.synth import noisy_pairs


class TestGenomeSampling:
    def test_random_deterministic(self):
        assert S.random_genome(3) == S.random_genome(3)
        assert S.random_genome(3) != S.random_genome(4)

    def test_kernel_coverage(self):
        seen = set()
        for seed in range(1000):
            g = S.random_genome(seed)
            seen |= {b.kernel[0] for b in g.blocks}
        assert seen == set(BOUNDS["kernel"])

    def test_samples_build(self):
        for seed in range(20):
            build_from_genome(S.random_genome(seed), seed=seed, dtype="float32")

    @given(st.integers(0, 2 ** 31 - 1), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_mutation_changes_exactly_one_gene(self, gseed, mseed):
        g = S.random_genome(gseed)
        child = S.mutate(g, mseed)
        diff = [a != b for a, b in zip(g.to_genes(), child.to_genes())]
        assert sum(diff) == 1
        assert S.mutate(g, mseed) == child

    def test_repeated_mutation_stays_in_bounds(self):
        rng = np.random.default_rng(0)
        genes = S.GENOME_SPACE.random(rng)
        for _ in range(10_000):
            genes = S.GENOME_SPACE.mutate(genes, rng)
            assert S.GENOME_SPACE.contains(genes)
        Genome.from_genes(genes).validate()

    def test_single_valued_gene_never_chosen(self):
        space = S.GeneSpace(("fixed", "free"), ((1,), (0, 1, 2)))
        rng = np.random.default_rng(0)
        for _ in range(200):
            child = space.mutate((1, 0), rng)
            assert child[0] == 1 and child[1] != 0
        with pytest.raises(S.SearchError):
            S.GeneSpace(("x",), ((1,),)).mutate((1,), rng)


class TestEvolve:
    def test_toy_optimum_and_invariants(self):
        opt = S.brute_force_optimum(S.TOY_SPACE, S.toy_fitness)
        hits = 0
        for seed in range(30):
            r = S.evolve(S.EvolutionConfig(8, 4, 200, seed), S.toy_fitness, S.TOY_SPACE)
            assert r.population_sizes == [8] * 200
            assert len(r.history) == 208
            assert [c.age for c in r.history] == list(range(208))
            assert all(a <= b for a, b in zip(r.best_so_far, r.best_so_far[1:]))
            hits += r.best.genes == opt
        assert hits >= 27

    def test_beats_random_search_on_larger_space(self):
        space = S.GeneSpace(("a", "b"), (tuple(range(16)), tuple(range(16))))

        def f(g, seed=None):
            return -((g[0] - 11) ** 2) - 2.0 * (g[1] - 4) ** 2 + 0.5 * math.cos(g[0] * g[1])

        opt = S.brute_force_optimum(space, f)
        rate = np.mean([S.evolve(S.EvolutionConfig(8, 4, 200, s), f, space).best.genes == opt for s in range(100)])
        random_rate = 1 - (1 - 1 / space.size) ** 208
        assert rate > random_rate + 0.15

    def test_oldest_removed(self):
        """Track the population externally: the retired member is always the oldest."""
        alive = []

        def watch(c):
            alive.append(c.age)
            if len(alive) > 6:
                assert min(alive) == alive.pop(0)

        S.evolve(S.EvolutionConfig(6, 3, 50, 1), S.toy_fitness, S.TOY_SPACE, on_candidate=watch)

    def test_aging_ignores_fitness(self):
        # the first-born is the fittest possible yet is still retired after P cycles
        space = S.GeneSpace(("a",), (tuple(range(50)),))
        r = S.evolve(S.EvolutionConfig(4, 4, 20, 0), lambda g, s: -abs(g[0] - 7), space)
        assert r.best.fitness == 0 or r.best.genes != (7,)
        assert r.population_sizes == [4] * 20

    def test_reproducible(self):
        a = S.evolve(S.EvolutionConfig(8, 3, 40, 5), S.toy_fitness, S.TOY_SPACE)
        b = S.evolve(S.EvolutionConfig(8, 3, 40, 5), S.toy_fitness, S.TOY_SPACE)
        assert [c.to_dict() for c in a.history] == [c.to_dict() for c in b.history]

    def test_parallel_init_matches_serial(self):
        a = S.evolve(S.EvolutionConfig(4, 2, 5, 2), S.toy_fitness, S.TOY_SPACE)
        b = S.evolve(S.EvolutionConfig(4, 2, 5, 2), S.toy_fitness, S.TOY_SPACE, workers=2)
        assert [c.to_dict() for c in a.history] == [c.to_dict() for c in b.history]

    def test_history_length_zero_cycles(self):
        r = S.evolve(S.EvolutionConfig(5, 2, 0, 0), S.toy_fitness, S.TOY_SPACE)
        assert len(r.history) == 5

    @pytest.mark.parametrize("p,s", [(1, 1), (4, 0), (4, 5)])
    def test_bad_config(self, p, s):
        with pytest.raises(S.SearchError):
            S.EvolutionConfig(p, s, 10, 0)

    def test_abort_keeps_history(self):
        def flaky(g, seed):
            if g[0] % 2:
                raise RuntimeError("boom")
            return 0.0

        with pytest.raises(S.EvolutionAborted) as info:
            S.evolve(S.EvolutionConfig(8, 2, 100, 0), flaky, S.TOY_SPACE)
        assert len(info.value.history) >= 8
        assert any(c.status == "failed" for c in info.value.history)

    def test_diverged_is_sentinel_not_failure(self):
        r = S.evolve(S.EvolutionConfig(4, 2, 10, 0), lambda g, s: -math.inf if g[0] < 5 else 1.0, S.TOY_SPACE)
        assert all(c.status in ("ok", "diverged") for c in r.history)
        assert r.best.fitness == 1.0

    def test_history_jsonl(self):
        r = S.evolve(S.EvolutionConfig(3, 2, 2, 0), lambda g, s: -math.inf, S.GENOME_SPACE)
        rows = [json.loads(line) for line in S.history_jsonl(r.history).splitlines()]
        assert len(rows) == 5
        assert rows[0]["fitness"] is None and rows[0]["status"] == "diverged"
        assert Genome.from_dict(rows[0]["genome"]).to_genes() == tuple(rows[0]["genes"])


@pytest.fixture(scope="module")
def fitness_data():
    from denoise_lab import metrics as M
    from denoise_lab import quality as Q

    pairs = noisy_pairs(60, 5, duration=1.0)
    feats = [M.metric_vector(c, m) for c, m, _ in pairs]
    est = Q.train_mos_mlp(feats, [float(np.clip(1 + 4 * f.stoi, 1, 5)) for f in feats], seed=0)
    eval_set = [(c, m) for c, m, _ in noisy_pairs(8, 6, (-5, 5), duration=1.0)]
    train_set = S.training_examples([(c, m) for c, m, _ in noisy_pairs(4, 7, duration=1.0)])
    return est, eval_set, train_set


class TestFitness:
    def test_zero_mask_untrained_not_positive(self, fitness_data):
        est, eval_set, _ = fitness_data
        assert S.fitness(minimal_genome(4), eval_set, est, budget=0, zero_final=True) <= 0

    def test_oracle_positive(self, fitness_data):
        est, eval_set, _ = fitness_data
        assert S.fitness(None, eval_set, est, denoiser=S.oracle_denoiser) > 0

    def test_deterministic_with_training(self, fitness_data):
        est, eval_set, train_set = fitness_data
        a = S.fitness(minimal_genome(4), eval_set[:2], est, budget=3, seed=1, train_set=train_set)
        b = S.fitness(minimal_genome(4), eval_set[:2], est, budget=3, seed=1, train_set=train_set)
        assert a == b and math.isfinite(a)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_sentinel(self, fitness_data):
        est, eval_set, train_set = fitness_data
        assert S.fitness(minimal_genome(4), eval_set[:1], est, budget=3, train_set=train_set, lr=1e30) == -math.inf

    def test_errors(self, fitness_data):
        est, eval_set, _ = fitness_data
        with pytest.raises(S.SearchError):
            S.fitness(minimal_genome(4), [], est)
        with pytest.raises(S.SearchError):
            S.fitness(minimal_genome(4), eval_set, est, budget=5)

    def test_setup_callable_in_evolve(self, fitness_data):
        est, eval_set, train_set = fitness_data
        setup = S.FitnessSetup(eval_set[:1], est, train_set, budget=1)
        space = S.GeneSpace(S.GENOME_SPACE.names, tuple((v[0],) if i % 5 != 3 else v
                                                         for i, v in enumerate(S.GENOME_SPACE.values)),
                            Genome.from_genes)
        r = S.evolve(S.EvolutionConfig(2, 1, 1, 0), setup, space)
        assert len(r.history) == 3 and all(math.isfinite(c.fitness) for c in r.history)
