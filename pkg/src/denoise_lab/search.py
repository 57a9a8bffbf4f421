"""Regularized (aging) evolution over architecture genomes.

Each cycle samples S candidates from the population without replacement,
mutates the fittest one, evaluates the child, appends it and retires the
oldest member regardless of its fitness.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import quality
from . import signal as sig
from .neuralnet import build_from_genome
from .neuralnet.genome import BOUNDS, GENE_NAMES, SLOTS, Genome
from .neuralnet.optim import OptimizerError
from .neuralnet.train import TrainingDiverged, denoise, train_denoiser

log = logging.getLogger(__name__)

FAILED = -math.inf


class SearchError(RuntimeError):
    pass


class EvolutionAborted(SearchError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class GeneSpace:
    """Named genes with finite value sets; ``decode`` turns a gene tuple into an individual."""
    names: tuple
    values: tuple
    decode: object = None

    def __post_init__(self):
        if len(self.names) != len(self.values) or any(len(v) == 0 for v in self.values):
            raise SearchError("every gene needs at least one value")

    def individual(self, genes):
        return self.decode(genes) if self.decode else tuple(genes)

    def contains(self, genes) -> bool:
        return len(genes) == len(self.values) and all(g in v for g, v in zip(genes, self.values))

    def random(self, rng) -> tuple:
        return tuple(v[int(rng.integers(len(v)))] for v in self.values)

    def mutate(self, genes, rng) -> tuple:
        """Resample one uniformly chosen mutable gene to a different allowed value."""
        mutable = [i for i, v in enumerate(self.values) if len(v) > 1]
        if not mutable:
            raise SearchError("no gene has more than one value")
        i = mutable[int(rng.integers(len(mutable)))]
        others = [v for v in self.values[i] if v != genes[i]]
        child = list(genes)
        child[i] = others[int(rng.integers(len(others)))]
        return tuple(child)

    def enumerate(self):
        return itertools.product(*self.values)

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.values)


GENOME_SPACE = GeneSpace(
    names=tuple(f"{slot}.{g}" for slot in SLOTS for g in GENE_NAMES),
    values=tuple(BOUNDS[g] for _ in SLOTS for g in GENE_NAMES),
    decode=Genome.from_genes,
)


def random_genome(seed: int) -> Genome:
    return Genome.from_genes(GENOME_SPACE.random(np.random.default_rng(seed))).validate()


def mutate(genome: Genome, seed: int) -> Genome:
    genes = GENOME_SPACE.mutate(genome.to_genes(), np.random.default_rng(seed))
    return Genome.from_genes(genes).validate()


# --------------------------------------------------------------------------
# evolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvolutionConfig:
    population: int = 16
    sample: int = 4
    cycles: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise SearchError("population must be at least 2")
        if not 1 <= self.sample <= self.population:
            raise SearchError("tournament sample must lie in [1, population]")
        if self.cycles < 0:
            raise SearchError("cycles must be nonnegative")


@dataclass
class Candidate:
    genes: tuple
    fitness: float
    age: int  # birth index
    seed: int
    parent: int | None = None
    status: str = "ok"  # "ok" | "diverged" | "failed"

    def to_dict(self, space: GeneSpace | None = None) -> dict:
        d = {"age": self.age, "seed": self.seed, "parent": self.parent, "status": self.status,
             "genes": list(self.genes),
             "fitness": self.fitness if math.isfinite(self.fitness) else None}
        if space is not None and space.decode == Genome.from_genes:
            d["genome"] = Genome.from_genes(self.genes).to_dict()
        return d


@dataclass
class EvolutionResult:
    best: Candidate
    history: list
    population_sizes: list = field(default_factory=list)
    best_so_far: list = field(default_factory=list)


def candidate_seed(seed: int, age: int) -> int:
    return int(np.random.SeedSequence([seed, age]).generate_state(1)[0] & 0x7FFFFFFF)


def _evaluate(args):
    fitness_fn, space, genes, cseed = args
    try:
        value = float(fitness_fn(space.individual(genes), cseed))
    except Exception as exc:  # noqa: BLE001 - any evaluation failure is recorded, not fatal
        log.warning("fitness evaluation failed: %s", exc)
        return FAILED, "failed"
    if math.isnan(value):
        return FAILED, "failed"
    return value, ("ok" if math.isfinite(value) else "diverged")


def evolve(config: EvolutionConfig, fitness_fn, space: GeneSpace = GENOME_SPACE, workers: int = 1,
           on_candidate=None) -> EvolutionResult:
    """Run regularized evolution; ``fitness_fn(individual, seed) -> float``.

    The initial population is one cycle of P evaluations; each later cycle
    evaluates one child. More than half of a cycle's evaluations raising
    aborts the search with the history so far attached to the exception.
    """
    rng = np.random.default_rng(config.seed)
    history: list[Candidate] = []
    population: deque[Candidate] = deque()
    sizes, best_curve = [], []

    def record(cands):
        for c in cands:
            history.append(c)
            if on_candidate:
                on_candidate(c)
        failed = sum(c.status == "failed" for c in cands)
        if failed * 2 > len(cands):
            raise EvolutionAborted(f"{failed} of {len(cands)} evaluations failed", list(history))

    init = [space.random(rng) for _ in range(config.population)]
    jobs = [(fitness_fn, space, g, candidate_seed(config.seed, i)) for i, g in enumerate(init)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_evaluate, jobs))
    else:
        results = [_evaluate(j) for j in jobs]
    cands = [Candidate(g, f, i, j[3], None, st) for i, (g, j, (f, st)) in enumerate(zip(init, jobs, results))]
    population.extend(cands)
    record(cands)

    for cycle in range(config.cycles):
        idx = rng.choice(len(population), config.sample, replace=False)
        sample = [population[i] for i in idx]
        parent = max(sample, key=lambda c: (c.fitness, -c.age))
        age = len(history)
        genes = space.mutate(parent.genes, rng)
        cseed = candidate_seed(config.seed, age)
        f, status = _evaluate((fitness_fn, space, genes, cseed))
        child = Candidate(genes, f, age, cseed, parent.age, status)
        population.append(child)
        population.popleft()  # the oldest, whatever its fitness
        sizes.append(len(population))
        record([child])
        best_curve.append(max(c.fitness for c in history))

    best = max(history, key=lambda c: (c.fitness, -c.age))
    return EvolutionResult(best, history, sizes, best_curve)


# --------------------------------------------------------------------------
# toy space with an analytic fitness
# --------------------------------------------------------------------------

TOY_SPACE = GeneSpace(names=("a", "b"), values=(tuple(range(10)), tuple(range(10))))


def toy_fitness(genes, seed=None) -> float:
    """Anisotropic bowl with a rippled surface; the unique maximum is at (7, 3)."""
    a, b = genes
    return -((a - 7) ** 2) - 2.0 * (b - 3) ** 2 + 0.5 * math.cos(a * b)


def brute_force_optimum(space: GeneSpace, fn):
    return max(space.enumerate(), key=lambda g: fn(g, None))


# --------------------------------------------------------------------------
# delta-MOS fitness for denoising genomes
# --------------------------------------------------------------------------


def training_examples(pairs):
    """(clean, mixture) waveform pairs -> (mixture STFT, target cIRM) pairs."""
    out = []
    for clean, mix in pairs:
        X = sig.stft(mix)
        out.append((X, sig.ideal_complex_mask(sig.stft(clean), X)))
    return out


def oracle_denoiser(clean, mix):
    X = sig.stft(mix)
    y = sig.istft(sig.apply_mask(X, sig.ideal_complex_mask(sig.stft(clean), X))).samples
    return mix.with_samples(np.pad(y, (0, len(mix) - len(y))))


@dataclass
class FitnessSetup:
    eval_set: list
    estimator: object
    train_set: list = field(default_factory=list)
    budget: int = 200
    batch_size: int = 4
    window: int = 64
    lr: float = 1e-4
    loss_domain: str = "mask"
    zero_final: bool = False
    dtype: str = "float32"

    def __call__(self, genome, seed):
        return fitness(genome, self.eval_set, self.estimator, self.budget, seed, self.train_set,
                       batch_size=self.batch_size, window=self.window, lr=self.lr,
                       loss_domain=self.loss_domain, zero_final=self.zero_final, dtype=self.dtype)


def _scored_delta(estimator, clean, mix, processed) -> float:
    """delta-MOS where an output the estimator cannot score (e.g. silence) gets the floor MOS."""
    base = quality.predict_pmos(estimator, clean, mix)
    try:
        out = quality.predict_pmos(estimator, clean, processed)
    except (quality.QualityError, ArithmeticError) as exc:
        log.info("processed output unscorable, using MOS floor: %s", exc)
        out = quality.MOS_MIN
    return out - base


def fitness(genome, eval_set, estimator, budget: int = 200, seed: int = 0, train_set=None,
            denoiser=None, batch_size: int = 4, window: int = 64, lr: float = 1e-4,
            loss_domain: str = "mask", zero_final: bool = False, dtype: str = "float32",
            return_model: bool = False):
    """Mean delta-MOS over ``eval_set`` after training ``genome`` for ``budget`` steps.

    ``denoiser(clean, mix) -> processed`` replaces the trained network (for
    upper-bound probes). Divergence gives ``-inf``.
    """
    if not eval_set:
        raise SearchError("empty evaluation set")
    model = None
    if denoiser is None:
        model = build_from_genome(genome, seed=seed, dtype=dtype, zero_final=zero_final)
        if budget > 0:
            if not train_set:
                raise SearchError("training budget given without a training set")
            try:
                train_denoiser(model, train_set, budget, batch_size=batch_size, seed=seed, lr=lr,
                               window=window, loss_domain=loss_domain)
            except (TrainingDiverged, OptimizerError, FloatingPointError) as exc:
                log.warning("candidate diverged: %s", exc)
                return (FAILED, model) if return_model else FAILED

        def denoiser(clean, mix):
            return denoise(model, mix)

    deltas = [_scored_delta(estimator, clean, mix, denoiser(clean, mix)) for clean, mix in eval_set]
    value = float(np.mean(deltas))
    if not math.isfinite(value):
        value = FAILED
    return (value, model) if return_model else value


def history_jsonl(history, space: GeneSpace = GENOME_SPACE) -> str:
    return "".join(json.dumps(c.to_dict(space), sort_keys=True) + "\n" for c in history)
