"""Alpha-path strategies: FIST, RIST (random paths, best-of-N), GIST (beam
search) and an exhaustive oracle for small stage counts.

Engines only need two methods: ``stage0()`` returning a state and
``expand(state, alpha)`` returning the next state. A state exposes
``alphas``, ``records`` (each with ``devel_miou``/``val_miou``), ``stage``
and ``score``. :class:`selftrain.engine.Engine` is the real one; tests use
table-driven stubs.
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field

from .engine import RunResult, alphas_to_string
from .errors import BadPathString, FilterTooStrict, SearchSpaceTooLarge, SelfTrainError
from .numkit import RngStream, stream_key, uniform

log = logging.getLogger(__name__)

_PATH_RE = re.compile(r"^[LP]+$")


@dataclass(frozen=True)
class AlphaPath:
    """Binary alpha choice per refinement stage: 1 = human labels (L),
    0 = pseudo-labels (P). The leftmost character is stage 1."""

    choices: tuple

    def __post_init__(self):
        if any(c not in (0, 1) for c in self.choices):
            raise BadPathString(f"choices must be 0/1, got {self.choices}")

    @classmethod
    def decode(cls, text: str) -> "AlphaPath":
        if not isinstance(text, str) or not _PATH_RE.match(text):
            raise BadPathString(f"not an L/P path string: {text!r}")
        return cls(tuple(1 if ch == "L" else 0 for ch in text))

    def encode(self) -> str:
        return "".join("L" if c else "P" for c in self.choices)

    def __str__(self):
        return self.encode()

    def __len__(self):
        return len(self.choices)


def decode_path(text):
    return list(AlphaPath.decode(text).choices)


def encode_path(choices):
    return AlphaPath(tuple(int(c) for c in choices)).encode()


def longest_run(choices):
    best = cur = 0
    prev = None
    for c in choices:
        cur = cur + 1 if c == prev else 1
        prev = c
        best = max(best, cur)
    return best


def is_degenerate(path, max_run_length=4):
    """True when some stretch of identical choices exceeds ``max_run_length``."""
    if isinstance(path, str):
        path = AlphaPath.decode(path)
    choices = path.choices if isinstance(path, AlphaPath) else tuple(path)
    return longest_run(choices) > max_run_length


def sample_rist_path(num_stages, rng: RngStream, max_run_length=None, max_attempts=1000):
    """Fair coin per stage; whole-path rejection of degenerate paths.

    ``max_run_length=None`` (or >= ``num_stages``) disables the filter.
    """
    filtering = max_run_length is not None and max_run_length < num_stages
    for _ in range(max_attempts):
        choices = tuple(int(uniform(rng) > 0.5) for _ in range(num_stages))
        if not filtering or not is_degenerate(choices, max_run_length):
            return AlphaPath(choices)
    raise FilterTooStrict(
        f"no path of length {num_stages} with runs <= {max_run_length} in {max_attempts} draws"
    )


@dataclass
class SearchConfig:
    strategy: str = "rist"
    num_stages: int = 9
    fist_alpha: float = 0.75
    rist_runs: int = 5
    max_run_length: int = 4
    beam_size: int = 1
    master_seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("fist", "rist", "gist", "exhaustive"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.beam_size < 1 or self.rist_runs < 1:
            raise ValueError("beam_size and rist_runs must be >= 1")
        if self.num_stages >= 1 and not 1 <= self.max_run_length <= self.num_stages:
            raise ValueError("max_run_length must lie in [1, num_stages]")
        if not 0.0 <= self.fist_alpha <= 1.0:
            raise ValueError("fist_alpha must lie in [0, 1]")


@dataclass
class SearchResult:
    strategy: str
    winner: RunResult
    candidates: list = field(default_factory=list)
    stage_trainings: int = 0
    per_stage_cost: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    config: dict | None = None

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "config": self.config,
            "candidates": [c.summary() for c in self.candidates],
            "winner": self.winner.summary(),
            "stage_trainings": self.stage_trainings,
            "per_stage_cost": self.per_stage_cost,
            "failures": self.failures,
        }

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "search.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _result_from_state(state):
    chain = []
    node = state
    while node is not None:
        chain.append(node)
        node = getattr(node, "parent", None)
    chain.reverse()
    return RunResult(alphas_to_string(state.alphas), list(state.records), chain)


def node_key(state):
    """Sort key: best development score, then earliest stage, then path."""
    return (-state.score, state.stage, alphas_to_string(state.alphas))


def run_path_on(engine, path):
    """Execute ``path`` with any engine exposing ``stage0``/``expand``."""
    if hasattr(engine, "run_path"):
        return engine.run_path(path)
    state = engine.stage0()
    states = [state]
    for c in AlphaPath.decode(path).choices if isinstance(path, str) else path:
        state = engine.expand(state, c)
        states.append(state)
    return RunResult(alphas_to_string(state.alphas), list(state.records), states)


def run_fist(cfg: SearchConfig, engine) -> SearchResult:
    result = run_path_on(engine, [cfg.fist_alpha] * cfg.num_stages)
    return SearchResult("fist", result, [result], cfg.num_stages, [1] * cfg.num_stages)


def run_rist(cfg: SearchConfig, engine, jobs=1) -> SearchResult:
    """Best-of-N random paths, each sampled from its own stream.

    Winner is the run with the highest development mIoU at its best stage;
    ties go to the lexicographically smallest path string. A failing run is
    recorded and skipped; the search fails only if every run fails.
    """
    paths = []
    for n in range(cfg.rist_runs):
        rng = RngStream(cfg.master_seed, stream_key("rist", n))
        paths.append(sample_rist_path(cfg.num_stages, rng, cfg.max_run_length).encode())
    results, failures = [], []
    outcomes = _map_runs(engine, paths, jobs)
    for path, out in zip(paths, outcomes):
        if isinstance(out, BaseException):
            log.warning("RIST run %s failed: %s", path, out)
            failures.append({"path": path, "error": repr(out)})
        else:
            results.append(out)
    if not results:
        raise SelfTrainError("every RIST run failed")
    winner = min(results, key=lambda r: (-r.best_devel, r.path))
    return SearchResult(
        "rist",
        winner,
        results,
        cfg.num_stages * len(results),
        [len(results)] * cfg.num_stages,
        failures,
    )


def _map_runs(engine, paths, jobs):
    def one(p):
        try:
            return run_path_on(engine, p)
        except SelfTrainError as exc:
            return exc

    if jobs and jobs > 1 and len(paths) > 1:
        from joblib import Parallel, delayed

        # warm the stage-0 cache before the engine is copied into workers
        engine.stage0()
        return Parallel(n_jobs=jobs)(delayed(one)(p) for p in paths)
    return [one(p) for p in paths]


def run_gist(cfg: SearchConfig, engine) -> SearchResult:
    """Beam search over alpha paths.

    Every beam member is expanded with alpha 0 and alpha 1, each child is
    scored on the development set, and the best ``beam_size`` children
    survive. The answer is the best-scoring node seen at any stage
    (stage 0 included).
    """
    root = engine.stage0()
    beam = [root]
    best = root
    per_stage = []
    candidates = []
    for _s in range(cfg.num_stages):
        children = [engine.expand(parent, alpha) for parent in beam for alpha in (0, 1)]
        per_stage.append(len(children))
        children.sort(key=lambda st: (-st.score, alphas_to_string(st.alphas)))
        beam = children[: cfg.beam_size]
        candidates.extend(children)
        for st in children:
            if node_key(st) < node_key(best):
                best = st
    winner = _result_from_state(best)
    cand_results = [_result_from_state(st) for st in candidates if st.stage == cfg.num_stages]
    return SearchResult("gist", winner, cand_results, sum(per_stage), per_stage)


def exhaustive_search(num_stages, engine, max_stages=6) -> SearchResult:
    """Evaluate every one of the 2**S paths (tree traversal sharing prefixes).

    The winner is selected with the same node ordering as GIST, so a beam
    wide enough to hold every node reproduces it exactly.
    """
    if num_stages > max_stages:
        raise SearchSpaceTooLarge(f"S={num_stages} exceeds the cap of {max_stages}")
    root = engine.stage0()
    frontier = [root]
    best = root
    trainings = 0
    for _s in range(num_stages):
        nxt = []
        for parent in frontier:
            for alpha in (0, 1):
                child = engine.expand(parent, alpha)
                trainings += 1
                nxt.append(child)
                if node_key(child) < node_key(best):
                    best = child
        frontier = nxt
    full = sorted((_result_from_state(st) for st in frontier), key=lambda r: r.path)
    res = SearchResult("exhaustive", _result_from_state(best), full, trainings)
    res.table = {r.path: [rec.devel_miou for rec in r.records] for r in full}
    return res


def run_search(cfg: SearchConfig, engine, jobs=1) -> SearchResult:
    if cfg.strategy == "fist":
        res = run_fist(cfg, engine)
    elif cfg.strategy == "rist":
        res = run_rist(cfg, engine, jobs=jobs)
    elif cfg.strategy == "gist":
        res = run_gist(cfg, engine)
    else:
        res = exhaustive_search(cfg.num_stages, engine)
    return res
