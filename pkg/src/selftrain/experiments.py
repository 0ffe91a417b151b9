"""Orchestration used by the CLI: dataset loading, training runs, searches
and the add-on ablation."""
from __future__ import annotations

import logging
import os
from dataclasses import replace

from .config import AblationPlan, ExperimentConfig, with_addons
from .engine import Engine, RunResult, write_run
from .report import emit_stage_curve, write_ablation_csv
from .search import SearchConfig, SearchResult, run_search
from .synthgen import make_split, read_dataset

log = logging.getLogger(__name__)


def load_split(cfg: ExperimentConfig, data_dir=None):
    """Stored dataset if ``data_dir`` is given, otherwise generate one."""
    if data_dir:
        return read_dataset(data_dir)
    return make_split(cfg.dataset)


def make_engine(cfg: ExperimentConfig, split, stage_cfg=None):
    return Engine(split, stage_cfg or cfg.stage, cfg.master_seed)


def run_training(cfg: ExperimentConfig, strategy, split, out_dir, alpha=None, path=None):
    """One ``train`` invocation. Writes the run directory for the selected
    trajectory (and ``search.json`` for gist/rist). Returns the RunResult."""
    engine = make_engine(cfg, split)
    stages = cfg.stage.num_stages
    search = None
    if strategy == "supervised":
        result = engine.run_path("")
    elif path:
        result = engine.run_path(path)
    elif strategy == "fist":
        a = cfg.search.fist_alpha if alpha is None else alpha
        result = engine.run_path([a] * stages)
    elif strategy in ("gist", "rist"):
        scfg = replace(cfg.search, strategy=strategy, num_stages=stages, master_seed=cfg.master_seed)
        search = run_search(scfg, engine, jobs=cfg.jobs)
        result = search.winner
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    write_run(result, out_dir, cfg.semantic_dict(), cfg.config_hash(), cfg.master_seed)
    if search is not None:
        search.config = cfg.semantic_dict()
        search.write(out_dir)
    return result


def run_search_cmd(cfg: ExperimentConfig, split, out_dir) -> SearchResult:
    engine = make_engine(cfg, split)
    scfg = replace(cfg.search, num_stages=cfg.stage.num_stages, master_seed=cfg.master_seed)
    res = run_search(scfg, engine, jobs=cfg.jobs)
    res.config = cfg.semantic_dict()
    res.write(out_dir)
    echo, h = cfg.semantic_dict(), cfg.config_hash()
    write_run(res.winner, os.path.join(out_dir, "winner"), echo, h, cfg.master_seed)
    # every candidate keeps its own run directory
    for i, cand in enumerate(res.candidates):
        write_run(cand, os.path.join(out_dir, "candidates", f"{i:02d}_{cand.path}"), echo, h, cfg.master_seed)
    return res


def run_ablation(plan: AblationPlan, cfg: ExperimentConfig, split, out_dir=None):
    """RIST and GIST under each add-on set with one shared master seed.

    Returns ``(table, details)`` where ``table`` rows are
    ``(label, rist final val mIoU, gist final val mIoU)`` in plan order and
    ``details`` maps label -> {"rist": SearchResult, "gist": SearchResult}.
    """
    table, details = [], {}
    first = None
    for label, addons in plan.rows:
        stage_cfg = with_addons(cfg.stage, addons)
        row = {}
        for strategy in ("rist", "gist"):
            engine = make_engine(cfg, split, stage_cfg)
            # the add-ons only act after stage 0, so every row shares it
            if first is None:
                first = engine
            else:
                engine.share_stage0(first)
            scfg = replace(
                cfg.search,
                strategy=strategy,
                num_stages=stage_cfg.num_stages,
                master_seed=cfg.master_seed,
            )
            row[strategy] = run_search(scfg, engine, jobs=cfg.jobs)
        log.info(
            "%s: rist %.4f gist %.4f",
            label,
            row["rist"].winner.final_val,
            row["gist"].winner.final_val,
        )
        table.append((label, row["rist"].winner.final_val, row["gist"].winner.final_val))
        details[label] = row
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_ablation_csv(table, os.path.join(out_dir, "ablation.csv"))
    return table, details


def curve_series(named_results):
    """``{label: RunResult}`` -> ``{label: records}`` for :func:`emit_stage_curve`."""
    return {label: r.records for label, r in named_results.items()}


def emit_runs(named_results: dict[str, RunResult], out_dir):
    return emit_stage_curve(curve_series(named_results), out_dir)
