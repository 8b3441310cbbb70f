"""Retrieval/VQA metrics, attack-success rates, and the multi-seed
experiment and sweep runners that produce the CSV/JSON reports.

Dataset metrics are means of per-query values; ASR* is the relative drop
(clean - attacked) / clean of a metric under attack.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attack import AttackConfig, Perturbation, apply_perturbation, generator_noise, \
    hv_attack_traced, stage1_attack, stage2_attack, zero_perturbation
from .corpus import Corpus, TrainParams, train_encoder
from .generation import Answer, attack_query, generate_answer
from .models import DualEncoder, multimodal_embed
from .numerics import SeededRng
from .retrieval import KnowledgeBase, build_kb, relevance, retrieve_topk

DETERMINISTIC_ENV = "HV_ATTACK_DETERMINISTIC"

METRIC_ORDER = ("R@5", "P@5", "R@10", "P@10", "EM")


def recall_at_k(relevance_flags) -> float:
    """Per-query Recall@K: 1 if any of the K flags is relevant, else 0."""
    flags = list(relevance_flags)
    if not flags:
        raise ValueError("recall_at_k needs at least one flag")
    _check_flags(flags)
    return float(min(sum(flags), 1))


def precision_at_k(relevance_flags) -> float:
    """Per-query Precision@K: fraction of the K flags that are relevant."""
    flags = list(relevance_flags)
    if not flags:
        raise ValueError("precision_at_k needs at least one flag")
    _check_flags(flags)
    return float(sum(flags)) / len(flags)


def _check_flags(flags):
    if any(f not in (0, 1) for f in flags):
        raise ValueError("relevance flags must be 0 or 1")


def exact_match(pred: Answer, gold) -> int:
    gold = set(gold)
    if not gold:
        raise ValueError("gold answer set must be nonempty")
    return 1 if pred.token in gold else 0


def asr_star(s_clean: float, s_adv: float) -> float:
    """Relative degradation (s_clean - s_adv) / s_clean of a metric."""
    if s_clean <= 0:
        raise ValueError("ASR* undefined for a non-positive clean score")
    return (s_clean - s_adv) / s_clean


def _safe_asr(clean: float, attacked: float) -> float:
    return asr_star(clean, attacked) if clean > 0 else float("nan")


@dataclass(frozen=True)
class MetricValue:
    clean: float
    attacked: float
    asr_star: float

    def __post_init__(self):
        for name in ("clean", "attacked"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} metric {v} outside [0, 1]")
        if not math.isnan(self.asr_star) and self.asr_star > 1.0:
            raise ValueError(f"asr_star {self.asr_star} > 1")


@dataclass(frozen=True)
class MetricReport:
    regime: str
    method: str
    seed: int
    metrics: dict  # metric name -> MetricValue


@dataclass(frozen=True)
class SweepSpec:
    param: str  # "steps" | "epsilon"
    grid: tuple
    base: AttackConfig = AttackConfig()
    method: str = "hv"

    def __post_init__(self):
        if self.param not in ("steps", "epsilon"):
            raise ValueError("sweep param must be 'steps' or 'epsilon'")
        grid = tuple(self.grid)
        if not grid:
            raise ValueError("sweep grid must be nonempty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("sweep grid must be strictly ascending")
        object.__setattr__(self, "grid", grid)


@dataclass(frozen=True)
class SweepPoint:
    param: str
    value: float
    regime: str
    seed: int
    metrics: dict
    final_loss_mean: float


# ---------------------------------------------------------------------------
# Per-query evaluation plumbing.


@dataclass(frozen=True)
class _QueryOutcome:
    flags: tuple   # relevance flags at k_max, prefix-sliceable
    em: int


def _evaluate_queries(enc: DualEncoder, kb: KnowledgeBase, corpus: Corpus,
                      deltas: dict | None, gen_noises: dict | None,
                      k_list, k_gen: int, pixel_clip: bool) -> list[_QueryOutcome]:
    by_id = {e.entry_id: e for e in kb.entries}
    k_max = max(max(k_list), k_gen)
    outcomes = []
    for q in corpus.queries:
        r_img = q.image if deltas is None else apply_perturbation(q.image, deltas[q.query_id],
                                                                  pixel_clip)
        g_img = q.image if gen_noises is None else apply_perturbation(q.image,
                                                                      gen_noises[q.query_id],
                                                                      pixel_clip)
        result = retrieve_topk(kb, multimodal_embed(enc, r_img, q.text), k_max,
                               query_id=q.query_id)
        entries = [by_id[eid] for eid in result.entry_ids()]
        flags = tuple(relevance(q, e) for e in entries)
        answer = generate_answer(enc, q.text, g_img, entries[:k_gen])
        outcomes.append(_QueryOutcome(flags, exact_match(answer, q.gold_answers)))
    return outcomes


def _aggregate(outcomes: list, k_list, k_gen: int) -> dict:
    values = {}
    for k in k_list:
        values[f"R@{k}"] = float(np.mean([recall_at_k(o.flags[:k]) for o in outcomes]))
        values[f"P@{k}"] = float(np.mean([precision_at_k(o.flags[:k]) for o in outcomes]))
    values["EM"] = float(np.mean([o.em for o in outcomes]))
    return values


def _resolve_jobs(jobs: int) -> int:
    if os.environ.get(DETERMINISTIC_ENV) == "1":
        return 1
    return max(1, int(jobs))


_WORKER = {}


def _init_worker(enc, kb, cfg, method, seed, stream):
    _WORKER.update(enc=enc, kb=kb, cfg=cfg, method=method,
                   rng=SeededRng(seed, stream))


def _worker_attack(query):
    return attack_query(_WORKER["enc"], _WORKER["kb"], query, _WORKER["cfg"],
                        _WORKER["method"], _WORKER["rng"])


def compute_deltas(enc: DualEncoder, kb: KnowledgeBase, corpus: Corpus,
                   cfg: AttackConfig, method: str, rng: SeededRng,
                   jobs: int = 1) -> dict[int, Perturbation]:
    """Retrieval perturbations for every query; identical for any job count.

    Per-query randomness is derived from (seed, query_id) inside
    attack_query, so parallel scheduling cannot change results.
    """
    jobs = _resolve_jobs(jobs)
    queries = corpus.queries
    if jobs == 1 or len(queries) < 2 * jobs:
        return {q.query_id: attack_query(enc, kb, q, cfg, method, rng) for q in queries}
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(enc, kb, cfg, method, rng.seed, rng.stream)) as pool:
        perts = list(pool.map(_worker_attack, queries, chunksize=8))
    return {q.query_id: p for q, p in zip(queries, perts)}


def compute_generator_noises(corpus: Corpus, cfg: AttackConfig,
                             rng: SeededRng) -> dict[int, Perturbation]:
    return {q.query_id: generator_noise(cfg, "uniform_random",
                                        rng.derive(q.query_id, "gen_noise"),
                                        d_img=corpus.d_img)
            for q in corpus.queries}


def _final_losses(enc, kb, corpus, cfg, method) -> list[float]:
    """Final-step attack loss per query (for step-count sweeps)."""
    losses = []
    for q in corpus.queries:
        if method == "hv":
            _, _, t2 = hv_attack_traced(enc, kb, q, cfg)
            losses.append(t2.final_loss())
        elif method == "stage1_only":
            _, t1 = stage1_attack(enc, kb, q.image, cfg)
            losses.append(t1.final_loss())
        elif method == "stage2_only":
            zero = zero_perturbation(enc.d_img, cfg)
            _, t2 = stage2_attack(enc, kb, q.image, q.text, zero, cfg,
                                  caption_tokens=q.caption_tokens)
            losses.append(t2.final_loss())
        else:
            losses.append(float("nan"))
    return losses


# ---------------------------------------------------------------------------
# Experiment runner.


def run_experiment(corpus: Corpus, regimes, methods, k_list, seeds, *,
                   attack_cfg: AttackConfig = AttackConfig(),
                   train_params: TrainParams = TrainParams(),
                   k_gen: int = 5, jobs: int = 1,
                   encoders: dict | None = None,
                   deltas_by_key: dict | None = None) -> list[MetricReport]:
    """Attack every query for each (regime, method, seed) and report metrics.

    ``encoders`` may supply pretrained encoders keyed by (regime, seed);
    ``deltas_by_key`` may supply precomputed perturbations keyed by
    (regime, method, seed) -- the CLI uses both so `attack` and `eval`
    stay separate commands. Everything is deterministic per seed.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("run_experiment needs at least one seed")
    k_list = tuple(k_list)
    reports = []
    for seed in seeds:
        root = SeededRng(seed)
        for regime in regimes:
            if encoders and (regime, seed) in encoders:
                enc = encoders[(regime, seed)]
            else:
                enc = train_encoder(corpus, train_params, regime, root.derive("train", regime))
            kb = build_kb(corpus.entries, enc, attack_cfg.kernel)
            clean_outcomes = _evaluate_queries(enc, kb, corpus, None, None,
                                               k_list, k_gen, attack_cfg.pixel_clip)
            clean_values = _aggregate(clean_outcomes, k_list, k_gen)
            for method in methods:
                if method == "clean":
                    attacked_values = dict(clean_values)
                else:
                    key = (regime, method, seed)
                    if deltas_by_key and key in deltas_by_key:
                        deltas = deltas_by_key[key]
                    else:
                        deltas = compute_deltas(enc, kb, corpus, attack_cfg, method,
                                                root.derive("attack", regime, method), jobs)
                    noises = compute_generator_noises(
                        corpus, attack_cfg, root.derive("gen", regime, method))
                    outcomes = _evaluate_queries(enc, kb, corpus, deltas, noises,
                                                 k_list, k_gen, attack_cfg.pixel_clip)
                    attacked_values = _aggregate(outcomes, k_list, k_gen)
                metrics = {name: MetricValue(clean_values[name], attacked_values[name],
                                             _safe_asr(clean_values[name],
                                                       attacked_values[name]))
                           for name in clean_values}
                reports.append(MetricReport(regime, method, seed, metrics))
    return reports


def run_sweep(spec: SweepSpec, corpus: Corpus, regime: str, seeds, *,
              train_params: TrainParams = TrainParams(), k_list=(5,),
              k_gen: int = 5, jobs: int = 1) -> list[SweepPoint]:
    """One experiment per grid point with the same seeds at every point."""
    seeds = list(seeds)
    points = []
    for seed in seeds:
        root = SeededRng(seed)
        enc = train_encoder(corpus, train_params, regime, root.derive("train", regime))
        kb = build_kb(corpus.entries, enc, spec.base.kernel)
        clean_outcomes = _evaluate_queries(enc, kb, corpus, None, None,
                                           k_list, k_gen, spec.base.pixel_clip)
        clean_values = _aggregate(clean_outcomes, k_list, k_gen)
        for value in spec.grid:
            cfg = replace(spec.base, **{spec.param: value})
            deltas = compute_deltas(enc, kb, corpus, cfg, spec.method,
                                    root.derive("attack", regime, spec.method), jobs)
            noises = compute_generator_noises(corpus, cfg,
                                              root.derive("gen", regime, spec.method))
            outcomes = _evaluate_queries(enc, kb, corpus, deltas, noises,
                                         k_list, k_gen, cfg.pixel_clip)
            attacked = _aggregate(outcomes, k_list, k_gen)
            metrics = {name: MetricValue(clean_values[name], attacked[name],
                                         _safe_asr(clean_values[name], attacked[name]))
                       for name in clean_values}
            losses = _final_losses(enc, kb, corpus, cfg, spec.method)
            mean_loss = float(np.nanmean(losses)) if losses else float("nan")
            points.append(SweepPoint(spec.param, float(value), regime, seed,
                                     metrics, mean_loss))
    return points


# ---------------------------------------------------------------------------
# Reports.


def _metric_k(name: str, k_gen: int) -> int:
    return int(name.split("@")[1]) if "@" in name else k_gen


def report_csv(reports: list, k_gen: int = 5) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["regime", "method", "seed", "K", "metric", "clean", "attacked",
                     "asr_star"])
    for rep in reports:
        for name in METRIC_ORDER:
            if name not in rep.metrics:
                continue
            mv = rep.metrics[name]
            writer.writerow([rep.regime, rep.method, rep.seed, _metric_k(name, k_gen),
                             name, repr(mv.clean), repr(mv.attacked), repr(mv.asr_star)])
    return buf.getvalue()


def sweep_csv(points: list, k_gen: int = 5) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["param", "value", "regime", "seed", "K", "metric", "clean",
                     "attacked", "asr_star", "final_loss_mean"])
    for p in points:
        for name in METRIC_ORDER:
            if name not in p.metrics:
                continue
            mv = p.metrics[name]
            writer.writerow([p.param, repr(p.value), p.regime, p.seed,
                             _metric_k(name, k_gen), name, repr(mv.clean),
                             repr(mv.attacked), repr(mv.asr_star), repr(p.final_loss_mean)])
    return buf.getvalue()


def summarize(reports: list) -> dict:
    """Seed-averaged nested summary: regime -> method -> metric -> values."""
    seeds = sorted({r.seed for r in reports})
    out: dict = {"seeds": seeds, "regimes": {}}
    for rep in reports:
        block = out["regimes"].setdefault(rep.regime, {}).setdefault(rep.method, {})
        for name, mv in rep.metrics.items():
            slot = block.setdefault(name, {"clean": [], "attacked": [], "asr_star": []})
            slot["clean"].append(mv.clean)
            slot["attacked"].append(mv.attacked)
            slot["asr_star"].append(mv.asr_star)
    for regime in out["regimes"].values():
        for method in regime.values():
            for name, slot in method.items():
                method[name] = {key: float(np.nanmean(vals)) if vals else float("nan")
                                for key, vals in slot.items()}
    return out


def summary_json(reports: list) -> str:
    return json.dumps(summarize(reports), sort_keys=True, indent=2) + "\n"


def format_summary_table(summary: dict) -> str:
    """Human-readable table in the clean/attacked/ASR* row layout."""
    lines = []
    metric_names = [m for m in METRIC_ORDER]
    for regime in sorted(summary["regimes"]):
        lines.append(f"== retriever regime: {regime} "
                     f"(mean over seeds {summary['seeds']}) ==")
        header = f"{'method':<16}" + "".join(f"{m + ' adv':>12}{'ASR*':>8}" for m in metric_names)
        lines.append(header)
        methods = summary["regimes"][regime]
        if "clean" in methods or methods:
            any_m = next(iter(methods.values()))
            clean_cells = "".join(
                f"{any_m[m]['clean'] * 100:>12.2f}{'-':>8}" if m in any_m else ""
                for m in metric_names)
            lines.append(f"{'(clean)':<16}" + clean_cells)
        for method in sorted(methods):
            cells = ""
            for m in metric_names:
                if m not in methods[method]:
                    continue
                mv = methods[method][m]
                cells += f"{mv['attacked'] * 100:>12.2f}{mv['asr_star'] * 100:>8.2f}"
            lines.append(f"{method:<16}" + cells)
        lines.append("")
    return "\n".join(lines)


def write_report(reports: list, out_dir: str | Path, k_gen: int = 5) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(reports, k_gen))
    (out / "summary.json").write_text(summary_json(reports))
