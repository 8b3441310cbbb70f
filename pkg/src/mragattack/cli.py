"""Command-line entry point.

One declarative JSON config drives every stage; flags and trailing
``key=value`` pairs override individual fields. Each command writes the
effective config next to its outputs so a run can be reproduced from the
artifacts alone. Commands are idempotent: identical inputs produce
byte-identical outputs. Set HV_ATTACK_DETERMINISTIC=1 to force
single-threaded execution regardless of --jobs.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 encoder
fingerprint mismatch, 5 runtime invariant violation, 1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .attack import AttackConfig, save_perturbation_set, load_perturbation_set
from .corpus import REGIMES, Corpus, TrainParams, load_corpus, save_corpus, \
    synth_corpus, train_encoder
from .errors import ArtifactError, ConfigError, FingerprintMismatch, InvariantViolation
from .evaluation import SweepSpec, compute_deltas, format_summary_table, run_experiment, \
    run_sweep, summarize, sweep_csv, write_report
from .generation import METHODS
from .models import encoder_fingerprint, load_encoder, save_encoder
from .numerics import SeededRng
from .retrieval import build_kb, load_kb, save_kb

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_FINGERPRINT = 4
EXIT_INVARIANT = 5


@dataclass
class CorpusParams:
    n_concepts: int = 50
    queries_per_concept: int = 4
    passages_per_concept: int = 10
    distractor_passages: int = 500
    d_img: int = 768
    image_noise: float = 0.1
    vocab_size: int | None = None


@dataclass
class TrainingSection:
    epochs: int = 40
    lr: float = 0.5
    batch_size: int = 32
    hidden_dim: int = 128
    d_emb: int = 64
    d_tok: int = 32
    temperature: float = 0.07
    regimes: list = field(default_factory=lambda: list(REGIMES))

    def params(self) -> TrainParams:
        return TrainParams(self.epochs, self.lr, self.batch_size, self.hidden_dim,
                           self.d_emb, self.d_tok, self.temperature)


@dataclass
class EvalSection:
    k_list: list = field(default_factory=lambda: [5, 10])
    k_gen: int = 5
    methods: list = field(default_factory=lambda: list(METHODS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class SweepSection:
    param: str = "epsilon"
    grid: list = field(default_factory=lambda: [2 / 255, 4 / 255, 8 / 255, 16 / 255])
    method: str = "hv"
    regime: str = "finetuned"
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/quickstart"
    jobs: int = 1
    corpus: CorpusParams = field(default_factory=CorpusParams)
    training: TrainingSection = field(default_factory=TrainingSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection | None = None


_SECTION_TYPES = {
    "corpus": CorpusParams,
    "training": TrainingSection,
    "attack": AttackConfig,
    "eval": EvalSection,
    "sweep": SweepSection,
}


def _build_section(cls, data: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys under '{path}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config under '{path}': {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if key == "sweep" and value is None:
                kwargs[key] = None
            else:
                kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def _apply_override(data: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def load_config(args) -> RunConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ArtifactError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    else:
        data = {}
    base = config_to_dict(config_from_dict(data))  # fill defaults, reject unknowns
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _apply_override(base, key, raw)
    if args.seed is not None:
        base["seed"] = args.seed
    if args.out is not None:
        base["out_dir"] = args.out
    if args.jobs is not None:
        base["jobs"] = args.jobs
    if args.epsilon is not None:
        base["attack"]["epsilon"] = args.epsilon
    if args.steps is not None:
        base["attack"]["steps"] = args.steps
    if args.method is not None:
        base["eval"]["methods"] = [args.method]
        if base.get("sweep"):
            base["sweep"]["method"] = args.method
    return config_from_dict(base)


def _write_effective_config(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n"
    (out / "effective_config.json").write_text(text)


# ---------------------------------------------------------------------------
# Artifact paths and loaders.


def _corpus_dir(cfg) -> Path:
    return Path(cfg.out_dir) / "corpus"


def _encoder_path(cfg, regime: str, seed: int) -> Path:
    return Path(cfg.out_dir) / "encoders" / f"{regime}_s{seed}.bin"


def _kb_dir(cfg, regime: str, seed: int) -> Path:
    return Path(cfg.out_dir) / "kb" / f"{regime}_s{seed}"


def _pert_path(cfg, regime: str, seed: int, method: str) -> Path:
    return Path(cfg.out_dir) / "attacks" / f"{regime}_s{seed}" / f"{method}.pert"


def _require_corpus(cfg) -> Corpus:
    path = _corpus_dir(cfg)
    if not (path / "meta.json").exists():
        raise ArtifactError(f"no corpus at {path}; run `mragattack synth` first")
    return load_corpus(path)


def _require_encoder(cfg, regime: str, seed: int):
    path = _encoder_path(cfg, regime, seed)
    if not path.exists():
        raise ArtifactError(f"no encoder at {path}; run `mragattack train` first")
    return load_encoder(path)


def _require_kb(cfg, regime: str, seed: int):
    path = _kb_dir(cfg, regime, seed)
    if not (path / "header.json").exists():
        raise ArtifactError(f"no knowledge base at {path}; run `mragattack build-kb` first")
    return load_kb(path)


def _check_fingerprint(enc, kb, context: str) -> None:
    if encoder_fingerprint(enc) != kb.encoder_fingerprint:
        raise FingerprintMismatch(f"{context}: knowledge base and encoder disagree")


# ---------------------------------------------------------------------------
# Commands.


def cmd_synth(cfg: RunConfig) -> None:
    p = cfg.corpus
    corpus = synth_corpus(p.n_concepts, p.queries_per_concept, p.passages_per_concept,
                          p.distractor_passages, SeededRng(cfg.seed).derive("corpus"),
                          d_img=p.d_img, image_noise=p.image_noise,
                          vocab_size=p.vocab_size)
    save_corpus(corpus, _corpus_dir(cfg))
    print(f"wrote corpus ({len(corpus.queries)} queries, {len(corpus.entries)} entries) "
          f"to {_corpus_dir(cfg)}")


def cmd_train(cfg: RunConfig) -> None:
    corpus = _require_corpus(cfg)
    params = cfg.training.params()
    for seed in cfg.eval.seeds:
        for regime in cfg.training.regimes:
            enc = train_encoder(corpus, params, regime, SeededRng(seed).derive("train", regime))
            path = _encoder_path(cfg, regime, seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_encoder(enc, path)
            losses = enc.meta["epoch_losses"]
            tail = f"loss {losses[0]:.4f} -> {losses[-1]:.4f}" if losses else "untrained"
            print(f"trained {regime} seed {seed} ({enc.meta['epochs_run']} epochs, {tail}) "
                  f"-> {path}")


def cmd_build_kb(cfg: RunConfig) -> None:
    corpus = _require_corpus(cfg)
    for seed in cfg.eval.seeds:
        for regime in cfg.training.regimes:
            enc = _require_encoder(cfg, regime, seed)
            kb = build_kb(corpus.entries, enc, cfg.attack.kernel)
            save_kb(kb, _kb_dir(cfg, regime, seed))
            print(f"built kb for {regime} seed {seed} ({len(kb.entries)} entries) "
                  f"-> {_kb_dir(cfg, regime, seed)}")


def cmd_attack(cfg: RunConfig) -> None:
    corpus = _require_corpus(cfg)
    methods = [m for m in cfg.eval.methods if m != "clean"]
    for seed in cfg.eval.seeds:
        root = SeededRng(seed)
        for regime in cfg.training.regimes:
            enc = _require_encoder(cfg, regime, seed)
            kb = _require_kb(cfg, regime, seed)
            _check_fingerprint(enc, kb, f"{regime} seed {seed}")
            for method in methods:
                deltas = compute_deltas(enc, kb, corpus, cfg.attack, method,
                                        root.derive("attack", regime, method),
                                        jobs=cfg.jobs)
                path = _pert_path(cfg, regime, seed, method)
                path.parent.mkdir(parents=True, exist_ok=True)
                save_perturbation_set(deltas, path, extra={
                    "method": method,
                    "encoder_fingerprint": encoder_fingerprint(enc),
                    "experiment_seed": seed,
                })
                print(f"attacked {len(deltas)} queries [{regime} s{seed} {method}] -> {path}")


def cmd_eval(cfg: RunConfig) -> None:
    corpus = _require_corpus(cfg)
    encoders = {}
    deltas_by_key = {}
    for seed in cfg.eval.seeds:
        for regime in cfg.training.regimes:
            enc = _require_encoder(cfg, regime, seed)
            kb = _require_kb(cfg, regime, seed)
            _check_fingerprint(enc, kb, f"{regime} seed {seed}")
            encoders[(regime, seed)] = enc
            for method in cfg.eval.methods:
                if method == "clean":
                    continue
                path = _pert_path(cfg, regime, seed, method)
                if not path.exists():
                    raise ArtifactError(f"no perturbations at {path}; run `mragattack attack`")
                deltas, header = load_perturbation_set(path)
                if header.get("encoder_fingerprint") != encoder_fingerprint(enc):
                    raise FingerprintMismatch(
                        f"perturbations at {path} were made against a different encoder")
                missing = {q.query_id for q in corpus.queries} - set(deltas)
                if missing:
                    raise ArtifactError(f"{path} lacks perturbations for queries {sorted(missing)}")
                deltas_by_key[(regime, method, seed)] = deltas
    reports = run_experiment(
        corpus, cfg.training.regimes, cfg.eval.methods, cfg.eval.k_list, cfg.eval.seeds,
        attack_cfg=cfg.attack, train_params=cfg.training.params(), k_gen=cfg.eval.k_gen,
        jobs=cfg.jobs, encoders=encoders, deltas_by_key=deltas_by_key)
    write_report(reports, cfg.out_dir, cfg.eval.k_gen)
    print(format_summary_table(summarize(reports)))


def cmd_sweep(cfg: RunConfig) -> None:
    if cfg.sweep is None:
        raise ConfigError("config has no sweep section")
    corpus = _require_corpus(cfg)
    spec = SweepSpec(cfg.sweep.param, tuple(cfg.sweep.grid), cfg.attack, cfg.sweep.method)
    points = run_sweep(spec, corpus, cfg.sweep.regime, cfg.sweep.seeds,
                       train_params=cfg.training.params(), k_list=tuple(cfg.eval.k_list),
                       k_gen=cfg.eval.k_gen, jobs=cfg.jobs)
    out = Path(cfg.out_dir) / "sweep.csv"
    out.write_text(sweep_csv(points, cfg.eval.k_gen))
    print(f"wrote {len(points)} sweep points ({cfg.sweep.param} grid) -> {out}")


def cmd_report(cfg: RunConfig) -> None:
    path = Path(cfg.out_dir) / "summary.json"
    if not path.exists():
        raise ArtifactError(f"no summary at {path}; run `mragattack eval` first")
    print(format_summary_table(json.loads(path.read_text())))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "build-kb": cmd_build_kb,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--jobs", type=int, help="worker processes for per-query attacks")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--method", help="restrict to a single attack method")
    common.add_argument("--epsilon", type=float, help="override the perturbation budget")
    common.add_argument("--steps", type=int, help="override the PGD step count")
    common.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted-path config overrides, e.g. corpus.n_concepts=10")
    parser = argparse.ArgumentParser(
        prog="mragattack",
        description="Simulate a multimodal RAG pipeline and attack its image input.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        _write_effective_config(cfg)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except FingerprintMismatch as exc:
        print(f"fingerprint mismatch: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:  # pragma: no cover - catch-all for the shell
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
