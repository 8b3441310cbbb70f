"""Hierarchical visual attack: hinge contrastive losses, the PGD engine,
the two attack stages, generator-input noise, and the baseline attacks.

Stage 1 (modality alignment) pushes the perturbed image's multimodal
representation away from its own caption embedding and toward the caption
embedding of the least-similar database image. Stage 2 (semantic
alignment) starts from stage 1's perturbation and repeats the scheme
against the full query text / reference passage embeddings. Both stages
share one signed-gradient update with an L-infinity budget.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import binio
from .errors import InvariantViolation, NonFiniteLossError
from .models import (DualEncoder, HingeSimLoss, ImagePath, SimLoss, _loss_value_grad,
                     as_image, caption_embed, encode_text, hinge_from_sims)
from .numerics import KERNELS, SeededRng, linf_norm, sign_vec
from .retrieval import KnowledgeBase, select_reference_image, select_reference_passage

PERTURBATION_FORMAT_VERSION = 1

KIND_RETRIEVAL = "retrieval"
KIND_STAGE1 = "stage1"
KIND_GENERATOR = "generator"
KINDS = (KIND_RETRIEVAL, KIND_STAGE1, KIND_GENERATOR)

LOSS_VARIANTS = ("literal_abs", "directional")


@dataclass(frozen=True)
class AttackConfig:
    """PGD hyperparameters; the defaults are the published operating point."""

    steps: int = 50
    step_size: float = 1.0 / 255.0
    epsilon: float = 8.0 / 255.0
    beta: float = 0.4
    gamma: float = 0.6
    loss_variant: str = "literal_abs"
    pixel_clip: bool = True
    kernel: str = "cosine"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")


@dataclass(frozen=True)
class Perturbation:
    delta: np.ndarray
    kind: str
    epsilon: float
    seed: int | None = None

    def __post_init__(self):
        d = np.ascontiguousarray(np.asarray(self.delta, dtype=np.float64))
        if not np.all(np.isfinite(d)):
            raise ValueError("perturbation contains non-finite entries")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if linf_norm(d) > self.epsilon:
            raise InvariantViolation(
                f"perturbation exceeds budget: linf={linf_norm(d)} > eps={self.epsilon}")
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)

    def perturbation_id(self) -> str:
        h = hashlib.sha256(self.delta.tobytes()).hexdigest()[:16]
        return f"{self.kind}:{h}"


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    clean_sim: float
    ref_sim: float
    linf: float


@dataclass
class AttackTrace:
    """Per-step diagnostics; record 0 is the state before any update."""

    records: list = field(default_factory=list)
    initial_delta: np.ndarray | None = None

    def append(self, step, loss, clean_sim, ref_sim, linf):
        self.records.append(TraceRecord(step, float(loss), float(clean_sim),
                                        float(ref_sim), float(linf)))

    def final_loss(self) -> float:
        return self.records[-1].loss

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss", "clean_sim", "ref_sim", "linf"])
        for r in self.records:
            writer.writerow([r.step, repr(r.loss), repr(r.clean_sim),
                             repr(r.ref_sim), repr(r.linf)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def hinge_contrastive_loss(clean_sim: float, ref_sim: float, beta: float, gamma: float,
                           variant: str = "literal_abs") -> float:
    """Hinge contrastive loss pulling sim-to-clean down and sim-to-ref up."""
    value, _, _ = hinge_from_sims(clean_sim, ref_sim, beta, gamma, variant)
    return value


def _pgd_step(delta: np.ndarray, grad: np.ndarray, cfg: AttackConfig,
              image: np.ndarray) -> np.ndarray:
    """One signed-gradient descent step projected into the budget box."""
    step = -cfg.step_size * sign_vec(grad)
    quantized = np.isin(step, (-cfg.step_size, 0.0, cfg.step_size))
    if not np.all(quantized):
        raise InvariantViolation("pre-clip step not in {-alpha, 0, +alpha}")
    new = np.clip(delta + step, -cfg.epsilon, cfg.epsilon)
    if cfg.pixel_clip:
        new = np.clip(new, -image, 1.0 - image)
    _check_budget(new, cfg, image)
    return new


def _check_budget(delta: np.ndarray, cfg: AttackConfig, image: np.ndarray | None):
    if linf_norm(delta) > cfg.epsilon:
        raise InvariantViolation(f"budget violated: linf={linf_norm(delta)} > {cfg.epsilon}")
    if cfg.pixel_clip and image is not None:
        px = image + delta
        if px.min() < 0.0 or px.max() > 1.0:
            raise InvariantViolation("perturbed pixels left [0, 1]")


def pgd_update(delta: Perturbation, grad, cfg: AttackConfig, query_image) -> Perturbation:
    image = as_image(query_image)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != image.shape:
        raise ValueError("gradient dimension does not match the image")
    new = _pgd_step(np.asarray(delta.delta), grad, cfg, image)
    return Perturbation(new, kind=delta.kind, epsilon=cfg.epsilon, seed=delta.seed)


def apply_perturbation(image, pert: Perturbation, pixel_clip: bool = True) -> np.ndarray:
    image = as_image(image)
    out = image + pert.delta
    return np.clip(out, 0.0, 1.0) if pixel_clip else out


def _run_pgd(enc: DualEncoder, spec, image: np.ndarray, cfg: AttackConfig,
             delta0: np.ndarray, kind: str, on_step=None) -> tuple[Perturbation, AttackTrace]:
    """Shared PGD loop over a hinge/sim loss spec; traces every step."""
    delta = np.array(delta0, dtype=np.float64)
    _check_budget(delta, cfg, image)
    trace = AttackTrace(initial_delta=delta.copy())

    def evaluate(d):
        value, grad, aux = _loss_value_grad(enc, spec, image + d)
        return value, grad, aux.get("clean_sim", aux.get("sim", np.nan)), aux.get("ref_sim", np.nan)

    for step in range(cfg.steps):
        try:
            value, grad, cs, rs = evaluate(delta)
        except ValueError as exc:
            raise NonFiniteLossError(f"attack aborted at step {step}: {exc}", trace) from exc
        if not np.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss at step {step}", trace)
        trace.append(step, value, cs, rs, linf_norm(delta))
        if on_step is not None:
            on_step(step, delta.copy(), grad)
        delta = _pgd_step(delta, grad, cfg, image)
    value, _, cs, rs = evaluate(delta)
    trace.append(cfg.steps, value, cs, rs, linf_norm(delta))
    return Perturbation(delta, kind=kind, epsilon=cfg.epsilon), trace


def stage1_attack(enc: DualEncoder, kb: KnowledgeBase, query_image,
                  cfg: AttackConfig, on_step=None) -> tuple[Perturbation, AttackTrace]:
    """Modality-alignment attack.

    Anchors (computed once): the caption embedding of the clean image and
    of the least-similar database image. The optimized representation is
    E_i(I+delta) + caption_head(I+delta).
    """
    image = as_image(query_image, enc.d_img)
    ref_image = select_reference_image(kb, enc, image)
    spec = HingeSimLoss(
        path=ImagePath(image_coeff=1.0, caption_coeff=1.0),
        clean_anchor=caption_embed(enc, image),
        ref_anchor=caption_embed(enc, ref_image),
        beta=cfg.beta, gamma=cfg.gamma, variant=cfg.loss_variant, kernel=cfg.kernel,
    )
    return _run_pgd(enc, spec, image, cfg, np.zeros(enc.d_img), KIND_STAGE1, on_step)


def stage2_attack(enc: DualEncoder, kb: KnowledgeBase, query_image, query_text,
                  delta_r1: Perturbation, cfg: AttackConfig, *,
                  caption_tokens, on_step=None) -> tuple[Perturbation, AttackTrace]:
    """Semantic-alignment attack, initialized from the stage-1 perturbation.

    Anchors (computed once): the text embedding of the query followed by
    the clean image's caption tokens, and the embedding of the passage
    retrieved for the reference image. The optimized representation adds
    the query text to the image/caption paths; the caption head carries
    the perturbed image's share of the concatenated text, weighted by
    token counts as mean pooling dictates.
    """
    image = as_image(query_image, enc.d_img)
    ref_image = select_reference_image(kb, enc, image)
    ref_passage = select_reference_passage(kb, enc, ref_image)
    m = len(tuple(query_text))
    n = len(tuple(caption_tokens))
    spec = HingeSimLoss(
        path=ImagePath(image_coeff=1.0, caption_coeff=n / (m + n),
                       offset=(m / (m + n)) * encode_text(enc, query_text)),
        clean_anchor=encode_text(enc, tuple(query_text) + tuple(caption_tokens)),
        ref_anchor=encode_text(enc, ref_passage),
        beta=cfg.beta, gamma=cfg.gamma, variant=cfg.loss_variant, kernel=cfg.kernel,
    )
    if linf_norm(delta_r1.delta) > cfg.epsilon:
        raise InvariantViolation("stage-1 perturbation exceeds the stage-2 budget")
    pert, trace = _run_pgd(enc, spec, image, cfg, delta_r1.delta, KIND_RETRIEVAL, on_step)
    return pert, trace


def hv_attack_traced(enc: DualEncoder, kb: KnowledgeBase, query, cfg: AttackConfig):
    """Both stages in order; returns (delta_r, stage1 trace, stage2 trace)."""
    d1, t1 = stage1_attack(enc, kb, query.image, cfg)
    d2, t2 = stage2_attack(enc, kb, query.image, query.text, d1, cfg,
                           caption_tokens=query.caption_tokens)
    return d2, t1, t2


def hv_attack(enc: DualEncoder, kb: KnowledgeBase, query, cfg: AttackConfig) -> Perturbation:
    """Hierarchical attack: stage 1 then stage 2 on the query's image."""
    return hv_attack_traced(enc, kb, query, cfg)[0]


def generator_noise(cfg: AttackConfig, mode: str, rng: SeededRng | None = None, *,
                    d_img: int | None = None, path: str | Path | None = None) -> Perturbation:
    """Bounded noise applied to the generator's image input.

    ``uniform_random`` draws i.i.d. entries in [-eps, eps]; ``from_file``
    loads a serialized perturbation and enforces the budget (a violation
    is a hard error, never a silent clip).
    """
    if mode == "uniform_random":
        if rng is None or d_img is None:
            raise ValueError("uniform_random mode needs an rng and d_img")
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, d_img)
        return Perturbation(delta, KIND_GENERATOR, cfg.epsilon, seed=rng.seed)
    if mode == "from_file":
        if path is None:
            raise ValueError("from_file mode needs a path")
        pert, _ = load_perturbation(path)
        if linf_norm(pert.delta) > cfg.epsilon:
            raise ValueError(
                f"file noise violates budget: linf={linf_norm(pert.delta)} > {cfg.epsilon}")
        return Perturbation(pert.delta, KIND_GENERATOR, cfg.epsilon, seed=pert.seed)
    raise ValueError(f"unknown generator noise mode {mode!r}")


def baseline_random(cfg: AttackConfig, d_img: int, rng: SeededRng) -> Perturbation:
    """Uniform noise in the budget box; the no-optimization control."""
    delta = rng.uniform(-cfg.epsilon, cfg.epsilon, d_img)
    return Perturbation(delta, KIND_RETRIEVAL, cfg.epsilon, seed=rng.seed)


def baseline_caption_dissim(enc: DualEncoder, query_image, cfg: AttackConfig,
                            on_step=None) -> Perturbation:
    """PGD that just minimizes sim(E_i(I+delta), caption_embed(I)).

    Simplified stand-in for caption-targeted attacks: no reference pull,
    no multimodal representation.
    """
    image = as_image(query_image, enc.d_img)
    spec = SimLoss(path=ImagePath(image_coeff=1.0),
                   anchor=caption_embed(enc, image), scale=1.0, kernel=cfg.kernel)
    pert, _ = _run_pgd(enc, spec, image, cfg, np.zeros(enc.d_img), KIND_RETRIEVAL, on_step)
    return pert


# ---------------------------------------------------------------------------
# Serialization: flat binary float64 with a JSON header.


def save_perturbation(pert: Perturbation, path: str | Path, extra: dict | None = None) -> None:
    header = {
        "format_version": PERTURBATION_FORMAT_VERSION,
        "kind": pert.kind,
        "d_img": int(pert.delta.shape[0]),
        "epsilon": pert.epsilon,
        "seed": pert.seed,
    }
    if extra:
        header.update(extra)
    binio.write_arrays(path, header, {"delta": pert.delta})


def load_perturbation(path: str | Path) -> tuple[Perturbation, dict]:
    header, arrays = binio.read_arrays(path)
    if header.get("format_version") != PERTURBATION_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported perturbation format")
    pert = Perturbation(arrays["delta"], header["kind"], float(header["epsilon"]),
                        seed=header.get("seed"))
    return pert, header


def save_perturbation_set(perts: dict[int, Perturbation], path: str | Path,
                          extra: dict | None = None) -> None:
    """All per-query perturbations of one method in a single deterministic file."""
    if not perts:
        raise ValueError("empty perturbation set")
    qids = sorted(perts)
    first = perts[qids[0]]
    deltas = np.stack([perts[q].delta for q in qids])
    header = {
        "format_version": PERTURBATION_FORMAT_VERSION,
        "kind": first.kind,
        "d_img": int(deltas.shape[1]),
        "epsilon": first.epsilon,
        "seed": first.seed,
        "query_ids": qids,
    }
    if extra:
        header.update(extra)
    binio.write_arrays(path, header, {"deltas": deltas})


def load_perturbation_set(path: str | Path) -> tuple[dict[int, Perturbation], dict]:
    header, arrays = binio.read_arrays(path)
    deltas = arrays["deltas"]
    out = {}
    for i, qid in enumerate(header["query_ids"]):
        out[int(qid)] = Perturbation(deltas[i], header["kind"], float(header["epsilon"]),
                                     seed=header.get("seed"))
    return out, header


def zero_perturbation(d_img: int, cfg: AttackConfig, kind: str = KIND_RETRIEVAL) -> Perturbation:
    return Perturbation(np.zeros(d_img), kind, cfg.epsilon)


def config_with(cfg: AttackConfig, **kwargs) -> AttackConfig:
    return replace(cfg, **kwargs)
