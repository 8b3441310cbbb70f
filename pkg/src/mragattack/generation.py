"""Toy answer generator and the end-to-end pipeline runner.

The generator is a transparent scoring rule, not a model: candidate
answers are the content tokens found in the retrieved passages, scored by
how many passages support them plus how well the image agrees with the
supporting entries. Keeping it deterministic makes any exact-match drop
attributable to the two attacked inputs (retrieved knowledge and the
generator's image) rather than to generator noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import (AttackConfig, KIND_GENERATOR, KIND_RETRIEVAL, Perturbation,
                     apply_perturbation, baseline_caption_dissim, baseline_random,
                     generator_noise, hv_attack, stage1_attack, stage2_attack,
                     zero_perturbation)
from .corpus import NO_ANSWER_TOKEN, KnowledgeEntry, QuerySample, is_answer_token
from .errors import FingerprintMismatch, InvariantViolation
from .models import DualEncoder, caption_embed, encode_image, encode_text, \
    encoder_fingerprint, multimodal_embed
from .numerics import SeededRng, cosine_sim
from .retrieval import KnowledgeBase, RetrievalResult, retrieve_topk

IMAGE_AGREEMENT_WEIGHT = 0.5

METHODS = ("clean", "random", "caption_dissim", "stage1_only", "stage2_only", "hv")


@dataclass(frozen=True)
class Answer:
    token: int
    support_score: float


@dataclass(frozen=True)
class PipelineRun:
    query_id: int
    mode: str  # "clean" | "attacked"
    retrieval: RetrievalResult
    answer: Answer
    delta_r_id: str | None = None
    delta_g_id: str | None = None

    def __post_init__(self):
        if self.mode == "attacked" and (self.delta_r_id is None or self.delta_g_id is None):
            raise InvariantViolation("attacked run must record both perturbation ids")


def _entry_visual_embedding(enc: DualEncoder, entry: KnowledgeEntry) -> np.ndarray:
    # caption-space prototype of the entry: caption head on its image when
    # available, otherwise its passage's text embedding (same space once trained)
    if entry.image is not None:
        return caption_embed(enc, entry.image)
    return encode_text(enc, entry.passage)


def generate_answer(enc: DualEncoder, query_text, image, topk: list) -> Answer:
    """Pick the best-supported answer token among the retrieved passages.

    Candidates are the answer-class content tokens found in the passages
    (descriptive topic words cannot answer a question). Each is scored by

        score(t) = (#passages containing t)
                 + 0.5 * cosine(E_i(image), mean caption-space embedding
                                of the entries containing t)

    Ties break by ascending token id; no candidates yields NO_ANSWER.
    """
    if not topk:
        raise ValueError("generate_answer needs at least one retrieved entry")
    candidates: dict[int, list[KnowledgeEntry]] = {}
    for entry in topk:
        for tok in set(entry.passage):
            if is_answer_token(int(tok)):
                candidates.setdefault(int(tok), []).append(entry)
    if not candidates:
        return Answer(NO_ANSWER_TOKEN, 0.0)
    img_emb = encode_image(enc, image)
    best_tok, best_score = None, None
    for tok in sorted(candidates):
        support = candidates[tok]
        proto = np.mean([_entry_visual_embedding(enc, e) for e in support], axis=0)
        score = float(len(support)) + IMAGE_AGREEMENT_WEIGHT * cosine_sim(img_emb, proto)
        if best_score is None or score > best_score:
            best_tok, best_score = tok, score
    return Answer(best_tok, best_score)


def attack_query(enc: DualEncoder, kb: KnowledgeBase, query: QuerySample,
                 cfg: AttackConfig, method: str, rng: SeededRng) -> Perturbation:
    """Retrieval perturbation for one query under the named method."""
    if method == "clean":
        return zero_perturbation(enc.d_img, cfg)
    if method == "random":
        return baseline_random(cfg, enc.d_img, rng.derive(query.query_id, "random"))
    if method == "caption_dissim":
        return baseline_caption_dissim(enc, query.image, cfg)
    if method == "stage1_only":
        pert, _ = stage1_attack(enc, kb, query.image, cfg)
        return Perturbation(pert.delta, KIND_RETRIEVAL, cfg.epsilon)
    if method == "stage2_only":
        zero = zero_perturbation(enc.d_img, cfg)
        pert, _ = stage2_attack(enc, kb, query.image, query.text, zero, cfg,
                                caption_tokens=query.caption_tokens)
        return pert
    if method == "hv":
        return hv_attack(enc, kb, query, cfg)
    raise ValueError(f"unknown attack method {method!r}; expected one of {METHODS}")


def run_mrag(enc: DualEncoder, kb: KnowledgeBase, query: QuerySample, mode: str,
             attack_cfg: AttackConfig, *, k: int = 5, method: str = "hv",
             rng: SeededRng | None = None, delta_r: Perturbation | None = None,
             delta_g: Perturbation | None = None) -> PipelineRun:
    """One query through the pipeline: (optional attack) -> retrieve -> generate.

    The retriever only ever sees image+delta_r; the generator only ever
    sees image+delta_g. Precomputed perturbations may be supplied,
    otherwise they are derived here (deterministically from the rng).
    """
    if encoder_fingerprint(enc) != kb.encoder_fingerprint:
        raise FingerprintMismatch("knowledge base was built with a different encoder")
    if mode == "clean":
        q_emb = multimodal_embed(enc, query.image, query.text)
        result = retrieve_topk(kb, q_emb, k, query_id=query.query_id)
        entries = _entries_for(kb, result)
        answer = generate_answer(enc, query.text, query.image, entries)
        return PipelineRun(query.query_id, "clean", result, answer)
    if mode != "attacked":
        raise ValueError(f"unknown mode {mode!r}")
    if delta_r is None:
        if rng is None:
            raise ValueError("attacked mode needs an rng when perturbations are not supplied")
        delta_r = attack_query(enc, kb, query, attack_cfg, method, rng)
    if delta_g is None:
        if rng is None:
            raise ValueError("attacked mode needs an rng when perturbations are not supplied")
        delta_g = generator_noise(attack_cfg, "uniform_random",
                                  rng.derive(query.query_id, "gen_noise"), d_img=enc.d_img)
    if delta_r.kind == KIND_GENERATOR or delta_g.kind != KIND_GENERATOR:
        raise InvariantViolation("retrieval/generator perturbations crossed lanes")

    retrieval_image = apply_perturbation(query.image, delta_r, attack_cfg.pixel_clip)
    generator_image = apply_perturbation(query.image, delta_g, attack_cfg.pixel_clip)
    q_emb = multimodal_embed(enc, retrieval_image, query.text)
    result = retrieve_topk(kb, q_emb, k, query_id=query.query_id)
    entries = _entries_for(kb, result)
    answer = generate_answer(enc, query.text, generator_image, entries)
    return PipelineRun(query.query_id, "attacked", result, answer,
                       delta_r_id=delta_r.perturbation_id(),
                       delta_g_id=delta_g.perturbation_id())


def _entries_for(kb: KnowledgeBase, result: RetrievalResult) -> list:
    by_id = {e.entry_id: e for e in kb.entries}
    return [by_id[eid] for eid in result.entry_ids()]


def save_runs(runs: list, path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in runs:
            fh.write(json.dumps({
                "query_id": r.query_id,
                "mode": r.mode,
                "ranked": [[eid, score] for eid, score in r.retrieval.ranked],
                "capped": r.retrieval.capped,
                "answer_token": r.answer.token,
                "support_score": r.answer.support_score,
                "delta_r_id": r.delta_r_id,
                "delta_g_id": r.delta_g_id,
            }, sort_keys=True, separators=(",", ":")) + "\n")
