"""Knowledge-base construction, exact top-k retrieval, and the relevance
oracle plus the two reference-selection operations the attack needs.

Retrieval is deliberately brute force: at desk scale exactness matters
more than speed, and the tests compare against a full-sort oracle.
Ties break by ascending entry id everywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import KnowledgeEntry, QuerySample, as_text
from .errors import ArtifactError
from .models import DualEncoder, encode_image, encode_text, encoder_fingerprint
from .numerics import KERNELS, as_vector

KB_FORMAT_VERSION = 1


@dataclass(frozen=True)
class KnowledgeBase:
    entries: tuple
    embeddings: np.ndarray  # n x d_emb, row i belongs to entries[i]
    encoder_fingerprint: str
    kernel: str = "cosine"

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.entries):
            raise ValueError("embedding rows and entry count disagree")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        emb = np.ascontiguousarray(np.asarray(self.embeddings, dtype=np.float64))
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)


@dataclass(frozen=True)
class RetrievalResult:
    query_id: int
    ranked: tuple  # ((entry_id, score), ...) descending score
    capped: bool = False  # K exceeded the KB size

    def entry_ids(self) -> tuple:
        return tuple(eid for eid, _ in self.ranked)


def entry_embedding(enc: DualEncoder, entry: KnowledgeEntry) -> np.ndarray:
    """Text-only entries embed as E_t(passage); image-text pairs add E_i(image)."""
    emb = encode_text(enc, entry.passage)
    if entry.image is not None:
        emb = emb + encode_image(enc, entry.image)
    return emb


def build_kb(entries, enc: DualEncoder, kernel: str = "cosine") -> KnowledgeBase:
    entries = tuple(entries)
    if not entries:
        raise ValueError("cannot build a knowledge base from zero entries")
    rows = np.stack([entry_embedding(enc, e) for e in entries])
    return KnowledgeBase(entries, rows, encoder_fingerprint(enc), kernel)


def _scores(kb: KnowledgeBase, q_emb: np.ndarray) -> np.ndarray:
    if kb.kernel == "dot":
        return kb.embeddings @ q_emb
    norms = np.linalg.norm(kb.embeddings, axis=1)
    qn = float(np.linalg.norm(q_emb))
    if qn == 0.0 or np.any(norms == 0.0):
        raise ValueError("cosine retrieval undefined for zero-norm embeddings")
    return (kb.embeddings @ q_emb) / (norms * qn)


def retrieve_topk(kb: KnowledgeBase, q_emb, k: int, query_id: int = -1) -> RetrievalResult:
    """Exact top-k by similarity; ties by ascending entry id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q_emb = as_vector(q_emb, dim=kb.embeddings.shape[1], name="query embedding")
    scores = _scores(kb, q_emb)
    ids = np.asarray([e.entry_id for e in kb.entries])
    order = np.lexsort((ids, -scores))
    capped = k > len(kb.entries)
    take = order[:min(k, len(kb.entries))]
    ranked = tuple((int(ids[i]), float(scores[i])) for i in take)
    return RetrievalResult(query_id=query_id, ranked=ranked, capped=capped)


def relevance(query: QuerySample, entry: KnowledgeEntry) -> int:
    """1 iff the passage contains any gold answer token of the query."""
    return 1 if set(entry.passage) & set(query.gold_answers) else 0


def select_reference_image(kb: KnowledgeBase, enc: DualEncoder, query_image) -> np.ndarray:
    """KB image whose image embedding is least similar to the query image's.

    Exact argmin under the KB's similarity kernel, ties by ascending entry
    id. This is the "pull target" of the modality-alignment stage.
    """
    from .numerics import similarity

    q_emb = encode_image(enc, query_image)
    best = None
    for e in kb.entries:
        if e.image is None:
            continue
        s = similarity(encode_image(enc, e.image), q_emb, kb.kernel)
        if best is None or s < best[0] or (s == best[0] and e.entry_id < best[1]):
            best = (s, e.entry_id, e.image)
    if best is None:
        raise ValueError("knowledge base holds no image entries")
    return best[2]


def select_reference_passage(kb: KnowledgeBase, enc: DualEncoder, reference_image) -> tuple:
    """Passage of the top-1 entry for an image-only query on the reference image."""
    if not kb.entries:
        raise ValueError("knowledge base is empty")
    result = retrieve_topk(kb, encode_image(enc, reference_image), 1)
    by_id = {e.entry_id: e for e in kb.entries}
    return by_id[result.ranked[0][0]].passage


# ---------------------------------------------------------------------------
# Persistence: entries as JSON-lines, embeddings as flat row-major float64.


def save_kb(kb: KnowledgeBase, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "entries.jsonl", "w") as fh:
        for e in kb.entries:
            fh.write(json.dumps({
                "entry_id": e.entry_id,
                "passage": list(e.passage),
                "image": None if e.image is None else e.image.tolist(),
                "concept_id": e.concept_id,
                "contains_answer_for": sorted(e.contains_answer_for),
            }, sort_keys=True, separators=(",", ":")) + "\n")
    with open(out / "embeddings.bin", "wb") as fh:
        fh.write(np.ascontiguousarray(kb.embeddings).tobytes())
    header = {
        "format_version": KB_FORMAT_VERSION,
        "n": len(kb.entries),
        "d_emb": int(kb.embeddings.shape[1]),
        "kernel": kb.kernel,
        "fingerprint": kb.encoder_fingerprint,
    }
    with open(out / "header.json", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")))


def load_kb(in_dir: str | Path) -> KnowledgeBase:
    src = Path(in_dir)
    try:
        with open(src / "header.json") as fh:
            header = json.load(fh)
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing knowledge base at {src}") from exc
    if header.get("format_version") != KB_FORMAT_VERSION:
        raise ValueError(f"{src}: unsupported KB format {header.get('format_version')}")
    entries = []
    with open(src / "entries.jsonl") as fh:
        for line in fh:
            d = json.loads(line)
            entries.append(KnowledgeEntry(
                entry_id=d["entry_id"],
                passage=as_text(d["passage"]),
                image=None if d["image"] is None else np.asarray(d["image"], dtype=np.float64),
                concept_id=d["concept_id"],
                contains_answer_for=frozenset(d["contains_answer_for"]),
            ))
    raw = np.fromfile(src / "embeddings.bin", dtype=np.float64)
    emb = raw.reshape(header["n"], header["d_emb"])
    return KnowledgeBase(tuple(entries), emb, header["fingerprint"], header["kernel"])
