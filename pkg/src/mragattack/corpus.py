"""Synthetic multimodal corpus and contrastive training of the dual encoder.

Vocabulary layout (fixed bands so downstream code can classify a token
without carrying the corpus around):

    0                  NO_ANSWER (generator fallback)
    1  .. 31           question-word pool (generic, shared by all concepts)
    32 .. 63           filler pool (distractor passages, padding words)
    64 ..              concept words in groups of 1+TOPICS_PER_CONCEPT:
                       group offset 0 is the concept's answer token, the
                       rest are its descriptive topic tokens

Questions are deliberately generic: the image is what identifies the
concept, so retrieval genuinely depends on the visual modality and a
visual attack has something to break. Hard distractors reuse a concept's
KB imagery and topic words but never its answer token, which keeps the
relevant-vs-irrelevant ranking margin realistic instead of trivial.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import DualEncoder, init_dual_encoder, as_text
from .numerics import SeededRng

NO_ANSWER_TOKEN = 0
QUESTION_TEMPLATE = (1, 2, 3)  # "what is this": identical for every concept
FILLER_POOL = tuple(range(32, 56))
CONTENT_MIN_ID = 64

TOPICS_PER_CONCEPT = 3
CONCEPT_GROUP = 1 + TOPICS_PER_CONCEPT
TOPICS_PER_PASSAGE = 2
FILLERS_PER_PASSAGE = 3
DISTRACTOR_LEN = 6
HARD_DISTRACTOR_FRACTION = 0.6

CORPUS_FORMAT_VERSION = 1


def required_vocab_size(n_concepts: int) -> int:
    return CONTENT_MIN_ID + n_concepts * CONCEPT_GROUP


def is_answer_token(token: int) -> bool:
    """Answer tokens sit at offset 0 of each concept group above CONTENT_MIN_ID."""
    return token >= CONTENT_MIN_ID and (token - CONTENT_MIN_ID) % CONCEPT_GROUP == 0


@dataclass(frozen=True)
class ConceptSpec:
    concept_id: int
    image_prototype: np.ndarray      # what user/query photos of the concept look like
    kb_image_prototype: np.ndarray   # what knowledge-base photos of it look like
    answer_token: int
    caption_tokens: tuple
    question_tokens: tuple


@dataclass(frozen=True)
class QuerySample:
    query_id: int
    image: np.ndarray
    text: tuple
    gold_answers: frozenset
    concept_id: int
    caption_tokens: tuple  # clean-image caption, needed by the stage-2 attack


@dataclass(frozen=True)
class KnowledgeEntry:
    entry_id: int
    passage: tuple
    image: np.ndarray | None
    concept_id: int
    contains_answer_for: frozenset = frozenset()


@dataclass(frozen=True)
class Corpus:
    concepts: tuple
    queries: tuple
    entries: tuple
    vocab_size: int
    d_img: int
    params: dict = field(default_factory=dict)

    def concept(self, concept_id: int) -> ConceptSpec:
        return self.concepts[concept_id]


def _noisy_image(prototype: np.ndarray, rng: SeededRng, amplitude: float) -> np.ndarray:
    img = prototype + rng.uniform(-amplitude, amplitude, prototype.shape[0])
    return np.clip(img, 0.0, 1.0)


def _dense_prototype(rng: SeededRng, d_img: int, base: float, contrast: float) -> np.ndarray:
    """Dim texture whose concept identity is a dense low-contrast pattern.

    Every pixel carries a small +-contrast bit of the concept signature on
    a shared base level. Spreading the signal thin is what separates the
    two noise regimes: i.i.d. noise at the same amplitude averages out
    across pixels, while a coherent signed perturbation can rewrite a
    large fraction of the signature. The contrast must stay above base/3
    so prototype pairs keep cosine below 0.9.
    """
    bits = rng.integers(0, 2, d_img) * 2 - 1
    return base + contrast * bits.astype(np.float64)


def synth_corpus(n_concepts: int, queries_per_concept: int, passages_per_concept: int,
                 distractor_passages: int, rng: SeededRng, *,
                 d_img: int = 768, image_noise: float = 0.1,
                 image_base: float = 0.16, image_contrast: float = 0.06,
                 vocab_size: int | None = None) -> Corpus:
    """Generate a ground-truth-labeled corpus, deterministic given the rng seed.

    Every query has >= 1 relevant passage (relevance = the passage contains
    the query's answer token); distractors never contain answer tokens.
    """
    if n_concepts < 1 or queries_per_concept < 1 or passages_per_concept < 1:
        raise ValueError("concept/query/passage counts must be >= 1")
    if distractor_passages < 0:
        raise ValueError("distractor_passages must be >= 0")
    needed = required_vocab_size(n_concepts)
    if vocab_size is None:
        vocab_size = needed
    elif vocab_size < needed:
        raise ValueError(
            f"vocabulary too small: need {needed} ids for {n_concepts} concepts, got {vocab_size}")

    if not (0.0 <= image_base - image_contrast and image_base + image_contrast <= 1.0):
        raise ValueError("image_base/image_contrast leave the [0, 1] pixel range")

    proto_rng = rng.derive("prototypes")
    concepts = []
    for c in range(n_concepts):
        # query photos and KB photos of one concept are unrelated renderings;
        # only training ties them together, through the shared text
        prototype = _dense_prototype(proto_rng, d_img, image_base, image_contrast)
        kb_prototype = _dense_prototype(proto_rng, d_img, image_base, image_contrast)
        group = CONTENT_MIN_ID + CONCEPT_GROUP * c
        answer = group
        topics = tuple(group + 1 + j for j in range(TOPICS_PER_CONCEPT))
        caption = topics + (answer,)
        # questions are a shared template: the image alone identifies the
        # concept, which is what makes a pure visual attack meaningful
        concepts.append(ConceptSpec(c, prototype, kb_prototype, answer, caption,
                                    QUESTION_TEMPLATE))

    # prototypes must stay visually distinct
    for attr in ("image_prototype", "kb_image_prototype"):
        protos = np.stack([getattr(c, attr) for c in concepts])
        norms = np.linalg.norm(protos, axis=1)
        gram = (protos @ protos.T) / np.outer(norms, norms)
        np.fill_diagonal(gram, 0.0)
        if concepts and float(gram.max(initial=0.0)) >= 0.9:
            raise ValueError("prototype cosine >= 0.9; retry with a different seed")

    queries = []
    qrng = rng.derive("queries")
    for c in concepts:
        for j in range(queries_per_concept):
            qid = c.concept_id * queries_per_concept + j
            image = _noisy_image(c.image_prototype, qrng, image_noise)
            queries.append(QuerySample(
                query_id=qid,
                image=image,
                text=c.question_tokens,
                gold_answers=frozenset({c.answer_token}),
                concept_id=c.concept_id,
                caption_tokens=c.caption_tokens,
            ))

    entries = []
    erng = rng.derive("entries")
    eid = 0
    for c in concepts:
        for _ in range(passages_per_concept):
            topics = tuple(int(t) for t in erng.choice(c.caption_tokens[:-1],
                                                       TOPICS_PER_PASSAGE, replace=False))
            fillers = tuple(int(t) for t in erng.choice(FILLER_POOL,
                                                        FILLERS_PER_PASSAGE, replace=False))
            passage = (c.answer_token,) + topics + fillers
            image = _noisy_image(c.kb_image_prototype, erng, image_noise)
            relevant_for = frozenset(q.query_id for q in queries if q.concept_id == c.concept_id)
            entries.append(KnowledgeEntry(eid, passage, image, c.concept_id, relevant_for))
            eid += 1
    # most distractors are hard negatives: same KB imagery and topic words
    # as a concept but never its answer token -- passages about the right
    # entity that still cannot answer the question. they keep the
    # relevant-vs-irrelevant margin realistic instead of trivial
    drng = rng.derive("distractors")
    for _ in range(distractor_passages):
        if float(drng.uniform(0.0, 1.0)) < HARD_DISTRACTOR_FRACTION:
            c = concepts[int(drng.integers(0, n_concepts))]
            topics = tuple(int(t) for t in drng.choice(c.caption_tokens[:-1],
                                                       TOPICS_PER_PASSAGE, replace=False))
            fillers = tuple(int(t) for t in drng.choice(
                FILLER_POOL, DISTRACTOR_LEN - TOPICS_PER_PASSAGE, replace=False))
            image = _noisy_image(c.kb_image_prototype, drng, image_noise)
            entries.append(KnowledgeEntry(eid, topics + fillers, image,
                                          c.concept_id, frozenset()))
        else:
            passage = tuple(int(t) for t in drng.choice(FILLER_POOL, DISTRACTOR_LEN,
                                                        replace=False))
            entries.append(KnowledgeEntry(eid, passage, None, -1, frozenset()))
        eid += 1

    for c in concepts:
        owned = [e for e in entries if e.concept_id == c.concept_id]
        assert any(c.answer_token in e.passage for e in owned)

    params = {
        "n_concepts": n_concepts,
        "queries_per_concept": queries_per_concept,
        "passages_per_concept": passages_per_concept,
        "distractor_passages": distractor_passages,
        "d_img": d_img,
        "image_noise": image_noise,
        "image_base": image_base,
        "image_contrast": image_contrast,
        "seed": rng.seed,
    }
    return Corpus(tuple(concepts), tuple(queries), tuple(entries), vocab_size, d_img, params)


# ---------------------------------------------------------------------------
# Contrastive training (plain SGD, hand-written backprop, fully deterministic).


def _pool_matrix(token_table: np.ndarray, seqs: list) -> np.ndarray:
    out = np.empty((len(seqs), token_table.shape[1]))
    for i, seq in enumerate(seqs):
        out[i] = token_table[list(seq)].mean(axis=0)
    return out


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def info_nce_pair(a: np.ndarray, b: np.ndarray, temperature: float):
    """Symmetric in-batch InfoNCE on cosine logits.

    Returns (loss, dloss/da, dloss/db). Row i of ``a`` is positive with
    row i of ``b``; everything else in the batch is a negative.
    """
    n = a.shape[0]
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("zero-norm embedding in contrastive batch")
    an = a / na
    bn = b / nb
    s = (an @ bn.T) / temperature

    def ce_rows(m):
        z = m - m.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1)) + m.max(axis=1)
        return float(np.mean(lse - np.diag(m)))

    loss = 0.5 * (ce_rows(s) + ce_rows(s.T))
    eye = np.eye(n)
    g = (0.5 / n) * (_softmax_rows(s) - eye) + (0.5 / n) * (_softmax_rows(s.T) - eye).T
    dan = (g @ bn) / temperature
    dbn = (g.T @ an) / temperature
    da = (dan - (dan * an).sum(axis=1, keepdims=True) * an) / na
    db = (dbn - (dbn * bn).sum(axis=1, keepdims=True) * bn) / nb
    return loss, da, db


def _stratified_batches(order, queries, batch_size):
    """Pack shuffled query indices into batches with no concept repeated.

    Same-concept queries share a caption, so putting two in one batch would
    make them in-batch negatives of an identical positive and push their
    image embeddings apart -- the opposite of what retrieval needs.
    """
    batches: list[list[int]] = []
    open_batches: list[tuple[list[int], set]] = []
    for i in order:
        cid = queries[int(i)].concept_id
        placed = False
        for idx, seen in open_batches:
            if cid not in seen:
                idx.append(int(i))
                seen.add(cid)
                if len(idx) == batch_size:
                    batches.append(idx)
                    open_batches.remove((idx, seen))
                placed = True
                break
        if not placed:
            open_batches.append(([int(i)], {cid}))
    batches.extend(idx for idx, _ in open_batches)
    return batches


def _image_forward(w, x):
    h = np.tanh(x @ w["w_img"].T)
    return h @ w["w_img2"].T, h


def _image_backward(w, grads, x, h, demb):
    grads["w_img2"] += demb.T @ h
    dh = demb @ w["w_img2"]
    dpre = dh * (1.0 - h * h)
    grads["w_img"] += dpre.T @ x


def _text_backward(w, grads, seqs, pooled, demb):
    grads["w_txt"] += demb.T @ pooled
    dpool = demb @ w["w_txt"]
    for i, seq in enumerate(seqs):
        np.add.at(grads["token_table"], list(seq), dpool[i] / len(seq))


REGIMES = ("off_the_shelf", "finetuned")
OFF_THE_SHELF_FRACTION = 0.1


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 40
    lr: float = 0.5
    batch_size: int = 32
    hidden_dim: int = 128
    d_emb: int = 64
    d_tok: int = 32
    temperature: float = 0.07


def train_encoder(corpus: "Corpus", params: TrainParams, regime: str,
                  rng: SeededRng) -> DualEncoder:
    return train_dual_encoder(
        corpus, params.epochs, params.lr, regime, rng,
        batch_size=params.batch_size, temperature=params.temperature,
        hidden_dim=params.hidden_dim, d_emb=params.d_emb, d_tok=params.d_tok)


def train_dual_encoder(corpus: Corpus, epochs: int, lr: float, regime: str,
                       rng: SeededRng, *, batch_size: int = 32,
                       temperature: float = 0.07, hidden_dim: int = 128,
                       d_emb: int = 64, d_tok: int = 32) -> DualEncoder:
    """Train the dual encoder on the corpus with symmetric in-batch InfoNCE.

    Three alignment terms share the loss equally: (image, caption text),
    (multimodal query, relevant knowledge-base entry), and (image,
    caption-head output). ``off_the_shelf`` runs 10% of the requested
    epochs, mimicking an under-adapted retriever; ``finetuned`` runs all
    of them. epochs=0 returns the initialization unchanged.
    """
    if not corpus.queries:
        raise ValueError("corpus has no queries")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    n_epochs = epochs if regime == "finetuned" else int(round(epochs * OFF_THE_SHELF_FRACTION))

    init = init_dual_encoder(rng.derive("init"), corpus.d_img, d_emb, corpus.vocab_size,
                             hidden_dim=hidden_dim, d_tok=d_tok)
    w = {name: np.array(getattr(init, name)) for name in
         ("w_img", "w_img2", "token_table", "w_txt", "w_cap")}

    by_concept: dict[int, list[KnowledgeEntry]] = {}
    for e in corpus.entries:
        if e.concept_id >= 0:
            by_concept.setdefault(e.concept_id, []).append(e)
    for q in corpus.queries:
        if q.concept_id not in by_concept:
            raise ValueError(f"query {q.query_id} has no relevant entries")

    n = len(corpus.queries)
    order_rng = rng.derive("batching")
    epoch_losses = []
    step_index = 0
    for epoch in range(n_epochs):
        order = order_rng.permutation(n)
        batches = _stratified_batches(order, corpus.queries, batch_size)
        batch_losses = []
        for idx in batches:
            if len(idx) < 2:
                continue  # a single sample has no in-batch negatives
            batch = [corpus.queries[i] for i in idx]
            rel = [by_concept[q.concept_id] for q in batch]
            picks = [r[int(order_rng.integers(0, len(r)))] for r in rel]

            # caption terms alternate between query photos and KB photos so
            # the caption head sees both renderings of a concept but a batch
            # never holds two images of one concept (identical captions would
            # become impossible negatives and push the pair apart). the
            # query-passage term is DPR-style text alignment: everything
            # meets in one text-anchored space, no separate image-image
            # shortcut survives outside it
            use_kb_images = step_index % 2 == 1
            x_q = np.stack([q.image for q in batch])
            if use_kb_images:
                x_cap = np.stack([p.image if p.image is not None else np.zeros(corpus.d_img)
                                  for p in picks])
            else:
                x_cap = x_q
            cap_seqs = [q.caption_tokens for q in batch]
            qry_seqs = [q.text for q in batch]
            psg_seqs = [p.passage for p in picks]
            step_index += 1

            img_q, h_q = _image_forward(w, x_q)
            if use_kb_images:
                img_cap, h_cap = _image_forward(w, x_cap)
            else:
                img_cap, h_cap = img_q, h_q
            p_cap = _pool_matrix(w["token_table"], cap_seqs)
            p_qry = _pool_matrix(w["token_table"], qry_seqs)
            p_psg = _pool_matrix(w["token_table"], psg_seqs)
            t_cap = p_cap @ w["w_txt"].T
            t_qry = p_qry @ w["w_txt"].T
            t_psg = p_psg @ w["w_txt"].T
            cap_head = x_cap @ w["w_cap"].T
            multi_q = img_q + t_qry

            l1, da1, db1 = info_nce_pair(img_cap, t_cap, temperature)
            l2, da2, db2 = info_nce_pair(multi_q, t_psg, temperature)
            l3, da3, db3 = info_nce_pair(img_cap, cap_head, temperature)
            loss = (l1 + l2 + l3) / 3.0
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged (non-finite loss) at epoch {epoch}")
            batch_losses.append(loss)

            grads = {name: np.zeros_like(arr) for name, arr in w.items()}
            d_img_cap = (da1 + da3) / 3.0
            if use_kb_images:
                _image_backward(w, grads, x_q, h_q, da2 / 3.0)
                _image_backward(w, grads, x_cap, h_cap, d_img_cap)
            else:
                _image_backward(w, grads, x_q, h_q, d_img_cap + da2 / 3.0)
            _text_backward(w, grads, cap_seqs, p_cap, db1 / 3.0)
            _text_backward(w, grads, qry_seqs, p_qry, da2 / 3.0)
            _text_backward(w, grads, psg_seqs, p_psg, db2 / 3.0)
            grads["w_cap"] += (db3 / 3.0).T @ x_cap

            for name in w:
                w[name] -= lr * grads[name]

        epoch_losses.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))

    meta = {
        "regime": regime,
        "epochs_requested": epochs,
        "epochs_run": n_epochs,
        "lr": lr,
        "batch_size": batch_size,
        "temperature": temperature,
        "epoch_losses": epoch_losses,
        "corpus_seed": corpus.params.get("seed"),
    }
    return DualEncoder(w["w_img"], w["w_img2"], w["token_table"], w["w_txt"], w["w_cap"],
                       seed=rng.seed, meta=meta)


# ---------------------------------------------------------------------------
# Serialization: JSON-lines for queries/entries, JSON for concepts/params.


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "queries.jsonl", "w") as fh:
        for q in corpus.queries:
            fh.write(_dump({
                "query_id": q.query_id,
                "image": q.image.tolist(),
                "text": list(q.text),
                "gold_answers": sorted(q.gold_answers),
                "concept_id": q.concept_id,
                "caption_tokens": list(q.caption_tokens),
            }) + "\n")
    with open(out / "entries.jsonl", "w") as fh:
        for e in corpus.entries:
            fh.write(_dump({
                "entry_id": e.entry_id,
                "passage": list(e.passage),
                "image": None if e.image is None else e.image.tolist(),
                "concept_id": e.concept_id,
                "contains_answer_for": sorted(e.contains_answer_for),
            }) + "\n")
    meta = {
        "format_version": CORPUS_FORMAT_VERSION,
        "vocab_size": corpus.vocab_size,
        "d_img": corpus.d_img,
        "params": corpus.params,
        "concepts": [{
            "concept_id": c.concept_id,
            "image_prototype": c.image_prototype.tolist(),
            "kb_image_prototype": c.kb_image_prototype.tolist(),
            "answer_token": c.answer_token,
            "caption_tokens": list(c.caption_tokens),
            "question_tokens": list(c.question_tokens),
        } for c in corpus.concepts],
    }
    with open(out / "meta.json", "w") as fh:
        fh.write(_dump(meta))


def load_corpus(in_dir: str | Path) -> Corpus:
    src = Path(in_dir)
    with open(src / "meta.json") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != CORPUS_FORMAT_VERSION:
        raise ValueError(f"{src}: unsupported corpus format {meta.get('format_version')}")
    concepts = tuple(ConceptSpec(
        concept_id=c["concept_id"],
        image_prototype=np.asarray(c["image_prototype"], dtype=np.float64),
        kb_image_prototype=np.asarray(c["kb_image_prototype"], dtype=np.float64),
        answer_token=c["answer_token"],
        caption_tokens=as_text(c["caption_tokens"]),
        question_tokens=as_text(c["question_tokens"]),
    ) for c in meta["concepts"])
    queries = []
    with open(src / "queries.jsonl") as fh:
        for line in fh:
            d = json.loads(line)
            queries.append(QuerySample(
                query_id=d["query_id"],
                image=np.asarray(d["image"], dtype=np.float64),
                text=as_text(d["text"]),
                gold_answers=frozenset(d["gold_answers"]),
                concept_id=d["concept_id"],
                caption_tokens=as_text(d["caption_tokens"]),
            ))
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
    return Corpus(concepts, tuple(queries), tuple(entries),
                  meta["vocab_size"], meta["d_img"], meta["params"])
