"""Differentiable toy dual encoder.

Three heads share one embedding space:

* image path   tanh(W_img @ pixels) -> W_img2            (nonlinear)
* text path    mean-pooled token embeddings -> W_txt     (linear in pool)
* caption path W_cap @ pixels                            (linear)

The caption path is a single trained map standing in for "caption the
image, then embed the caption text"; it is what makes losses over caption
embeddings differentiable with respect to pixels.

``loss_vjp`` returns exact reverse-mode gradients of a small family of
scalar losses with respect to the input image; tests check it against the
finite-difference oracle in :mod:`mragattack.numerics`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .numerics import SeededRng, as_vector

CHECKPOINT_VERSION = 1
MAX_TEXT_LEN = 256

TextSequence = tuple  # tuple[int, ...]


def as_text(tokens, vocab_size: int | None = None) -> tuple:
    t = tuple(int(x) for x in tokens)
    if not t:
        raise ValueError("text sequence must be nonempty")
    if len(t) > MAX_TEXT_LEN:
        raise ValueError(f"text sequence longer than {MAX_TEXT_LEN}")
    if any(x < 0 for x in t):
        raise ValueError("token ids must be non-negative")
    if vocab_size is not None and any(x >= vocab_size for x in t):
        bad = [x for x in t if x >= vocab_size]
        raise ValueError(f"token ids {bad} out of vocabulary (size {vocab_size})")
    return t


def as_image(pixels, d_img: int | None = None) -> np.ndarray:
    return as_vector(pixels, dim=d_img, name="image")


@dataclass(frozen=True)
class DualEncoder:
    """Immutable weights of the image/text/caption encoder heads."""

    w_img: np.ndarray    # hidden x d_img
    w_img2: np.ndarray   # d_emb x hidden
    token_table: np.ndarray  # vocab x d_tok
    w_txt: np.ndarray    # d_emb x d_tok
    w_cap: np.ndarray    # d_emb x d_img
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("w_img", "w_img2", "token_table", "w_txt", "w_cap"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite weights")
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.w_img2.shape[1] != self.w_img.shape[0]:
            raise ValueError("w_img/w_img2 hidden dims disagree")
        d = self.d_emb
        if self.w_txt.shape[0] != d or self.w_cap.shape[0] != d:
            raise ValueError("embedding dims of the three heads disagree")
        if self.w_cap.shape[1] != self.d_img:
            raise ValueError("w_cap/w_img image dims disagree")
        if self.w_txt.shape[1] != self.token_table.shape[1]:
            raise ValueError("w_txt/token_table token dims disagree")

    @property
    def d_img(self) -> int:
        return self.w_img.shape[1]

    @property
    def d_emb(self) -> int:
        return self.w_img2.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_img.shape[0]

    @property
    def d_tok(self) -> int:
        return self.token_table.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]


def _uniform_fan_in(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, (rows, cols))


def init_dual_encoder(rng: SeededRng, d_img: int, d_emb: int, vocab_size: int,
                      hidden_dim: int = 128, d_tok: int = 32,
                      meta: dict | None = None) -> DualEncoder:
    """Fresh encoder with deterministic uniform(+-1/sqrt(fan_in)) weights."""
    return DualEncoder(
        w_img=_uniform_fan_in(rng, hidden_dim, d_img),
        w_img2=_uniform_fan_in(rng, d_emb, hidden_dim),
        token_table=_uniform_fan_in(rng, vocab_size, d_tok),
        w_txt=_uniform_fan_in(rng, d_emb, d_tok),
        w_cap=_uniform_fan_in(rng, d_emb, d_img),
        seed=rng.seed,
        meta=dict(meta or {}),
    )


def encode_image(enc: DualEncoder, image) -> np.ndarray:
    image = as_image(image, enc.d_img)
    return enc.w_img2 @ np.tanh(enc.w_img @ image)


def encode_text(enc: DualEncoder, tokens) -> np.ndarray:
    tokens = as_text(tokens, enc.vocab_size)
    pooled = enc.token_table[list(tokens)].mean(axis=0)
    return enc.w_txt @ pooled


def caption_embed(enc: DualEncoder, image) -> np.ndarray:
    image = as_image(image, enc.d_img)
    return enc.w_cap @ image


def multimodal_embed(enc: DualEncoder, image, tokens) -> np.ndarray:
    return encode_image(enc, image) + encode_text(enc, tokens)


def text_with_caption_embed(enc: DualEncoder, tokens, image, caption_len: int) -> np.ndarray:
    """Embedding of ``tokens`` followed by the caption of ``image``.

    Under mean pooling, encoding the concatenation of an m-token text with
    an n-token caption equals the length-weighted average of the two
    encodings, so the differentiable caption head can stand in for the
    caption's text embedding:

        (m * E_t(tokens) + n * caption_embed(image)) / (m + n)
    """
    tokens = as_text(tokens, enc.vocab_size)
    if caption_len < 1:
        raise ValueError("caption_len must be >= 1")
    m = len(tokens)
    n = int(caption_len)
    return (m * encode_text(enc, tokens) + n * caption_embed(enc, image)) / (m + n)


# ---------------------------------------------------------------------------
# Loss specifications and reverse-mode gradients w.r.t. the input image.


@dataclass(frozen=True)
class ImagePath:
    """Image-dependent embedding f(I) = a*E_i(I) + b*(W_cap I) + offset."""

    image_coeff: float = 1.0
    caption_coeff: float = 0.0
    offset: np.ndarray | None = None


@dataclass(frozen=True)
class DotLoss:
    """loss = coeffs . f(I)"""

    path: ImagePath
    coeffs: np.ndarray


@dataclass(frozen=True)
class SimLoss:
    """loss = scale * sim(f(I), anchor)"""

    path: ImagePath
    anchor: np.ndarray
    scale: float = 1.0
    kernel: str = "cosine"


@dataclass(frozen=True)
class HingeSimLoss:
    """Hinge contrastive loss over two anchors.

    literal_abs:  max(|sim(f, clean) - beta*sim(f, ref)| + gamma, 0)
    directional:  max( sim(f, clean) - beta*sim(f, ref)  + gamma, 0)
    """

    path: ImagePath
    clean_anchor: np.ndarray
    ref_anchor: np.ndarray
    beta: float
    gamma: float
    variant: str = "literal_abs"
    kernel: str = "cosine"


@dataclass(frozen=True)
class VjpResult:
    value: float
    grad_image: np.ndarray


def _path_forward(enc: DualEncoder, path: ImagePath, image: np.ndarray):
    hidden = np.tanh(enc.w_img @ image)
    f = path.image_coeff * (enc.w_img2 @ hidden) + path.caption_coeff * (enc.w_cap @ image)
    if path.offset is not None:
        f = f + as_vector(path.offset, dim=enc.d_emb, name="path offset")
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite embedding in image path forward")
    return f, hidden


def _path_vjp(enc: DualEncoder, path: ImagePath, hidden: np.ndarray, fbar: np.ndarray) -> np.ndarray:
    grad = np.zeros(enc.d_img)
    if path.image_coeff != 0.0:
        gh = enc.w_img2.T @ fbar
        gpre = gh * (1.0 - hidden * hidden)  # d tanh
        grad += path.image_coeff * (enc.w_img.T @ gpre)
    if path.caption_coeff != 0.0:
        grad += path.caption_coeff * (enc.w_cap.T @ fbar)
    return grad


def _sim_value_grad(f: np.ndarray, anchor: np.ndarray, kernel: str):
    """Similarity value and its gradient w.r.t. f."""
    anchor = np.asarray(anchor, dtype=np.float64)
    if kernel == "dot":
        return float(f @ anchor), anchor
    if kernel != "cosine":
        raise ValueError(f"unknown similarity kernel {kernel!r}")
    nf = float(np.linalg.norm(f))
    na = float(np.linalg.norm(anchor))
    if nf == 0.0 or na == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm embedding")
    s = float(f @ anchor) / (nf * na)
    grad = anchor / (nf * na) - (s / (nf * nf)) * f
    return s, grad


def hinge_from_sims(clean_sim: float, ref_sim: float, beta: float, gamma: float,
                    variant: str = "literal_abs"):
    """(value, d value / d clean_sim, d value / d ref_sim)."""
    x = clean_sim - beta * ref_sim
    if variant == "literal_abs":
        raw = abs(x) + gamma
        if raw <= 0.0:
            return 0.0, 0.0, 0.0
        dx = float(np.sign(x))
        return raw, dx, -beta * dx
    if variant == "directional":
        raw = x + gamma
        if raw <= 0.0:
            return 0.0, 0.0, 0.0
        return raw, 1.0, -beta
    raise ValueError(f"unknown loss variant {variant!r}")


def _loss_value_grad(enc: DualEncoder, spec, image: np.ndarray):
    """Shared forward/backward; returns (value, grad_image, aux sims)."""
    image = as_image(image, enc.d_img)
    f, hidden = _path_forward(enc, spec.path, image)
    aux = {}
    if isinstance(spec, DotLoss):
        coeffs = as_vector(spec.coeffs, dim=enc.d_emb, name="coeffs")
        value = float(f @ coeffs)
        fbar = coeffs
    elif isinstance(spec, SimLoss):
        s, ds = _sim_value_grad(f, spec.anchor, spec.kernel)
        value = spec.scale * s
        fbar = spec.scale * ds
        aux["sim"] = s
    elif isinstance(spec, HingeSimLoss):
        cs, dcs = _sim_value_grad(f, spec.clean_anchor, spec.kernel)
        rs, drs = _sim_value_grad(f, spec.ref_anchor, spec.kernel)
        value, dclean, dref = hinge_from_sims(cs, rs, spec.beta, spec.gamma, spec.variant)
        fbar = dclean * dcs + dref * drs
        aux["clean_sim"] = cs
        aux["ref_sim"] = rs
    else:
        raise TypeError(f"unsupported loss spec {type(spec).__name__}")
    if not np.isfinite(value):
        raise ValueError("non-finite loss value at scalar head")
    grad = _path_vjp(enc, spec.path, hidden, fbar)
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient in image-path backward")
    return value, grad, aux


def loss_vjp(enc: DualEncoder, spec, image) -> VjpResult:
    """Exact analytic gradient of a scalar loss w.r.t. the image pixels."""
    value, grad, _ = _loss_value_grad(enc, spec, image)
    return VjpResult(value=value, grad_image=grad)


# ---------------------------------------------------------------------------
# Checkpoint serialization (bit-exact round trip, deterministic bytes).


def encoder_fingerprint(enc: DualEncoder) -> str:
    h = hashlib.sha256()
    for name in ("w_img", "w_img2", "token_table", "w_txt", "w_cap"):
        arr = getattr(enc, name)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_encoder(enc: DualEncoder, path: str | Path) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "dual_encoder",
        "d_emb": enc.d_emb,
        "d_img": enc.d_img,
        "vocab_size": enc.vocab_size,
        "seed": enc.seed,
        "meta": enc.meta,
        "fingerprint": encoder_fingerprint(enc),
    }
    arrays = {name: getattr(enc, name)
              for name in ("w_img", "w_img2", "token_table", "w_txt", "w_cap")}
    binio.write_arrays(path, header, arrays)


def load_encoder(path: str | Path) -> DualEncoder:
    header, arrays = binio.read_arrays(path)
    if header.get("kind") != "dual_encoder":
        raise ValueError(f"{path}: not an encoder checkpoint")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    enc = DualEncoder(
        w_img=arrays["w_img"],
        w_img2=arrays["w_img2"],
        token_table=arrays["token_table"],
        w_txt=arrays["w_txt"],
        w_cap=arrays["w_cap"],
        seed=int(header["seed"]),
        meta=dict(header["meta"]),
    )
    if encoder_fingerprint(enc) != header["fingerprint"]:
        raise ValueError(f"{path}: checkpoint fingerprint mismatch (corrupt file?)")
    return enc
