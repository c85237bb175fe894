"""The trainable core: two feed-forward heads, the weighted multi-task
loss, exact analytic gradients, and Adam.

Mention detection scores each piece over the three tags (I=0, O=1, B=2):

    logits_i = md_weight @ h_i + md_bias        (3,)
    probs_i  = softmax(logits_i)
    tag_i    = argmax(probs_i)                  ties -> lowest index

Disambiguation projects each piece into entity-embedding space:

    proj_i = tanh(ed_weight @ h_i + ed_bias)    (d,)

The joint objective, with the mix factor w named ``md_loss_weight``:

    J = w * L_md + (1 - w) * L_ed

L_md is the mean cross-entropy over all non-pad head pieces; L_ed is the
mean (1 - cosine) between projections and gold entity embeddings over the
first piece of each linkable mention.  Dropout (inverted scaling,
independent masks per head) is applied to the head inputs during training
only.  All arithmetic is 64-bit.
"""

import json
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, NamedTuple

import numpy as np

from .errors import NonFiniteError, ParseError, ValidationError

N_TAGS = 3
COSINE_EPS = 1e-12

CHECKPOINT_MAGIC = b"ELCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HeadParams:
    """Parameters of both heads; also the shape of gradients and moments."""

    md_weight: np.ndarray  # (3, m)
    md_bias: np.ndarray    # (3,)
    ed_weight: np.ndarray  # (d, m)
    ed_bias: np.ndarray    # (d,)

    @property
    def m(self) -> int:
        return self.md_weight.shape[1]

    @property
    def d(self) -> int:
        return self.ed_weight.shape[0]

    def validate(self):
        for name, arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{name} contains non-finite values")
        if self.md_weight.shape[0] != N_TAGS or self.md_bias.shape != (N_TAGS,):
            raise ValidationError("mention head must map to 3 tags")
        if self.ed_weight.shape != (self.d, self.m) or self.ed_bias.shape != (self.d,):
            raise ValidationError("disambiguation head shapes are inconsistent")

    def arrays(self):
        return (("md_weight", self.md_weight), ("md_bias", self.md_bias),
                ("ed_weight", self.ed_weight), ("ed_bias", self.ed_bias))


def init_params(m: int, d: int, seed: int) -> HeadParams:
    """Glorot-uniform weights, zero biases, fully seeded."""
    rng = np.random.default_rng([seed, 0xA11])
    a_md = np.sqrt(6.0 / (m + N_TAGS))
    a_ed = np.sqrt(6.0 / (m + d))
    params = HeadParams(
        md_weight=rng.uniform(-a_md, a_md, size=(N_TAGS, m)),
        md_bias=np.zeros(N_TAGS),
        ed_weight=rng.uniform(-a_ed, a_ed, size=(d, m)),
        ed_bias=np.zeros(d),
    )
    params.validate()
    return params


def zeros_like_params(params: HeadParams) -> HeadParams:
    return HeadParams(*(np.zeros_like(arr) for _, arr in params.arrays()))


class DropoutMasks(NamedTuple):
    """Pre-scaled multiplicative masks (values 0 or 1/(1-rate)), one per head."""

    md: np.ndarray  # (p, m)
    ed: np.ndarray  # (p, m)


def sample_dropout_masks(rng: np.random.Generator, p: int, m: int,
                         rate: float) -> DropoutMasks | None:
    """Independent inverted-dropout masks for the two heads; None if rate=0."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return None
    scale = 1.0 / (1.0 - rate)
    md = (rng.random((p, m)) >= rate) * scale
    ed = (rng.random((p, m)) >= rate) * scale
    return DropoutMasks(md, ed)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def md_forward(H: np.ndarray, params: HeadParams,
               mask: np.ndarray | None = None):
    """Per-piece tag logits, probabilities and argmax tags."""
    if not np.all(np.isfinite(H)):
        raise NonFiniteError("context matrix contains non-finite values")
    x = H if mask is None else H * mask
    logits = x @ params.md_weight.T + params.md_bias
    probs = softmax_rows(logits)
    tags = np.argmax(probs, axis=1)  # argmax takes the lowest index on ties
    return logits, probs, tags


def ed_forward(H: np.ndarray, params: HeadParams,
               mask: np.ndarray | None = None) -> np.ndarray:
    """Per-piece projection into entity space, rows in (-1, 1)."""
    if not np.all(np.isfinite(H)):
        raise NonFiniteError("context matrix contains non-finite values")
    x = H if mask is None else H * mask
    return np.tanh(x @ params.ed_weight.T + params.ed_bias)


@dataclass(frozen=True)
class LossBreakdown:
    md_loss: float
    ed_loss: float
    total: float
    md_count: int
    ed_count: int


@dataclass(frozen=True)
class LossTerms:
    """Unnormalized per-window loss sums, composable across a batch."""

    md_sum: float
    md_count: int
    ed_sum: float
    ed_count: int

    def __add__(self, other: "LossTerms") -> "LossTerms":
        return LossTerms(self.md_sum + other.md_sum,
                         self.md_count + other.md_count,
                         self.ed_sum + other.ed_sum,
                         self.ed_count + other.ed_count)


ZERO_TERMS = LossTerms(0.0, 0, 0.0, 0)


@dataclass(frozen=True)
class GradTerms:
    """Gradients of the unnormalized loss sums (before weighting by the
    objective mix and the contribution counts)."""

    md: HeadParams
    ed: HeadParams


def _check_inputs(H, md_labels, ed_mask, ed_targets, params, md_loss_weight):
    if not 0.0 <= md_loss_weight <= 1.0:
        raise ValidationError(f"loss weight {md_loss_weight} outside [0, 1]")
    params.validate()
    p = H.shape[0]
    if H.shape[1] != params.m:
        raise ValidationError(f"H width {H.shape[1]} != head width {params.m}")
    if md_labels.shape != (p,) or ed_mask.shape != (p,):
        raise ValidationError("label arrays must have one entry per piece")
    if ed_targets.shape != (p, params.d):
        raise ValidationError(
            f"entity targets must be {p}x{params.d}, got {ed_targets.shape}"
        )
    if not np.all(np.isfinite(H)):
        raise NonFiniteError("context matrix contains non-finite values")
    active = np.flatnonzero(ed_mask)
    if active.size:
        norms = np.linalg.norm(ed_targets[active], axis=1)
        if np.any(norms == 0.0):
            raise ValidationError("entity target row with zero norm")


def _guarded_cosine(proj: np.ndarray, targets: np.ndarray):
    """Row-wise cos(a,b) = a.b / (max(|a|,eps) * max(|b|,eps)) plus the
    pieces its gradient needs."""
    dots = np.einsum("ij,ij->i", proj, targets)
    proj_norm = np.linalg.norm(proj, axis=1)
    tgt_norm = np.linalg.norm(targets, axis=1)
    proj_guard = np.maximum(proj_norm, COSINE_EPS)
    tgt_guard = np.maximum(tgt_norm, COSINE_EPS)
    cos = dots / (proj_guard * tgt_guard)
    return cos, dots, proj_norm, proj_guard, tgt_guard


def loss_terms(H: np.ndarray, md_labels: np.ndarray, ed_mask: np.ndarray,
               ed_targets: np.ndarray, params: HeadParams,
               md_loss_weight: float,
               dropout: DropoutMasks | None = None) -> LossTerms:
    """Unnormalized loss sums over one window."""
    _check_inputs(H, md_labels, ed_mask, ed_targets, params, md_loss_weight)
    md_idx = np.flatnonzero(md_labels >= 0)
    ed_idx = np.flatnonzero(ed_mask)

    md_sum = 0.0
    if md_idx.size:
        _, probs, _ = md_forward(H, params, None if dropout is None else dropout.md)
        gold = probs[md_idx, md_labels[md_idx]]
        md_sum = float(-np.log(gold).sum())

    ed_sum = 0.0
    if ed_idx.size:
        proj = ed_forward(H, params, None if dropout is None else dropout.ed)
        cos, _, _, _, _ = _guarded_cosine(proj[ed_idx], ed_targets[ed_idx])
        ed_sum = float((1.0 - cos).sum())

    return LossTerms(md_sum, int(md_idx.size), ed_sum, int(ed_idx.size))


def combine_terms(terms: LossTerms, md_loss_weight: float) -> LossBreakdown:
    """Mean-normalize loss sums and mix them into the joint objective."""
    md_loss = terms.md_sum / terms.md_count if terms.md_count else 0.0
    ed_loss = terms.ed_sum / terms.ed_count if terms.ed_count else 0.0
    total = md_loss_weight * md_loss + (1.0 - md_loss_weight) * ed_loss
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite loss (md={md_loss}, ed={ed_loss})")
    return LossBreakdown(md_loss, ed_loss, total, terms.md_count, terms.ed_count)


def compute_loss(H: np.ndarray, md_labels: np.ndarray, ed_mask: np.ndarray,
                 ed_targets: np.ndarray, params: HeadParams,
                 md_loss_weight: float,
                 dropout: DropoutMasks | None = None) -> LossBreakdown:
    """Joint objective over one window (counts normalize within the window)."""
    return combine_terms(
        loss_terms(H, md_labels, ed_mask, ed_targets, params, md_loss_weight, dropout),
        md_loss_weight,
    )


def grad_terms(H: np.ndarray, md_labels: np.ndarray, ed_mask: np.ndarray,
               ed_targets: np.ndarray, params: HeadParams,
               md_loss_weight: float,
               dropout: DropoutMasks | None = None
               ) -> tuple[LossTerms, GradTerms]:
    """Loss sums plus exact gradients of those sums for one window.

    The same dropout masks must be passed here and to loss_terms for the
    two to describe the same function.
    """
    _check_inputs(H, md_labels, ed_mask, ed_targets, params, md_loss_weight)
    p = H.shape[0]
    md_idx = np.flatnonzero(md_labels >= 0)
    ed_idx = np.flatnonzero(ed_mask)

    md_sum = 0.0
    gw_md = np.zeros_like(params.md_weight)
    gb_md = np.zeros_like(params.md_bias)
    if md_idx.size:
        x_md = H if dropout is None else H * dropout.md
        logits = x_md @ params.md_weight.T + params.md_bias
        probs = softmax_rows(logits)
        gold = probs[md_idx, md_labels[md_idx]]
        md_sum = float(-np.log(gold).sum())
        # d(sum of -log p[gold])/dlogits = probs - onehot on contributing rows
        dlogits = probs.copy()
        dlogits[md_idx, md_labels[md_idx]] -= 1.0
        keep = np.zeros(p, dtype=bool)
        keep[md_idx] = True
        dlogits[~keep] = 0.0
        gw_md = dlogits.T @ x_md
        gb_md = dlogits.sum(axis=0)

    ed_sum = 0.0
    gw_ed = np.zeros_like(params.ed_weight)
    gb_ed = np.zeros_like(params.ed_bias)
    if ed_idx.size:
        x_ed = H if dropout is None else H * dropout.ed
        proj_all = np.tanh(x_ed @ params.ed_weight.T + params.ed_bias)
        proj = proj_all[ed_idx]
        targets = ed_targets[ed_idx]
        cos, dots, proj_norm, proj_guard, tgt_guard = _guarded_cosine(proj, targets)
        ed_sum = float((1.0 - cos).sum())
        # dcos/dproj = t/(Np*Nt) - [|proj|>eps] * (proj.t)*proj/(|proj|*Np^2*Nt)
        denom = (proj_guard * tgt_guard)[:, None]
        dcos = targets / denom
        live = proj_norm > COSINE_EPS
        if np.any(live):
            coeff = np.zeros_like(proj_norm)
            coeff[live] = dots[live] / (
                proj_norm[live] * proj_guard[live] ** 2 * tgt_guard[live]
            )
            dcos -= coeff[:, None] * proj
        # chain: loss = 1 - cos, proj = tanh(a)
        dpre = -dcos * (1.0 - proj * proj)
        dpre_full = np.zeros((p, params.d))
        dpre_full[ed_idx] = dpre
        gw_ed = dpre_full.T @ x_ed
        gb_ed = dpre_full.sum(axis=0)

    terms = LossTerms(md_sum, int(md_idx.size), ed_sum, int(ed_idx.size))
    grads = GradTerms(
        md=HeadParams(gw_md, gb_md,
                      np.zeros_like(params.ed_weight), np.zeros_like(params.ed_bias)),
        ed=HeadParams(np.zeros_like(params.md_weight), np.zeros_like(params.md_bias),
                      gw_ed, gb_ed),
    )
    return terms, grads


def combine_gradients(terms: LossTerms, grads: GradTerms,
                      md_loss_weight: float) -> HeadParams:
    """Gradient of the mean-normalized joint objective."""
    md_scale = md_loss_weight / terms.md_count if terms.md_count else 0.0
    ed_scale = (1.0 - md_loss_weight) / terms.ed_count if terms.ed_count else 0.0
    return HeadParams(
        md_weight=md_scale * grads.md.md_weight + ed_scale * grads.ed.md_weight,
        md_bias=md_scale * grads.md.md_bias + ed_scale * grads.ed.md_bias,
        ed_weight=md_scale * grads.md.ed_weight + ed_scale * grads.ed.ed_weight,
        ed_bias=md_scale * grads.md.ed_bias + ed_scale * grads.ed.ed_bias,
    )


def compute_gradients(H: np.ndarray, md_labels: np.ndarray, ed_mask: np.ndarray,
                      ed_targets: np.ndarray, params: HeadParams,
                      md_loss_weight: float,
                      dropout: DropoutMasks | None = None) -> HeadParams:
    """Exact gradients of compute_loss's objective for one window."""
    terms, grads = grad_terms(H, md_labels, ed_mask, ed_targets, params,
                              md_loss_weight, dropout)
    return combine_gradients(terms, grads, md_loss_weight)


@dataclass(frozen=True)
class AdamState:
    first_moment: HeadParams
    second_moment: HeadParams
    t: int = 0
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: HeadParams, lr: float = 2e-5, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(zeros_like_params(params), zeros_like_params(params),
                     0, lr, beta1, beta2, eps)


def adam_step(params: HeadParams, grads: HeadParams,
              state: AdamState) -> tuple[HeadParams, AdamState]:
    """One bias-corrected Adam update; rejects non-finite gradients.

    Bias corrections are computed with Python-float pow so trajectories
    can be reproduced bit-exactly by a scalar implementation.
    """
    for name, arr in grads.arrays():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params = []
    new_m = []
    new_v = []
    for (_, p), (_, g), (_, m), (_, v) in zip(params.arrays(), grads.arrays(),
                                              state.first_moment.arrays(),
                                              state.second_moment.arrays()):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return (HeadParams(*new_params),
            replace(state, first_moment=HeadParams(*new_m),
                    second_moment=HeadParams(*new_v), t=t))


def save_checkpoint(fh: BinaryIO, params: HeadParams, state: AdamState,
                    config: dict):
    """Binary little-endian checkpoint: magic, version, shapes, parameters,
    Adam state, then a length-prefixed JSON config blob."""
    params.validate()
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<III", CHECKPOINT_VERSION, params.m, params.d))
    for _, arr in params.arrays():
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    fh.write(struct.pack("<Q", state.t))
    for moments in (state.first_moment, state.second_moment):
        for _, arr in moments.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = json.dumps(
        {**config, "lr": state.lr, "beta1": state.beta1,
         "beta2": state.beta2, "eps": state.eps},
        sort_keys=True,
    ).encode("utf-8")
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)


def _read_exact(fh: BinaryIO, size: int) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise ParseError("truncated checkpoint")
    return data


def _read_params(fh: BinaryIO, m: int, d: int) -> HeadParams:
    shapes = ((N_TAGS, m), (N_TAGS,), (d, m), (d,))
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        buf = _read_exact(fh, count * 8)
        arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    return HeadParams(*arrays)


def load_checkpoint(fh: BinaryIO) -> tuple[HeadParams, AdamState, dict]:
    if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    version, m, d = struct.unpack("<III", _read_exact(fh, 12))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    params = _read_params(fh, m, d)
    params.validate()
    (t,) = struct.unpack("<Q", _read_exact(fh, 8))
    first = _read_params(fh, m, d)
    second = _read_params(fh, m, d)
    (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8))
    config = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
    state = AdamState(first, second, t,
                      lr=float(config.get("lr", 2e-5)),
                      beta1=float(config.get("beta1", 0.9)),
                      beta2=float(config.get("beta2", 0.999)),
                      eps=float(config.get("eps", 1e-8)))
    return params, state, config
