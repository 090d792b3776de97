"""Soft-attention LSTM caption decoder with hand-written backprop.

Shapes: V vocab, E embedding, D feature dim, H hidden, A attention, P pixels.
LSTM gates are packed in the order input, forget, output, candidate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from .corpus import END_ID, START_ID, CaptionRecord, FeatureGrid, WordMap

CHECKPOINT_VERSION = 1

# name -> shape template over the dims (V, E, D, H, A)
PARAM_SHAPES = {
    "embed": ("V", "E"),
    "att_feat": ("D", "A"),
    "att_hidden": ("H", "A"),
    "att_bias": ("A",),
    "att_out": ("A",),
    "lstm_input": ("E+D", "4H"),
    "lstm_hidden": ("H", "4H"),
    "lstm_bias": ("4H",),
    "init_h": ("D", "H"),
    "init_h_bias": ("H",),
    "init_c": ("D", "H"),
    "init_c_bias": ("H",),
    "out": ("H", "V"),
    "out_bias": ("V",),
}


class DecoderError(Exception):
    pass


class DimMismatch(DecoderError):
    pass


class TokenOutOfRange(DecoderError):
    pass


class EmptyReference(DecoderError):
    pass


class NonFiniteLoss(DecoderError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch


class CheckpointError(DecoderError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


@dataclass
class ModelParams:
    embed: np.ndarray
    att_feat: np.ndarray
    att_hidden: np.ndarray
    att_bias: np.ndarray
    att_out: np.ndarray
    lstm_input: np.ndarray
    lstm_hidden: np.ndarray
    lstm_bias: np.ndarray
    init_h: np.ndarray
    init_h_bias: np.ndarray
    init_c: np.ndarray
    init_c_bias: np.ndarray
    out: np.ndarray
    out_bias: np.ndarray

    def __post_init__(self):
        expected = _shapes(*self.dims)
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DimMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        """(V, E, D, H, A)."""
        V, E = np.shape(self.embed)
        D, A = np.shape(self.att_feat)
        H = np.shape(self.att_hidden)[0]
        return V, E, D, H, A

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(a, getattr(other, k)) for k, a in self.items())


def _shapes(V, E, D, H, A) -> dict[str, tuple[int, ...]]:
    env = {"V": V, "E": E, "D": D, "H": H, "A": A, "E+D": E + D, "4H": 4 * H}
    return {name: tuple(env[s] for s in tmpl) for name, tmpl in PARAM_SHAPES.items()}


def init_params(V: int, E: int, D: int, H: int, A: int, seed: int = 0) -> ModelParams:
    """Weights uniform in [-0.1, 0.1]; biases zero except the forget gate at 1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _shapes(V, E, D, H, A).items():
        if name.endswith("bias"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.uniform(-0.1, 0.1, size=shape)
    tensors["lstm_bias"][H:2 * H] = 1.0
    return ModelParams(**tensors)


@dataclass
class TrainConfig:
    lambda_ds: float = 1.0
    learning_rate: float = 4e-4
    epochs: int = 1
    seed: int = 0
    grad_clip: float | None = 5.0

    def __post_init__(self):
        if self.lambda_ds < 0:
            raise ValueError("lambda_ds must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")


@dataclass(frozen=True)
class DecoderState:
    h: np.ndarray
    c: np.ndarray
    t: int = 0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(x):
    shifted = x - np.max(x)
    return shifted - np.log(np.sum(np.exp(shifted)))


def softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def _features(features, params: ModelParams) -> np.ndarray:
    F = features.values if isinstance(features, FeatureGrid) else np.asarray(features, dtype=np.float64)
    D = params.dims[2]
    if F.ndim != 2 or F.shape[1] != D:
        raise DimMismatch(f"features have shape {F.shape}, decoder expects D={D}")
    return F


def init_state(features: FeatureGrid, params: ModelParams) -> DecoderState:
    F = _features(features, params)
    mean = F.mean(axis=0)
    h = np.tanh(mean @ params.init_h + params.init_h_bias)
    c = np.tanh(mean @ params.init_c + params.init_c_bias)
    return DecoderState(h, c, 0)


def attend(features: FeatureGrid, h: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Attention weights over pixels and the weighted feature sum."""
    F = _features(features, params)
    if np.shape(h) != (params.dims[3],):
        raise DimMismatch(f"hidden state has shape {np.shape(h)}, expected ({params.dims[3]},)")
    alpha, context, _ = _attend(F, F @ params.att_feat, h, params)
    return alpha, context


def _attend(F, FW, h, p: ModelParams):
    pre = FW + h @ p.att_hidden + p.att_bias
    act = np.maximum(pre, 0.0)
    alpha = softmax(act @ p.att_out)
    return alpha, alpha @ F, (pre, act)


def _lstm(x, h, c, p: ModelParams):
    H = h.shape[0]
    z = x @ p.lstm_input + h @ p.lstm_hidden + p.lstm_bias
    i = sigmoid(z[:H])
    f = sigmoid(z[H:2 * H])
    o = sigmoid(z[2 * H:3 * H])
    g = np.tanh(z[3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, o, g, tc)


def decode_step(state: DecoderState, prev_token_id: int, features: FeatureGrid,
                params: ModelParams) -> tuple[DecoderState, np.ndarray, np.ndarray]:
    F = _features(features, params)
    V = params.dims[0]
    if not 0 <= prev_token_id < V:
        raise TokenOutOfRange(f"token id {prev_token_id} outside vocabulary of size {V}")
    alpha, context, _ = _attend(F, F @ params.att_feat, state.h, params)
    x = np.concatenate([params.embed[prev_token_id], context])
    h, c, _ = _lstm(x, state.h, state.c, params)
    log_probs = log_softmax(h @ params.out + params.out_bias)
    return DecoderState(h, c, state.t + 1), log_probs, alpha


def ds_penalty(alpha: np.ndarray) -> float:
    """``sum_p (1 - sum_t alpha[t, p])**2`` for a T x P attention matrix."""
    return float(np.sum((1.0 - np.asarray(alpha).sum(axis=0)) ** 2))


@dataclass
class ForwardResult:
    loss: float
    cross_entropy: float
    penalty: float
    alpha: np.ndarray
    log_probs: np.ndarray
    cache: dict = field(default=None, repr=False)


def _teacher_forced(F, ref_ids: Sequence[int], params: ModelParams, lambda_ds: float,
                    keep_cache: bool = False) -> ForwardResult:
    if len(ref_ids) == 0:
        raise EmptyReference("reference caption is empty")
    V = params.dims[0]
    inputs = [START_ID] + list(ref_ids)
    targets = list(ref_ids) + [END_ID]
    for tok in inputs + targets:
        if not 0 <= tok < V:
            raise TokenOutOfRange(f"token id {tok} outside vocabulary of size {V}")
    T = len(targets)

    mean = F.mean(axis=0)
    h = np.tanh(mean @ params.init_h + params.init_h_bias)
    c = np.tanh(mean @ params.init_c + params.init_c_bias)
    h0, c0 = h, c
    FW = F @ params.att_feat

    alphas = np.empty((T, F.shape[0]))
    log_probs = np.empty((T, V))
    steps = []
    for t in range(T):
        alpha, context, att_cache = _attend(F, FW, h, params)
        x = np.concatenate([params.embed[inputs[t]], context])
        h_new, c_new, gates = _lstm(x, h, c, params)
        log_probs[t] = log_softmax(h_new @ params.out + params.out_bias)
        alphas[t] = alpha
        if keep_cache:
            steps.append((h, c, x, att_cache, gates, h_new, c_new))
        h, c = h_new, c_new

    ce = -float(np.mean(log_probs[np.arange(T), targets]))
    slack = 1.0 - alphas.sum(axis=0)
    penalty = ds_penalty(alphas)
    loss = ce + lambda_ds * penalty
    cache = None
    if keep_cache:
        cache = dict(F=F, mean=mean, h0=h0, c0=c0, inputs=inputs, targets=targets,
                     steps=steps, slack=slack, lambda_ds=lambda_ds)
    return ForwardResult(loss, ce, penalty, alphas, log_probs, cache)


def forward_teacher_forced(features: FeatureGrid, ref_ids: Sequence[int], params: ModelParams,
                           cfg: TrainConfig) -> ForwardResult:
    """Loss of one reference, feeding gold tokens as inputs at every step.

    ``loss = mean_t(-log p(gold_t)) + lambda_ds * sum_p (1 - sum_t alpha[t, p])**2``
    with ``T = len(ref_ids) + 1`` steps (the caption then ``<end>``).
    """
    return _teacher_forced(_features(features, params), ref_ids, params, cfg.lambda_ds)


def _backward(res: ForwardResult, params: ModelParams) -> ModelParams:
    cache = res.cache
    F, targets, inputs = cache["F"], cache["targets"], cache["inputs"]
    T = len(targets)
    H = params.dims[3]
    E = params.dims[1]
    g = params.zeros_like()

    # penalty gradient wrt every alpha[t, p] is the same per pixel
    d_alpha_pen = -2.0 * cache["lambda_ds"] * cache["slack"]

    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in reversed(range(T)):
        h_prev, c_prev, x, (pre, act), (i, f, o, gg, tc), h, c = cache["steps"][t]

        d_logits = np.exp(res.log_probs[t])
        d_logits[targets[t]] -= 1.0
        d_logits /= T
        g.out += np.outer(h, d_logits)
        g.out_bias += d_logits
        dh = params.out @ d_logits + dh_next

        dc = dc_next + dh * o * (1.0 - tc ** 2)
        d_o = dh * tc
        d_i = dc * gg
        d_f = dc * c_prev
        d_g = dc * i
        dz = np.concatenate([d_i * i * (1 - i), d_f * f * (1 - f), d_o * o * (1 - o), d_g * (1 - gg ** 2)])
        g.lstm_input += np.outer(x, dz)
        g.lstm_hidden += np.outer(h_prev, dz)
        g.lstm_bias += dz
        dx = params.lstm_input @ dz
        dh_prev = params.lstm_hidden @ dz
        dc_next = dc * f
        g.embed[inputs[t]] += dx[:E]
        d_context = dx[E:]

        alpha = res.alpha[t]
        d_alpha = F @ d_context + d_alpha_pen
        d_score = alpha * (d_alpha - alpha @ d_alpha)
        g.att_out += act.T @ d_score
        d_pre = np.outer(d_score, params.att_out) * (pre > 0)
        d_pre_sum = d_pre.sum(axis=0)
        g.att_feat += F.T @ d_pre
        g.att_hidden += np.outer(h_prev, d_pre_sum)
        g.att_bias += d_pre_sum
        dh_next = dh_prev + params.att_hidden @ d_pre_sum

    mean = cache["mean"]
    d_pre_h = dh_next * (1.0 - cache["h0"] ** 2)
    d_pre_c = dc_next * (1.0 - cache["c0"] ** 2)
    g.init_h += np.outer(mean, d_pre_h)
    g.init_h_bias += d_pre_h
    g.init_c += np.outer(mean, d_pre_c)
    g.init_c_bias += d_pre_c
    return g


def loss_and_gradients(features: FeatureGrid, ref_ids: Sequence[int], params: ModelParams,
                       cfg: TrainConfig) -> tuple[ForwardResult, ModelParams]:
    res = _teacher_forced(_features(features, params), ref_ids, params, cfg.lambda_ds, keep_cache=True)
    return res, _backward(res, params)


def gradients(features: FeatureGrid, ref_ids: Sequence[int], params: ModelParams,
              cfg: TrainConfig) -> ModelParams:
    """Exact gradient of ``forward_teacher_forced(...).loss`` for every tensor."""
    return loss_and_gradients(features, ref_ids, params, cfg)[1]


def batch_gradients(examples, params: ModelParams, cfg: TrainConfig) -> tuple[float, ModelParams]:
    """Summed loss and gradient over ``(features, ref_ids)`` pairs."""
    total = params.zeros_like()
    loss = 0.0
    for features, ref_ids in examples:
        res, g = loss_and_gradients(features, ref_ids, params, cfg)
        loss += res.loss
        for name, arr in g.items():
            getattr(total, name).__iadd__(arr)
    return loss, total


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    cross_entropy: float
    ds_penalty: float


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[EpochStats]


def training_examples(records: Sequence[CaptionRecord], wordmap: WordMap) -> list[tuple[FeatureGrid, list[int]]]:
    """One ``(features, ref_ids)`` pair per reference."""
    return [(rec.grid(), wordmap.ids(ref)) for rec in records for ref in rec.refs]


def train(records: Sequence[CaptionRecord], wordmap: WordMap, params: ModelParams,
          cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Plain per-example gradient descent with elementwise gradient clipping.

    Example order is reshuffled every epoch from ``cfg.seed``. Epoch stats are the
    means of the per-example values seen during the pass (before each update).
    """
    examples = training_examples(records, wordmap)
    if not examples:
        raise ValueError("dataset is empty")
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    clip = cfg.grad_clip
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(examples))
        losses, ces, pens = [], [], []
        for idx in order:
            features, ref_ids = examples[idx]
            res, grads = loss_and_gradients(features, ref_ids, params, cfg)
            if not np.isfinite(res.loss):
                raise NonFiniteLoss(epoch, res.loss)
            losses.append(res.loss)
            ces.append(res.cross_entropy)
            pens.append(res.penalty)
            if lr == 0:
                continue
            for name, grad in grads.items():
                if clip is not None:
                    np.clip(grad, -clip, clip, out=grad)
                getattr(params, name).__isub__(lr * grad)
        # fsum keeps the means independent of the shuffle order
        n = len(losses)
        stats = EpochStats(epoch, math.fsum(losses) / n, math.fsum(ces) / n, math.fsum(pens) / n)
        if not params.all_finite():
            raise NonFiniteLoss(epoch, float("nan"))
        trace.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return TrainResult(params, trace)


def token_cross_entropy(records: Sequence[CaptionRecord], wordmap: WordMap, params: ModelParams) -> float:
    """Mean negative log-likelihood per predicted token (caption words and ``<end>``)."""
    total, count = 0.0, 0
    for features, ref_ids in training_examples(records, wordmap):
        res = _teacher_forced(_features(features, params), ref_ids, params, 0.0)
        total += res.cross_entropy * len(res.log_probs)
        count += len(res.log_probs)
    return total / count


class DecoderScorer:
    """Adapts the decoder to the beam engine: ``start`` takes a feature grid."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.vocab_size = params.dims[0]

    def start(self, features):
        F = _features(features, self.params)
        return init_state(F, self.params), F

    def step(self, state, prev_token_id):
        dec_state, F = state
        new_state, log_probs, _ = decode_step(dec_state, prev_token_id, F, self.params)
        return (new_state, F), log_probs


# --- checkpoints -------------------------------------------------------------

def checkpoint_save(params: ModelParams, cfg: TrainConfig, wordmap: WordMap) -> bytes:
    envelope = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "wordmap": wordmap.token_to_id,
        "params": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                   for name, arr in params.items()},
    }
    return json.dumps(envelope, ensure_ascii=False).encode("utf-8")


def checkpoint_load(data: bytes) -> tuple[ModelParams, TrainConfig, WordMap]:
    try:
        envelope = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(envelope, dict) or "version" not in envelope:
        raise CorruptCheckpoint("checkpoint has no version tag")
    if envelope["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(envelope["version"], CHECKPOINT_VERSION)
    try:
        cfg = TrainConfig(**envelope["config"])
        wordmap = WordMap.from_mapping(envelope["wordmap"])
        tensors = {}
        for name in PARAM_SHAPES:
            entry = envelope["params"][name]
            tensors[name] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params = ModelParams(**tensors)
    except (KeyError, TypeError, ValueError, DimMismatch) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from None
    if params.dims[0] != len(wordmap):
        raise CorruptCheckpoint(f"vocabulary size {params.dims[0]} does not match wordmap size {len(wordmap)}")
    return params, cfg, wordmap
