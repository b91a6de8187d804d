"""In-batch sampled softmax losses, Adam with linear decay, and staged training."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import encoder as enc
from .corpus import TrainingExample
from .tokenizer import DOC_MAX_LEN, QUERY_MAX_LEN, Vocab, encode_texts

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _softmax_xent(rows, cols, tau):
    """Mean over rows of -log softmax(rows @ cols.T / tau)[i, i].

    The target for row i is column i. Returns (loss, d_rows, d_cols).
    """
    logits = (rows @ cols.T) / tau
    logits = logits - logits.max(1, keepdims=True)
    exp = np.exp(logits)
    denom = exp.sum(1, keepdims=True)
    b = rows.shape[0]
    diag = np.arange(b)
    per_row = np.log(denom[:, 0].astype(np.float64)) - logits[diag, diag].astype(np.float64)
    loss = float(per_row.mean())
    dlogits = exp / denom
    dlogits[diag, diag] -= 1.0
    dlogits /= b * tau
    return max(loss, 0.0), dlogits @ cols, dlogits.T @ rows


def _check(q, p, tau):
    q = np.asarray(q)
    p = np.asarray(p)
    if q.ndim != 2 or q.shape != p.shape:
        raise ValueError(f"query and passage batches must have equal shapes, got {q.shape} and {p.shape}")
    if q.shape[0] == 0:
        raise ValueError("empty batch")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return q, p


def in_batch_loss_with_negatives(q, p_pos, p_neg=None, tau: float = 0.01):
    """Sampled softmax where every positive and every hard negative in the batch
    is a candidate for every query.

    ``p_neg`` is a [M, d] matrix of the batch's hard negatives (M may be 0).
    Returns ``(loss, (d_q, d_pos, d_neg))``.
    """
    q, p_pos = _check(q, p_pos, tau)
    if p_neg is None or len(p_neg) == 0:
        loss, dq, dcols = _softmax_xent(q, p_pos, tau)
        return loss, (dq, dcols, np.zeros((0, q.shape[1]), dtype=q.dtype))
    p_neg = np.asarray(p_neg)
    b = q.shape[0]
    loss, dq, dcols = _softmax_xent(q, np.concatenate([p_pos, p_neg]), tau)
    return loss, (dq, dcols[:b], dcols[b:])


def in_batch_loss(q, p, tau: float = 0.01):
    """Returns ``(loss, (d_q, d_p))``."""
    loss, (dq, dp, _) = in_batch_loss_with_negatives(q, p, None, tau)
    return loss, (dq, dp)


def bidirectional_loss(q, p, tau: float = 0.01, p_neg=None):
    """Average of query->passage and passage->query losses.

    Hard negatives are passages, so they only enter the query->passage direction.
    Returns ``(loss, (d_q, d_p, d_neg))``.
    """
    l1, (dq1, dp1, dn) = in_batch_loss_with_negatives(q, p, p_neg, tau)
    l2, (dp2, dq2) = in_batch_loss(p, q, tau)
    return 0.5 * (l1 + l2), (0.5 * (dq1 + dq2), 0.5 * (dp1 + dp2), 0.5 * dn)


@dataclass
class TrainConfig:
    batch_size: int = 64
    temperature: float = 0.01
    steps: int = 500
    init_lr: float = 1e-3
    bidirectional: bool = True
    use_hard_negatives: bool = True
    negatives_per_query: int = 1
    query_max_len: int = QUERY_MAX_LEN
    doc_max_len: int = DOC_MAX_LEN
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adam"
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def lr_at(self, step: int) -> float:
        if self.steps == 0:
            return 0.0
        return self.init_lr * max(0.0, 1.0 - step / self.steps)


def parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def coerce_fields(cls, values: dict, base=None):
    """Build dataclass ``cls`` from string key=value pairs, rejecting unknown keys."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = dataclasses.asdict(base) if base is not None else {}
    for key, raw in values.items():
        if key not in types:
            raise KeyError(f"unknown key {key!r} for {cls.__name__}")
        t = types[key]
        if not isinstance(raw, str):
            out[key] = raw
        elif t in (bool, "bool"):
            out[key] = parse_bool(raw)
        elif t in (int, "int"):
            out[key] = int(raw)
        elif t in (float, "float"):
            out[key] = float(raw)
        else:
            out[key] = raw
    return cls(**out)


def read_key_values(path) -> dict[str, dict[str, str]]:
    """Parse ``[section]`` headed ``key = value`` text; keys before any header go to ``""``."""
    sections: dict[str, dict[str, str]] = {"": {}}
    current = ""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                sections.setdefault(current, {})
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            sections[current][k.strip()] = v.strip()
    return sections


def load_train_config(path, section: str = "") -> TrainConfig:
    return coerce_fields(TrainConfig, read_key_values(path).get(section, {}))


class AdamOptimizer:
    """Adam whose step size follows ``TrainConfig.lr_at``."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, step_index: int):
        """Return updated params (new arrays); inputs are not modified."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {name!r} at step {step_index}")
        cfg = self.config
        lr = cfg.lr_at(step_index)
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        new = {}
        for name, w in params.items():
            g = grads.get(name)
            if g is None:
                new[name] = w
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            v = self.v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            if lr == 0.0:
                new[name] = w
                continue
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)
            new[name] = (w - update).astype(w.dtype, copy=False)
        return new


def optimizer_step(params, grads, step_index: int, config: TrainConfig, optimizer: Optional[AdamOptimizer] = None):
    """Single functional update; pass a persistent ``optimizer`` to keep Adam moments."""
    opt = optimizer if optimizer is not None else AdamOptimizer(config)
    return opt.step(params, grads, step_index)


@dataclass
class LossReport:
    step: int
    loss: float
    lr: float
    grad_norm: float

    def to_line(self) -> str:
        return f"{self.step}\t{self.loss:.6f}\t{self.lr:.6g}\t{self.grad_norm:.6f}"


@dataclass
class StageSpec:
    name: str
    training_set: Sequence[TrainingExample]
    train_config: TrainConfig
    init_from: object = "fresh"  # "fresh", a checkpoint path, or a params dict
    output_path: Optional[Path] = None
    log_path: Optional[Path] = None

    def __post_init__(self):
        if self.name not in ("pretrain", "finetune"):
            raise ValueError(f"stage name must be pretrain or finetune, got {self.name!r}")


@dataclass
class _Tokenized:
    queries: np.ndarray
    positives: np.ndarray
    negatives: list = field(default_factory=list)  # per example: [n_i, doc_len] ids


def _tokenize_examples(examples, vocab, cfg: TrainConfig) -> _Tokenized:
    q = encode_texts(vocab, [ex.query.text for ex in examples], cfg.query_max_len)
    p = encode_texts(vocab, [ex.positive.full_text for ex in examples], cfg.doc_max_len)
    negs = []
    for ex in examples:
        chosen = ex.hard_negatives[: cfg.negatives_per_query] if cfg.use_hard_negatives else ()
        negs.append(encode_texts(vocab, [d.full_text for d in chosen], cfg.doc_max_len))
    return _Tokenized(q, p, negs)


def _grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def _add_into(total, grads):
    for k, g in grads.items():
        total[k] += g


def loss_and_grads(params, config: enc.EncoderConfig, q_ids, d_ids, n_pos: int, train_cfg: TrainConfig):
    """Loss and parameter gradients for one batch.

    ``d_ids`` holds the ``n_pos`` positives followed by any hard negatives.
    """
    q_ids = enc.trim_padding(q_ids)
    d_ids = enc.trim_padding(d_ids)
    q_emb, q_cache = enc.encode_forward(params, config, q_ids)
    d_emb, d_cache = enc.encode_forward(params, config, d_ids)
    pos, neg = d_emb[:n_pos], d_emb[n_pos:]
    if train_cfg.bidirectional:
        loss, (dq, dp, dn) = bidirectional_loss(q_emb, pos, train_cfg.temperature, neg)
    else:
        loss, (dq, dp, dn) = in_batch_loss_with_negatives(q_emb, pos, neg, train_cfg.temperature)
    grads = enc.encode_backward(params, config, q_ids, dq, cache=q_cache)
    _add_into(grads, enc.encode_backward(params, config, d_ids, np.concatenate([dp, dn]), cache=d_cache))
    return loss, grads


def _resolve_init(init_from, config):
    if isinstance(init_from, dict):
        return {k: v.copy() for k, v in init_from.items()}
    if isinstance(init_from, (str, Path)) and str(init_from) != "fresh":
        from .checkpoint import load_checkpoint

        params, ck_config = load_checkpoint(init_from)
        if ck_config != config:
            raise ValueError(f"checkpoint {init_from} has a different encoder config")
        return params
    return None


def train_stage(spec: StageSpec, params, config: enc.EncoderConfig, vocab: Vocab):
    """Run one stage; returns (params, list of LossReport).

    ``params`` may be None when ``spec.init_from`` names a checkpoint or params
    dict. Batches come from a seeded per-epoch shuffle, so the result is a pure
    function of the inputs.
    """
    cfg = spec.train_config
    start = _resolve_init(spec.init_from, config)
    if start is not None:
        params = start
    if params is None:
        raise ValueError(f"stage {spec.name!r}: no initial parameters")
    examples = list(spec.training_set)
    if not examples:
        raise ValueError(f"stage {spec.name!r}: empty training set")
    if cfg.batch_size > len(examples):
        raise ValueError(
            f"stage {spec.name!r}: batch_size={cfg.batch_size} exceeds the {len(examples)} training "
            "examples; lower batch_size"
        )
    if vocab.size != config.vocab_size:
        raise ValueError(f"vocab has {vocab.size} ids but encoder expects {config.vocab_size}")

    reports: list[LossReport] = []
    if cfg.steps > 0:
        toks = _tokenize_examples(examples, vocab, cfg)
        rng = np.random.default_rng(cfg.seed)
        opt = AdamOptimizer(cfg)
        order = rng.permutation(len(examples))
        cursor = 0
        log = open(spec.log_path, "w", encoding="utf-8") if spec.log_path else None
        try:
            for step in range(cfg.steps):
                if cursor + cfg.batch_size > len(order):
                    order = rng.permutation(len(examples))
                    cursor = 0
                idx = order[cursor: cursor + cfg.batch_size]
                cursor += cfg.batch_size
                negs = [toks.negatives[i] for i in idx if len(toks.negatives[i])]
                d_ids = np.concatenate([toks.positives[idx]] + negs)
                loss, grads = loss_and_grads(params, config, toks.queries[idx], d_ids, len(idx), cfg)
                gn = _grad_norm(grads)
                lr = cfg.lr_at(step)
                params = opt.step(params, grads, step)
                if step % cfg.log_every == 0 or step == cfg.steps - 1:
                    rep = LossReport(step, loss, lr, gn)
                    reports.append(rep)
                    logger.info("%s step %d loss %.4f lr %.2e", spec.name, step, loss, lr)
                    if log:
                        log.write(rep.to_line() + "\n")
        finally:
            if log:
                log.close()
    if spec.output_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(params, config, spec.output_path)
    return params, reports


@dataclass
class MultiStageResult:
    pretrained: dict
    final: dict
    pretrain_reports: list
    finetune_reports: list


def run_multi_stage(pretrain: StageSpec, finetune: StageSpec, params, config, vocab) -> MultiStageResult:
    """Pretrain, then fine-tune starting from the pretrained weights.

    A zero-step stage passes weights through untouched, which yields the
    fine-tune-only and pretrain-only ablation arms.
    """
    pt_params, pt_reports = train_stage(pretrain, params, config, vocab)
    ft_spec = dataclasses.replace(finetune, init_from=pt_params)
    ft_params, ft_reports = train_stage(ft_spec, None, config, vocab)
    return MultiStageResult(pt_params, ft_params, pt_reports, ft_reports)


def mean_loss(params, config, vocab, examples, cfg: TrainConfig, batch_size: Optional[int] = None) -> float:
    """Average loss over fixed consecutive batches (no update)."""
    bs = batch_size or cfg.batch_size
    toks = _tokenize_examples(examples, vocab, cfg)
    losses = []
    for start in range(0, len(examples) - bs + 1, bs):
        idx = np.arange(start, start + bs)
        negs = [toks.negatives[i] for i in idx if len(toks.negatives[i])]
        d_ids = enc.trim_padding(np.concatenate([toks.positives[idx]] + negs))
        q_emb = enc.encode_batch(params, config, enc.trim_padding(toks.queries[idx]))
        d_emb = enc.encode_batch(params, config, d_ids)
        if cfg.bidirectional:
            loss, _ = bidirectional_loss(q_emb, d_emb[:bs], cfg.temperature, d_emb[bs:])
        else:
            loss, _ = in_batch_loss_with_negatives(q_emb, d_emb[:bs], d_emb[bs:], cfg.temperature)
        losses.append(loss)
    return float(np.mean(losses))
