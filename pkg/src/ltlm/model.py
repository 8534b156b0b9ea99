"""Lattice Transformer LM and the small causal transformer LM used as the N-best baseline.

The lattice model sees a lattice as a set of arcs.  Each arc embedding is
``word[w] + src_pos[x] + dst_pos[y]`` for an arc ``x -> y`` of the augmented,
topologically sorted lattice; a non-causal pre-norm transformer encoder runs
over the arc set and a sigmoid head gives the probability that the arc lies on
the oracle path.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import EmptyDataset, PositionOverflow
from .lattice import BOS, EOS, UNK, Lattice

log = logging.getLogger(__name__)

# full-size configuration for large vocabularies; metadata only
FULL_SCALE = {"layers": 8, "heads": 8, "d_model": 816, "ff_dim": 2048, "vocab": 200_000, "params": 211_000_000}


@dataclass
class LtLmConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    max_positions: int = 256
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


class CallCounter:
    """Thread-safe count of model invocations and the sequence length of each."""

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0
        self.seq_lengths: list[int] = []

    def add(self, lengths: Sequence[int]) -> None:
        with self._lock:
            self.calls += 1
            self.seq_lengths.extend(int(n) for n in lengths)

    def reset(self) -> None:
        with self._lock:
            self.calls = 0
            self.seq_lengths = []


# shared transformer pieces


def _block_params(rng, d, ff, prefix) -> dict[str, np.ndarray]:
    p = {}
    for n in ("q", "k", "v", "o"):
        p[f"{prefix}.w{n}"] = ad.xavier(rng, (d, d))
        p[f"{prefix}.b{n}"] = np.zeros(d)
    p[f"{prefix}.ln1_g"] = np.ones(d)
    p[f"{prefix}.ln1_b"] = np.zeros(d)
    p[f"{prefix}.ln2_g"] = np.ones(d)
    p[f"{prefix}.ln2_b"] = np.zeros(d)
    p[f"{prefix}.w1"] = ad.xavier(rng, (d, ff))
    p[f"{prefix}.b1"] = np.zeros(ff)
    p[f"{prefix}.w2"] = ad.xavier(rng, (ff, d))
    p[f"{prefix}.b2"] = np.zeros(d)
    return p


def attention(x: Tensor, p: dict, prefix: str, mask, heads: int, drop=None) -> Tensor:
    """Multi-head self-attention; ``mask`` broadcasts to (B, H, A, A), 0 = blocked."""
    B, A, d = x.shape
    dh = d // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (B, A, heads, dh)), (0, 2, 1, 3))

    q = split(x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"])
    k = split(x @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"])
    v = split(x @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"])
    scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    att = ad.softmax(scores, mask)
    if drop is not None:
        att = drop(att, 0)
    o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, A, d))
    return o @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def encoder_block(x: Tensor, p: dict, prefix: str, mask, heads: int, drop=None) -> Tensor:
    h = ad.layer_norm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    a = attention(h, p, prefix, mask, heads, drop)
    if drop is not None:
        a = drop(a, 1)
    x = x + a
    h = ad.layer_norm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
    f = ad.relu(h @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]
    if drop is not None:
        f = drop(f, 2)
    return x + f


def _dropper(cfg: LtLmConfig, training: bool, step: int, layer: int):
    if not training or cfg.dropout <= 0:
        return None

    def drop(t, site):
        return ad.dropout(t, cfg.dropout, (cfg.seed, layer, site, step), True)

    return drop


# lattice model


@dataclass
class ArcBatch:
    words: np.ndarray  # (B, A) int
    src: np.ndarray
    dst: np.ndarray
    mask: np.ndarray  # (B, A) bool
    targets: np.ndarray | None = None  # (B, A) float
    lengths: tuple = ()


def make_batch(lattices: Sequence[Lattice], targets: Sequence[Sequence[int]] | None = None, max_positions: int = 256) -> ArcBatch:
    """Pad augmented, topologically sorted lattices into arrays."""
    for lat in lattices:
        if lat.num_states > max_positions:
            raise PositionOverflow(f"{lat.utterance_id}: {lat.num_states} states exceed {max_positions} positions")
    B = len(lattices)
    A = max((lat.num_arcs for lat in lattices), default=0)
    words = np.zeros((B, A), dtype=np.int64)
    src = np.zeros((B, A), dtype=np.int64)
    dst = np.zeros((B, A), dtype=np.int64)
    mask = np.zeros((B, A), dtype=bool)
    tg = np.zeros((B, A)) if targets is not None else None
    for b, lat in enumerate(lattices):
        n = lat.num_arcs
        if n:
            arr = np.array([(a.word, a.src, a.dst) for a in lat.arcs], dtype=np.int64)
            words[b, :n], src[b, :n], dst[b, :n] = arr[:, 0], arr[:, 1], arr[:, 2]
            mask[b, :n] = True
        if tg is not None:
            tg[b, :n] = targets[b]
    return ArcBatch(words, src, dst, mask, tg, tuple(lat.num_arcs for lat in lattices))


def init_ltlm_params(cfg: LtLmConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 1])
    d = cfg.d_model
    raw = {
        "word_emb": rng.normal(0.0, 0.1, (cfg.vocab_size, d)),
        "src_pos": rng.normal(0.0, 0.1, (cfg.max_positions, d)),
        "dst_pos": rng.normal(0.0, 0.1, (cfg.max_positions, d)),
    }
    for layer in range(cfg.layers):
        raw.update(_block_params(rng, d, cfg.ff_dim, f"block{layer}"))
    raw["ln_f_g"] = np.ones(d)
    raw["ln_f_b"] = np.zeros(d)
    raw["out_w"] = ad.xavier(rng, (d, 1))
    raw["out_b"] = np.zeros(1)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def embed_arcs(batch: ArcBatch, params: dict[str, Tensor], max_positions: int | None = None) -> Tensor:
    """word[w] + src_pos[x] + dst_pos[y] per arc, shape (B, A, d)."""
    limit = params["src_pos"].shape[0] if max_positions is None else max_positions
    if batch.mask.any():
        hi = max(batch.src[batch.mask].max(), batch.dst[batch.mask].max())
        if hi >= limit:
            raise PositionOverflow(f"state id {hi} >= {limit} positions")
    return (
        ad.embedding_gather(params["word_emb"], batch.words)
        + ad.embedding_gather(params["src_pos"], batch.src)
        + ad.embedding_gather(params["dst_pos"], batch.dst)
    )


def bce_loss(logits: Tensor, targets, mask) -> Tensor:
    """Mean per-arc binary cross-entropy over valid arcs, in logit space."""
    return ad.bce_with_logits(logits, targets, mask)


class LatticeTransformer:
    def __init__(self, config: LtLmConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_ltlm_params(config)
        self.counter = CallCounter()

    def logits(self, batch: ArcBatch, training: bool = False, step: int = 0) -> Tensor:
        """One model invocation for the whole batch; returns (B, A) logits."""
        cfg = self.config
        p = self.params
        self.counter.add(batch.lengths)
        x = embed_arcs(batch, p, cfg.max_positions)
        key_mask = batch.mask[:, None, None, :]
        for layer in range(cfg.layers):
            x = encoder_block(x, p, f"block{layer}", key_mask, cfg.heads, _dropper(cfg, training, step, layer))
        x = ad.layer_norm(x, p["ln_f_g"], p["ln_f_b"])
        out = x @ p["out_w"] + p["out_b"]
        B, A = batch.words.shape
        return ad.reshape(out, (B, A))

    def forward(self, batch: ArcBatch, training: bool = False, step: int = 0) -> np.ndarray:
        """Per-arc oracle-membership probabilities, shape (B, A)."""
        return ad._sigmoid(self.logits(batch, training, step).data)

    def predict(self, lattices: Sequence[Lattice]) -> list[np.ndarray]:
        batch = make_batch(lattices, max_positions=self.config.max_positions)
        probs = self.forward(batch)
        return [probs[b, : lat.num_arcs].copy() for b, lat in enumerate(lattices)]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def save(self, path, metadata: dict | None = None) -> None:
        meta = {"kind": "ltlm", "config": dataclasses.asdict(self.config)}
        meta.update(metadata or {})
        save_checkpoint(path, {f"param/{k}": v for k, v in self.named_arrays().items()}, meta)

    @classmethod
    def load(cls, path) -> "LatticeTransformer":
        tensors, meta = load_checkpoint(path)
        cfg = LtLmConfig(**meta["config"])
        params = {k[6:]: Tensor(v, requires_grad=True, name=k[6:]) for k, v in tensors.items() if k.startswith("param/")}
        return cls(cfg, params)


# causal baseline LM


class CausalTransformerLM:
    """Autoregressive word-level transformer reusing :func:`encoder_block`."""

    def __init__(self, config: LtLmConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            rng = np.random.default_rng([config.seed, 2])
            d = config.d_model
            raw = {
                "word_emb": rng.normal(0.0, 0.1, (config.vocab_size, d)),
                "pos_emb": rng.normal(0.0, 0.1, (config.max_positions, d)),
            }
            for layer in range(config.layers):
                raw.update(_block_params(rng, d, config.ff_dim, f"block{layer}"))
            raw["ln_f_g"] = np.ones(d)
            raw["ln_f_b"] = np.zeros(d)
            raw["out_w"] = ad.xavier(rng, (d, config.vocab_size))
            raw["out_b"] = np.zeros(config.vocab_size)
            params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        self.params = params
        self.counter = CallCounter()

    def logits(self, ids: np.ndarray, lengths: np.ndarray, training: bool = False, step: int = 0) -> Tensor:
        cfg = self.config
        p = self.params
        B, T = ids.shape
        if T > cfg.max_positions:
            raise PositionOverflow(f"sequence of {T} tokens exceeds {cfg.max_positions} positions")
        x = ad.embedding_gather(p["word_emb"], ids) + ad.embedding_gather(p["pos_emb"], np.arange(T)[None, :].repeat(B, 0))
        valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
        mask = np.tril(np.ones((T, T), dtype=bool))[None, None] & valid[:, None, None, :]
        for layer in range(cfg.layers):
            x = encoder_block(x, p, f"block{layer}", mask, cfg.heads, _dropper(cfg, training, step, layer))
        x = ad.layer_norm(x, p["ln_f_g"], p["ln_f_b"])
        return x @ p["out_w"] + p["out_b"]

    def log_probs(self, words: Sequence[int]) -> np.ndarray:
        """log P(w_t | w_<t) for each position of ``<s> words </s>``; one model call."""
        inp = np.array([[BOS, *words]], dtype=np.int64)
        inp[inp >= self.config.vocab_size] = UNK
        tgt = np.array([*words, EOS], dtype=np.int64)
        tgt[tgt >= self.config.vocab_size] = UNK
        self.counter.add([len(words)])
        z = self.logits(inp, np.array([inp.shape[1]])).data[0]
        m = z.max(axis=-1, keepdims=True)
        logp = z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))
        return logp[np.arange(len(tgt)), tgt]

    def ar_score(self, words: Sequence[int]) -> float:
        """Total natural-log probability of the sentence including ``</s>``."""
        return float(self.log_probs(words).sum())

    def save(self, path, metadata: dict | None = None) -> None:
        meta = {"kind": "arlm", "config": dataclasses.asdict(self.config)}
        meta.update(metadata or {})
        save_checkpoint(path, {f"param/{k}": t.data for k, t in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "CausalTransformerLM":
        tensors, meta = load_checkpoint(path)
        cfg = LtLmConfig(**meta["config"])
        params = {k[6:]: Tensor(v, requires_grad=True, name=k[6:]) for k, v in tensors.items() if k.startswith("param/")}
        return cls(cfg, params)


# training


@dataclass
class TrainSchedule:
    epochs: int = 6
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    save_every: int = 0  # steps; 0 disables mid-epoch checkpoints


@dataclass
class TrainHistory:
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    heldout: list[dict] = field(default_factory=list)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        k = max_norm / total
        for name in grads:
            grads[name] = grads[name] * k


def _train_state_arrays(params, adam: ad.AdamState) -> dict[str, np.ndarray]:
    out = {f"param/{k}": t.data for k, t in params.items()}
    for k in params:
        if k in adam.m:
            out[f"adam_m/{k}"] = adam.m[k]
            out[f"adam_v/{k}"] = adam.v[k]
    return out


def save_training_state(path, model, adam: ad.AdamState, schedule: TrainSchedule, kind: str, extra: dict | None = None) -> None:
    meta = {
        "kind": kind,
        "config": dataclasses.asdict(model.config),
        "schedule": dataclasses.asdict(schedule),
        "step": adam.step,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "warmup": adam.warmup},
    }
    meta.update(extra or {})
    save_checkpoint(path, _train_state_arrays(model.params, adam), meta)


def load_training_state(path):
    """Rebuild (model, adam state, metadata) from a training checkpoint."""
    tensors, meta = load_checkpoint(path)
    cfg = LtLmConfig(**meta["config"])
    params = {k[6:]: Tensor(v, requires_grad=True, name=k[6:]) for k, v in tensors.items() if k.startswith("param/")}
    cls = LatticeTransformer if meta["kind"] == "ltlm" else CausalTransformerLM
    model = cls(cfg, params)
    adam = ad.AdamState(step=meta["step"], **meta["adam"])
    for k, v in tensors.items():
        if k.startswith("adam_m/"):
            adam.m[k[7:]] = v
        elif k.startswith("adam_v/"):
            adam.v[k[7:]] = v
    return model, adam, meta


def arc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if not len(pos) or not len(neg):
        return float("nan")
    allv = np.concatenate([pos, neg])
    order = allv.argsort(kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    i = 0
    while i < len(allv):
        j = i
        while j + 1 < len(allv) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i: j + 1]] = (i + j) / 2.0 + 1
        i = j + 1
    return float((ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def evaluate_ltlm(model: LatticeTransformer, examples, batch_size: int = 32) -> dict:
    losses, weights, all_p, all_y = [], [], [], []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i: i + batch_size]
        batch = make_batch([e[0] for e in chunk], [e[1] for e in chunk], model.config.max_positions)
        z = model.logits(batch)
        losses.append(bce_loss(z, batch.targets, batch.mask).item())
        weights.append(batch.mask.sum())
        p = ad._sigmoid(z.data)
        all_p.append(p[batch.mask])
        all_y.append(batch.targets[batch.mask])
    p = np.concatenate(all_p)
    y = np.concatenate(all_y)
    return {
        "loss": float(np.average(losses, weights=weights)),
        "accuracy": float(((p > 0.5) == (y > 0.5)).mean()),
        "auc": arc_auc(p, y),
    }


def _run_training(model, data, schedule: TrainSchedule, make_step_batch, kind, adam=None, checkpoint_dir=None, on_epoch=None):
    n = len(data)
    if n == 0:
        raise EmptyDataset("no training examples")
    adam = adam or ad.AdamState(lr=schedule.lr, warmup=schedule.warmup)
    spe = math.ceil(n / schedule.batch_size)
    history = TrainHistory()
    start_epoch, skip = divmod(adam.step, spe)
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    for epoch in range(start_epoch, schedule.epochs):
        perm = np.random.default_rng([schedule.seed, epoch]).permutation(n)
        epoch_losses = []
        for b in range(spe):
            if epoch == start_epoch and b < skip:
                continue
            idx = perm[b * schedule.batch_size: (b + 1) * schedule.batch_size]
            with ad.Tape() as tape:
                loss = make_step_batch([data[i] for i in idx], adam.step)
            grads = ad.backward(tape, loss)
            named = {k: grads[t] for k, t in model.params.items() if t in grads}
            _clip(named, schedule.clip_norm)
            ad.adam_step(adam, model.params, named)
            history.step_losses.append(loss.item())
            epoch_losses.append(loss.item())
            if ckdir and schedule.save_every and adam.step % schedule.save_every == 0:
                save_training_state(ckdir / f"step{adam.step}.ckpt", model, adam, schedule, kind)
        history.epoch_losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        if ckdir:
            save_training_state(ckdir / f"epoch{epoch + 1}.ckpt", model, adam, schedule, kind)
        if on_epoch is not None:
            on_epoch(epoch, history)
        log.info("%s epoch %d loss %.4f", kind, epoch + 1, history.epoch_losses[-1])
    return adam, history


def train_ltlm(
    examples: Sequence[tuple[Lattice, Sequence[int]]],
    config: LtLmConfig,
    schedule: TrainSchedule,
    heldout: Sequence | None = None,
    checkpoint_dir=None,
    resume=None,
):
    """Train on (augmented lattice, per-arc 0/1 labels) pairs.

    Shuffling uses (seed, epoch) and dropout uses (seed, layer, site, step), so
    resuming from a checkpoint reproduces the uninterrupted run exactly.
    """
    examples = list(examples)
    for lat, _ in examples:
        if lat.num_states > config.max_positions:
            raise PositionOverflow(f"{lat.utterance_id}: {lat.num_states} states")
    if resume is not None:
        model, adam, _ = load_training_state(resume)
    else:
        model, adam = LatticeTransformer(config), None

    def step_loss(chunk, step):
        batch = make_batch([e[0] for e in chunk], [e[1] for e in chunk], config.max_positions)
        return bce_loss(model.logits(batch, training=True, step=step), batch.targets, batch.mask)

    def on_epoch(epoch, history):
        if heldout:
            history.heldout.append(evaluate_ltlm(model, list(heldout)))

    adam, history = _run_training(model, examples, schedule, step_loss, "ltlm", adam, checkpoint_dir, on_epoch)
    model.counter.reset()
    return model, history


def train_arlm(sentences: Sequence[Sequence[int]], config: LtLmConfig, schedule: TrainSchedule, checkpoint_dir=None):
    """Next-word cross-entropy training on id sequences (``<s>``/``</s>`` added)."""
    sentences = [list(s) for s in sentences]
    model = CausalTransformerLM(config)

    def step_loss(chunk, step):
        T = max(len(s) for s in chunk) + 1
        inp = np.zeros((len(chunk), T), dtype=np.int64)
        tgt = np.zeros((len(chunk), T), dtype=np.int64)
        mask = np.zeros((len(chunk), T))
        for b, s in enumerate(chunk):
            seq = [BOS, *s, EOS]
            inp[b, : len(seq) - 1] = seq[:-1]
            tgt[b, : len(seq) - 1] = seq[1:]
            mask[b, : len(seq) - 1] = 1
        z = model.logits(inp, mask.sum(1).astype(int), training=True, step=step)
        return ad.cross_entropy(z, tgt, mask)

    _, history = _run_training(model, sentences, schedule, step_loss, "arlm", None, checkpoint_dir)
    model.counter.reset()
    return model, history
