"""Character-level toy MoE language model.

Each block mixes context with a fixed causal running mean, routes every token
to its top-K experts and adds the gate-weighted expert outputs back onto the
residual stream::

    h = x + causal_mean(x)
    s = softmax(h @ router_w.T)
    z = sum_{i in topK(s)} s_i / sum_{j in topK(s)} s_j * E_i(h)
    y = x + z

with ``E_i(h) = silu(h @ w_up.T) @ w_down.T``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .corpus import Alphabet, sample_windows
from .optim import AdamState, adamw_step

log = logging.getLogger(__name__)

ACTIVATION = "silu"


@dataclass(frozen=True)
class MoeConfig:
    vocab_size: int
    d_model: int = 32
    d_hidden: int = 64
    n_layers: int = 4
    n_experts: int = 8
    top_k: int = 2
    seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("top_k must lie in [1, n_experts]")
        for name in ("d_model", "d_hidden", "n_layers", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def total_experts(self) -> int:
        return self.n_layers * self.n_experts

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d) -> "MoeConfig":
        return cls(**d)


@dataclass(frozen=True)
class Expert:
    w_up: np.ndarray    # (d_hidden, d_model)
    w_down: np.ndarray  # (d_model, d_hidden)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return ad.matmul_nt(ad.silu(ad.matmul_nt(h, self.w_up)), self.w_down)


@dataclass(frozen=True)
class MoeBlock:
    router_w: np.ndarray  # (n_experts, d_model)
    experts: tuple[Expert, ...]


@dataclass(frozen=True)
class MoeModel:
    config: MoeConfig
    alphabet: Alphabet
    embedding: np.ndarray  # (vocab, d_model)
    blocks: tuple[MoeBlock, ...]
    head: np.ndarray       # (vocab, d_model)
    expert_bits: tuple[int, ...] | None = None

    def __post_init__(self):
        cfg = self.config
        if len(self.blocks) != cfg.n_layers:
            raise ValueError("block count does not match config")
        if self.alphabet.size > cfg.vocab_size:
            raise ValueError("alphabet larger than vocab_size")
        if self.expert_bits is not None and len(self.expert_bits) != cfg.total_experts:
            raise ValueError("expert_bits needs one entry per expert")

    def expert(self, i: int) -> Expert:
        layer, e = divmod(i, self.config.n_experts)
        return self.blocks[layer].experts[e]

    def params(self) -> dict[str, np.ndarray]:
        """All weights keyed by their canonical names, in a fixed order."""
        out = {"embedding": self.embedding}
        for l, block in enumerate(self.blocks):
            out[f"blocks.{l}.router_w"] = block.router_w
            for e, ex in enumerate(block.experts):
                out[f"blocks.{l}.experts.{e}.w_up"] = ex.w_up
                out[f"blocks.{l}.experts.{e}.w_down"] = ex.w_down
        out["head"] = self.head
        return out

    def with_params(self, updates: dict[str, np.ndarray], **changes) -> "MoeModel":
        """Copy of the model with the named tensors replaced."""
        p = self.params()
        unknown = set(updates) - set(p)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        p.update(updates)
        return replace(self, **_assemble(self.config, p), **changes)

    def n_params(self) -> int:
        return sum(a.size for a in self.params().values())


def router_names(config: MoeConfig) -> list[str]:
    return [f"blocks.{l}.router_w" for l in range(config.n_layers)]


def expert_names(config: MoeConfig, i: int) -> tuple[str, str]:
    l, e = divmod(i, config.n_experts)
    return f"blocks.{l}.experts.{e}.w_up", f"blocks.{l}.experts.{e}.w_down"


def _assemble(config: MoeConfig, p: dict[str, np.ndarray]) -> dict:
    blocks = []
    for l in range(config.n_layers):
        experts = tuple(
            Expert(p[f"blocks.{l}.experts.{e}.w_up"], p[f"blocks.{l}.experts.{e}.w_down"])
            for e in range(config.n_experts)
        )
        blocks.append(MoeBlock(p[f"blocks.{l}.router_w"], experts))
    return {"embedding": p["embedding"], "blocks": tuple(blocks), "head": p["head"]}


def init_model(config: MoeConfig, alphabet: Alphabet) -> MoeModel:
    """Random initial weights, deterministic in ``config.seed``."""
    rng = np.random.default_rng([config.seed, 0x1417])
    d, hdim = config.d_model, config.d_hidden
    p = {"embedding": rng.normal(0.0, 1.0, (config.vocab_size, d))}
    for l in range(config.n_layers):
        p[f"blocks.{l}.router_w"] = rng.normal(0.0, 1.0 / np.sqrt(d), (config.n_experts, d))
        for e in range(config.n_experts):
            p[f"blocks.{l}.experts.{e}.w_up"] = rng.normal(0.0, 1.0 / np.sqrt(d), (hdim, d))
            p[f"blocks.{l}.experts.{e}.w_down"] = rng.normal(0.0, 0.5 / np.sqrt(hdim), (d, hdim))
    p["head"] = rng.normal(0.0, 1.0 / np.sqrt(d), (config.vocab_size, d))
    return MoeModel(config, alphabet, **_assemble(config, p))


# --------------------------------------------------------------------------- forward


@dataclass
class LayerRouting:
    """Routing of one block: top-K ids (descending score) and renormalised gates."""

    selected: np.ndarray  # (n, K) int
    gates: np.ndarray     # (n, K)
    scores: np.ndarray    # (n, N) full softmax

    def tokens_for(self, expert: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices routed to ``expert`` and the top-K slot they used."""
        rows, slots = np.nonzero(self.selected == expert)
        return rows, slots


@dataclass
class BlockCapture:
    inputs: np.ndarray   # block input x
    mixed: np.ndarray    # h, seen by router and experts
    moe_out: np.ndarray  # z
    outputs: np.ndarray  # y = x + z


@dataclass
class ForwardOutput:
    logits: object                  # array, or Node when taped
    routing: list[LayerRouting]
    capture: list[BlockCapture]
    z_nodes: list = field(default_factory=list)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def _as_batch(tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.size == 0:
        raise ValueError("forward needs a non-empty token sequence")
    return tokens


def forward(model: MoeModel, tokens, *, params=None, routing=None, z_offsets=None) -> ForwardOutput:
    """Run the model on a ``(T,)`` sequence or a ``(B, T)`` batch.

    ``params`` overrides named weights (typically tape nodes).  ``routing``
    forces per-layer ``(selected, gates)`` instead of the model's own router
    decisions.  ``z_offsets`` maps a layer to an additive perturbation of its
    MoE output ``z``.
    """
    cfg = model.config
    batch = _as_batch(tokens)
    if batch.min() < 0 or batch.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")
    seq = batch.shape[1]
    ids = batch.reshape(-1)
    n = ids.shape[0]
    p = model.params()
    if params:
        p.update(params)

    x = ad.take_rows(p["embedding"], ids)
    routings, captures, z_nodes = [], [], []
    for l in range(cfg.n_layers):
        h = ad.add(x, ad.causal_mean(x, seq))
        scores = ad.softmax_rows(ad.matmul_nt(h, p[f"blocks.{l}.router_w"]))
        if routing is not None:
            selected, forced_gates = routing[l][0], routing[l][1]
            gates = forced_gates
        else:
            selected = top_k(ad.value_of(scores), cfg.top_k)
            gates = ad.row_normalize(ad.take_along_rows(scores, selected))
        parts = []
        for e in range(cfg.n_experts):
            rows, slots = np.nonzero(selected == e)
            if rows.size == 0:
                continue
            he = ad.take_rows(h, rows, unique=True)
            out = ad.matmul_nt(ad.silu(ad.matmul_nt(he, p[f"blocks.{l}.experts.{e}.w_up"])),
                               p[f"blocks.{l}.experts.{e}.w_down"])
            parts.append((rows, ad.scale_rows(out, ad.take_elems(gates, rows, slots))))
        z = ad.scatter_add_rows(n, cfg.d_model, parts)
        if z_offsets is not None and l in z_offsets:
            z = ad.add(z, z_offsets[l])
        y = ad.add(x, z)
        routings.append(LayerRouting(np.asarray(selected), np.array(ad.value_of(gates)),
                                     ad.value_of(scores)))
        captures.append(BlockCapture(ad.value_of(x), ad.value_of(h), ad.value_of(z), ad.value_of(y)))
        z_nodes.append(z)
        x = y
    logits = ad.matmul_nt(x, p["head"])
    return ForwardOutput(logits, routings, captures, z_nodes)


def sequence_loss(model: MoeModel, windows, **kw) -> float:
    """Mean next-token CE over ``(B, T+1)`` windows, teacher-forced."""
    windows = np.atleast_2d(windows)
    out = forward(model, windows[:, :-1], **kw)
    return float(ad.cross_entropy(out.logits, windows[:, 1:].reshape(-1))[0, 0])


def loss_and_grads(model: MoeModel, windows, names, **kw):
    """CE over ``windows`` and its gradient for the named tensors."""
    windows = np.atleast_2d(windows)
    tape = ad.Tape()
    p = model.params()
    nodes = {k: tape.var(p[k], k) for k in names}
    out = forward(model, windows[:, :-1], params=nodes, **kw)
    loss = ad.cross_entropy(out.logits, windows[:, 1:].reshape(-1))
    grads = tape.backward(loss)
    return float(loss.value[0, 0]), {k: grads.get(nd, np.zeros_like(nd.value)) for k, nd in nodes.items()}


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 4000
    batch_size: int = 16
    lr: float = 3e-3
    final_lr_frac: float = 0.1
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    check_every: int = 200
    patience: int = 3
    min_rel_improvement: float = 2e-3


def train(config: MoeConfig, corpus: str, train_cfg: TrainConfig = TrainConfig(),
          alphabet: Alphabet | None = None) -> MoeModel:
    """Mini-batch AdamW on next-character CE until the loss plateaus.

    Stops after ``max_steps`` or once the smoothed loss improves by less than
    ``min_rel_improvement`` for ``patience`` consecutive checks.
    """
    if len(corpus) < 10 * config.seq_len:
        raise ValueError(f"corpus has {len(corpus)} characters, need at least {10 * config.seq_len}")
    alphabet = alphabet or Alphabet.from_text(corpus)
    if alphabet.size > config.vocab_size:
        raise ValueError(f"alphabet of {alphabet.size} symbols exceeds vocab_size {config.vocab_size}")
    ids = alphabet.encode(corpus)
    model = init_model(config, alphabet)
    rng = np.random.default_rng([config.seed, 0x7EA1])
    names = list(model.params())
    state = AdamState()
    ema = best = None
    stale = 0
    for step in range(1, train_cfg.max_steps + 1):
        windows = sample_windows(ids, train_cfg.batch_size, config.seq_len, rng)
        loss, grads = loss_and_grads(model, windows, names)
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip = min(1.0, train_cfg.clip_norm / (norm + 1e-12))
        frac = (step - 1) / max(1, train_cfg.max_steps - 1)
        lr = train_cfg.lr * (train_cfg.final_lr_frac + (1 - train_cfg.final_lr_frac)
                             * 0.5 * (1 + np.cos(np.pi * frac)))
        state.step = step
        p = model.params()
        updates = {k: adamw_step(p[k], grads[k] * clip, state, k, lr=lr,
                                 weight_decay=train_cfg.weight_decay) for k in names}
        model = model.with_params(updates)
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        if step % train_cfg.check_every == 0:
            log.info("step %d loss %.4f", step, ema)
            if best is None or ema < best * (1 - train_cfg.min_rel_improvement):
                best, stale = ema, 0
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    break
    return model
