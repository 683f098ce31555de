"""Toy host networks with frozen linear layers and adapter attachment points.

Each model exposes its linear maps as numbered *slots*. A slot can carry
one adapter; when a :class:`~weightlora.sparsifier.GateVector` is attached
the adapters are gated, gate ``j`` belonging to ``gate_slots[j]``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .adapters import AdapterState, FrozenBase, lora_forward, weighted_forward
from .errors import ContractError
from .sparsifier import GateVector
from .tensor import Tensor


def _orthogonal(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((max(d, k), min(d, k))))
    q = q * np.sign(np.diag(r))
    return q if d >= k else q.T


class ToyModel:
    """Shared slot/adapter/gate plumbing; subclasses define ``forward``."""

    kind = "base"

    def __init__(self, spec: dict):
        self.spec = dict(spec)
        self.bases: list[FrozenBase] = []
        self.slot_names: list[str] = []
        self.adapters: dict[int, AdapterState] = {}
        self.gates: GateVector | None = None
        self.gate_slots: list[int] = []
        self._gate_index: dict[int, int] = {}
        self.full_finetune = False

    # -- slots -------------------------------------------------------------------
    @property
    def n_slots(self) -> int:
        return len(self.bases)

    def slot_dims(self, slot: int) -> tuple[int, int]:
        return self.bases[slot].d, self.bases[slot].k

    def attached_slots(self) -> list[int]:
        return sorted(self.adapters)

    def ordered_adapters(self) -> list[AdapterState]:
        """Adapters in gate order when gated, otherwise in slot order."""
        slots = self.gate_slots if self.gates is not None else self.attached_slots()
        return [self.adapters[s] for s in slots]

    def linear(self, slot: int, x: Tensor, *, train: bool = False, rng=None) -> Tensor:
        base = self.bases[slot]
        adapter = self.adapters.get(slot)
        if adapter is None or not adapter.active:
            return T.matmul(base.W, x)
        if self.gates is None:
            return lora_forward(base, adapter, x, train=train, rng=rng)
        j = self._gate_index[slot]
        if self.gates.frozen and not self.gates.is_open(j):
            return T.matmul(base.W, x)
        omega = self.gates.omega
        w = T.getitem(omega, j) if omega.requires_grad else Tensor(omega.data[j])
        return weighted_forward(base, adapter, w, x, frozen=self.gates.frozen,
                                gate_mode=self.gates.gate_mode, train=train, rng=rng)

    # -- parameters -----------------------------------------------------------------
    def adapter_params(self, active_only: bool = True) -> list[Tensor]:
        out = []
        for a in self.ordered_adapters():
            if a.active or not active_only:
                out.extend(a.params())
        return out

    def base_weights(self) -> list[Tensor]:
        return [b.W for b in self.bases]

    def set_full_finetune(self, on: bool = True) -> None:
        """Make every base weight trainable (the full fine-tuning baseline)."""
        self.full_finetune = on
        for W in self.base_weights():
            W.requires_grad = on

    def trainable_count(self) -> int:
        """Adapter parameters of active adapters plus gate scalars still being trained."""
        from .adapters import adapter_param_count

        count = sum(adapter_param_count(a) for a in self.adapters.values())
        if self.gates is not None and self.gates.omega.requires_grad:
            count += self.gates.n
        if self.full_finetune:
            count += sum(W.size for W in self.base_weights())
        return count

    def snapshot_bases(self) -> list[np.ndarray]:
        return [b.W.data.copy() for b in self.bases]

    def forward(self, x, *, train: bool = False, rng=None) -> Tensor:
        raise NotImplementedError


class ToyMLP(ToyModel):
    """Stack of square-ish frozen linear layers, ``tanh`` between them.

    The last layer is linear (regression head or logits). Slot ``i`` is layer ``i``.
    """

    kind = "mlp"

    def __init__(self, n_layers: int = 6, width: int = 16, in_dim: int | None = None,
                 out_dim: int | None = None, activation: str = "tanh", gain: float = 1.0,
                 seed: int = 0, dtype=None):
        in_dim = in_dim or width
        out_dim = out_dim or width
        super().__init__(dict(arch="mlp", n_layers=n_layers, width=width, in_dim=in_dim,
                              out_dim=out_dim, activation=activation, gain=gain, seed=seed))
        if n_layers < 1:
            raise ContractError("an MLP needs at least one layer")
        if activation not in ("tanh", "relu"):
            raise ContractError(f"unknown activation {activation!r}")
        self.activation = activation
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [width] * (n_layers - 1) + [out_dim]
        for i in range(n_layers):
            W = gain * _orthogonal(rng, dims[i + 1], dims[i])
            self.bases.append(FrozenBase(Tensor(W, dtype=dtype)))
            self.slot_names.append(f"layer{i}")

    @property
    def in_dim(self) -> int:
        return self.bases[0].k

    def forward(self, x, *, train: bool = False, rng=None) -> Tensor:
        h = T.as_tensor(x)
        last = self.n_slots - 1
        for i in range(self.n_slots):
            h = self.linear(i, h, train=train, rng=rng)
            if i < last:
                h = T.tanh(h) if self.activation == "tanh" else T.relu(h)
        return h


PROJECTIONS = ("query", "key", "value", "attn_out", "mlp_in", "mlp_out")


class ToyTransformer(ToyModel):
    """Token classifier: embedding, ``n_blocks`` pre-norm encoder blocks, mean pool, head.

    Slots per block, in order: query, key, value, attention output, MLP in,
    MLP out. Embeddings, layer norms (no affine) and the head are frozen and
    not slots.
    """

    kind = "transformer"

    def __init__(self, vocab: int = 16, d_model: int = 32, n_heads: int = 2, seq_len: int = 8,
                 n_blocks: int = 1, d_ff: int | None = None, n_classes: int = 2, seed: int = 0,
                 dtype=None):
        d_ff = d_ff or 2 * d_model
        super().__init__(dict(arch="transformer", vocab=vocab, d_model=d_model, n_heads=n_heads,
                              seq_len=seq_len, n_blocks=n_blocks, d_ff=d_ff, n_classes=n_classes,
                              seed=seed))
        if d_model % n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        self.n_heads, self.seq_len, self.d_model = n_heads, seq_len, d_model
        rng = np.random.default_rng(seed)
        self.embedding = Tensor(rng.standard_normal((d_model, vocab)), dtype=dtype)
        self.position = Tensor(0.1 * rng.standard_normal((d_model, seq_len)), dtype=dtype)
        shapes = {"query": (d_model, d_model), "key": (d_model, d_model),
                  "value": (d_model, d_model), "attn_out": (d_model, d_model),
                  "mlp_in": (d_ff, d_model), "mlp_out": (d_model, d_ff)}
        for b in range(n_blocks):
            for name in PROJECTIONS:
                d, k = shapes[name]
                W = _orthogonal(rng, d, k)
                self.bases.append(FrozenBase(Tensor(W, dtype=dtype)))
                self.slot_names.append(f"block{b}.{name}")
        self.head = Tensor(rng.standard_normal((n_classes, d_model)) / math.sqrt(d_model),
                           dtype=dtype)

    @property
    def n_blocks(self) -> int:
        return self.n_slots // len(PROJECTIONS)

    @staticmethod
    def _layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
        mu = T.mean(x, axis=0, keepdims=True)
        c = T.sub(x, mu)
        var = T.mean(T.mul(c, c), axis=0, keepdims=True)
        return T.div(c, T.power(T.add(var, eps), 0.5))

    def _attention(self, q: Tensor, k: Tensor, v: Tensor, batch: int) -> Tensor:
        S, H = self.seq_len, self.n_heads
        dh = self.d_model // H
        cols = []
        for b in range(batch):
            sl = slice(b * S, (b + 1) * S)
            heads = []
            for h in range(H):
                rows = slice(h * dh, (h + 1) * dh)
                qb, kb, vb = q[rows, sl], k[rows, sl], v[rows, sl]
                scores = T.scale(T.matmul(T.transpose(qb), kb), 1.0 / math.sqrt(dh))
                attn = T.softmax(scores, axis=1)
                heads.append(T.matmul(vb, T.transpose(attn)))
            cols.append(T.concat(heads, axis=0))
        return T.concat(cols, axis=1)

    def forward(self, tokens, *, train: bool = False, rng=None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != self.seq_len:
            raise ContractError(f"tokens must be (batch, {self.seq_len}), got {tokens.shape}")
        batch = tokens.shape[0]
        pos = np.tile(self.position.data, (1, batch))
        x = T.add(T.getitem(self.embedding, (slice(None), tokens.reshape(-1))),
                  Tensor(pos, dtype=self.embedding.data.dtype.type))
        n = len(PROJECTIONS)
        for b in range(self.n_blocks):
            base = b * n
            h = self._layer_norm(x)
            q = self.linear(base + 0, h, train=train, rng=rng)
            k = self.linear(base + 1, h, train=train, rng=rng)
            v = self.linear(base + 2, h, train=train, rng=rng)
            a = self._attention(q, k, v, batch)
            x = T.add(x, self.linear(base + 3, a, train=train, rng=rng))
            h = self._layer_norm(x)
            h = T.relu(self.linear(base + 4, h, train=train, rng=rng))
            x = T.add(x, self.linear(base + 5, h, train=train, rng=rng))
        pool = np.kron(np.eye(batch), np.full((self.seq_len, 1), 1.0 / self.seq_len))
        pooled = T.matmul(self._layer_norm(x), Tensor(pool, dtype=x.data.dtype.type))
        return T.matmul(self.head, pooled)


def build_model(spec: dict, dtype=None) -> ToyModel:
    spec = dict(spec)
    arch = spec.pop("arch", "mlp")
    if arch == "mlp":
        return ToyMLP(dtype=dtype, **spec)
    if arch == "transformer":
        return ToyTransformer(dtype=dtype, **spec)
    raise ContractError(f"unknown architecture {arch!r}")


def attach_adapters(model: ToyModel, slots, r: int, gated: bool = False, *, K: int | None = None,
                    alpha: float = 32.0, dropout_p: float = 0.05, init_std: float | None = None,
                    gate_mode: str = "nonzero", seed=None) -> ToyModel:
    """Wrap each listed slot with an adapter; gated adapters share one gate vector.

    Mutates and returns ``model``. Gates start at one, so a freshly gated
    model computes exactly what the ungated one does.
    """
    slots = [int(s) for s in slots]
    if len(set(slots)) != len(slots):
        raise ContractError(f"duplicate slot in {slots}")
    for s in slots:
        if not 0 <= s < model.n_slots:
            raise ContractError(f"slot {s} out of range for a model with {model.n_slots} slots")
        if s in model.adapters:
            raise ContractError(f"slot {s} already carries an adapter")
    if not slots:
        return model
    rng = np.random.default_rng(seed)
    dtype = model.bases[0].W.data.dtype.type
    for s in slots:
        d, k = model.slot_dims(s)
        model.adapters[s] = AdapterState.init(s, d, k, r, alpha=alpha, dropout_p=dropout_p,
                                              init_std=init_std, rng=rng, dtype=dtype)
    if gated:
        model.gate_slots = list(slots)
        model.gates = GateVector.ones(len(slots), K if K is not None else len(slots),
                                      gate_mode=gate_mode, dtype=dtype)
        model._gate_index = {s: j for j, s in enumerate(slots)}
    return model


def detach_adapters(model: ToyModel) -> ToyModel:
    model.adapters.clear()
    model.gates = None
    model.gate_slots = []
    model._gate_index = {}
    return model
