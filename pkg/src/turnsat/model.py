"""Session encoder and classification heads.

One shared turn encoder (embedding, mean pool per side, nonlinear
projection) produces a vector per turn. Turns before the targeted one run
through a "prev" GRU stack, turns after it through a separate "next" GRU
stack; the targeted vector and the two direction summaries each pass
their own small MLP and are average-pooled into the session vector z.
Scalar-logit MLP heads hang off z.

Parameters are grouped into named layers, each tagged with a role:
``body`` for everything shared, ``head_S`` for the contrastive head and
``head_T`` for the satisfaction head. The layer is also the block unit
for the block-coordinate trainer.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import Session, Turn

BODY = "body"
HEAD_S = "head_S"
HEAD_T = "head_T"

HEAD_LAYERS = {"contrastive": "head_contrastive", "satisfaction": "head_satisfaction"}


@dataclass
class ModelConfig:
    """Desk-scale model dimensions (full-scale analogues are far larger)."""

    vocab_size: int = 600
    embed_dim: int = 32
    gru_hidden: int = 32
    gru_layers: int = 1
    bidirectional: bool = True
    head_hidden: int = 32
    context_T: int = 2
    seed: int = 0

    def validate(self):
        for f in ("vocab_size", "embed_dim", "gru_hidden", "gru_layers", "head_hidden"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.context_T < 0:
            raise ValueError("context_T must be nonnegative")

    @property
    def summary_dim(self) -> int:
        return self.gru_hidden * (2 if self.bidirectional else 1)


@dataclass
class Layer:
    name: str
    role: str
    tensors: list[Tensor]


class ParamSet:
    """Named, role-tagged parameter layers for one model instance."""

    def __init__(self, config: ModelConfig, layers: list[Layer]):
        self.config = config
        self.layers: dict[str, Layer] = {l.name: l for l in layers}

    def layer(self, name: str) -> Layer:
        return self.layers[name]

    def tensors(self) -> list[Tensor]:
        return [t for l in self.layers.values() for t in l.tensors]

    def role_layers(self, role: str) -> list[Layer]:
        return [l for l in self.layers.values() if l.role == role]

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def clone(self) -> "ParamSet":
        layers = [
            Layer(l.name, l.role, [Tensor(t.data.copy(), requires_grad=True, name=t.name)
                                   for t in l.tensors])
            for l in self.layers.values()
        ]
        return ParamSet(self.config, layers)

    def layer_grads(self, grads: dict[str, np.ndarray]) -> dict[str, list[np.ndarray]]:
        """Group a flat name->grad map by layer, densifying missing entries
        with zeros (an untouched parameter has zero gradient)."""
        out = {}
        for l in self.layers.values():
            out[l.name] = [grads.get(t.name, np.zeros_like(t.data)) for t in l.tensors]
        return out


def _uniform(rng, shape, fan_in):
    # variance-preserving uniform fan-in scaling
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear_tensors(rng, name, out_dim, in_dim):
    w = Tensor(_uniform(rng, (out_dim, in_dim), in_dim), requires_grad=True, name=f"{name}.w")
    b = Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.b")
    return [w, b]


def _gru_tensors(rng, name, hidden, in_dim):
    tensors = []
    for gate in ("r", "z", "n"):
        tensors.append(Tensor(_uniform(rng, (hidden, in_dim), in_dim),
                              requires_grad=True, name=f"{name}.w_{gate}"))
        tensors.append(Tensor(_uniform(rng, (hidden, hidden), hidden),
                              requires_grad=True, name=f"{name}.u_{gate}"))
        bias = np.ones(hidden) if gate == "z" else np.zeros(hidden)
        # positive update-gate bias favors carrying the previous state
        tensors.append(Tensor(bias, requires_grad=True, name=f"{name}.b_{gate}"))
    return tensors


def _mlp_tensors(rng, name, in_dim, hidden, out_dim):
    return (_linear_tensors(rng, f"{name}.l1", hidden, in_dim)
            + _linear_tensors(rng, f"{name}.l2", out_dim, hidden))


def init_params(cfg: ModelConfig) -> ParamSet:
    """Fresh parameters under cfg.seed: weights uniform in +-sqrt(3/fan_in),
    biases zero, embedding rows uniform in +-1."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    E, H, S = cfg.embed_dim, cfg.gru_hidden, cfg.summary_dim
    layers = [
        Layer("embed", BODY, [Tensor(rng.uniform(-1, 1, size=(cfg.vocab_size, E)),
                                     requires_grad=True, name="embed.table")]),
        Layer("turn_proj", BODY, _linear_tensors(rng, "turn_proj", E, 2 * E)),
    ]
    directions = ("f", "b") if cfg.bidirectional else ("f",)
    for which in ("prev", "next"):
        for l in range(cfg.gru_layers):
            in_dim = E if l == 0 else S
            for d in directions:
                name = f"{which}_gru.l{l}{d}"
                layers.append(Layer(name, BODY, _gru_tensors(rng, name, H, in_dim)))
    layers.append(Layer("mlp_targeted", BODY, _mlp_tensors(rng, "mlp_targeted", E, cfg.head_hidden, E)))
    layers.append(Layer("mlp_prev", BODY, _mlp_tensors(rng, "mlp_prev", S, cfg.head_hidden, E)))
    layers.append(Layer("mlp_next", BODY, _mlp_tensors(rng, "mlp_next", S, cfg.head_hidden, E)))
    layers.append(Layer("head_contrastive", HEAD_S,
                        _mlp_tensors(rng, "head_contrastive", E, cfg.head_hidden, 1)))
    layers.append(Layer("head_satisfaction", HEAD_T,
                        _mlp_tensors(rng, "head_satisfaction", E, cfg.head_hidden, 1)))
    return ParamSet(cfg, layers)


def reinit_head(params: ParamSet, head: str, seed: int) -> ParamSet:
    """Redraw one head's parameters; everything else is copied bitwise."""
    if head not in HEAD_LAYERS:
        raise ContractError(f"cannot reinit {head!r}; heads are {sorted(HEAD_LAYERS)}")
    out = params.clone()
    cfg = params.config
    rng = np.random.default_rng(seed)
    name = HEAD_LAYERS[head]
    fresh = _mlp_tensors(rng, name, cfg.embed_dim, cfg.head_hidden, 1)
    out.layers[name] = Layer(name, out.layers[name].role, fresh)
    return out


# -- forward pass -------------------------------------------------------------


def _pool_side(table: Tensor, ids) -> Tensor:
    if len(ids) == 0:
        return Tensor(np.zeros(table.data.shape[1]))
    return ad.mean(ad.gather_rows(table, ids), axis=0)


def encode_turn(params: ParamSet, turn: Turn, cache: dict | None = None) -> Tensor:
    """Shared turn encoder: mean-pooled utterance and response embeddings,
    concatenated and projected through tanh. An all-empty turn encodes the
    projection of the zero vector."""
    if cache is not None:
        hit = cache.get(("turn", id(turn)))
        if hit is not None:
            return hit
    table = params.layer("embed").tensors[0]
    w, b = params.layer("turn_proj").tensors
    pooled = ad.concat([_pool_side(table, turn.utterance), _pool_side(table, turn.response)])
    vec = ad.tanh(ad.add(ad.matvec(w, pooled), b))
    if cache is not None:
        cache[("turn", id(turn))] = vec
    return vec


def _gru_direction(tensors: list[Tensor], xs: list[Tensor]) -> list[Tensor]:
    w_r, u_r, b_r, w_z, u_z, b_z, w_n, u_n, b_n = tensors
    h = Tensor(np.zeros(w_r.data.shape[0]))
    outs = []
    for x in xs:
        r = ad.sigmoid(ad.add(ad.add(ad.matvec(w_r, x), ad.matvec(u_r, h)), b_r))
        z = ad.sigmoid(ad.add(ad.add(ad.matvec(w_z, x), ad.matvec(u_z, h)), b_z))
        n = ad.tanh(ad.add(ad.add(ad.matvec(w_n, x), ad.mul(r, ad.matvec(u_n, h))), b_n))
        h = ad.add(ad.mul(1.0 - z, n), ad.mul(z, h))
        outs.append(h)
    return outs


def _context_summary(params: ParamSet, which: str, vecs: list[Tensor]) -> Tensor | None:
    """Run context turn vectors through the named GRU stack; the summary is
    the concatenated final state of each direction of the top layer."""
    if not vecs:
        return None
    cfg = params.config
    seq = vecs
    fwd = bwd = None
    for l in range(cfg.gru_layers):
        fwd = _gru_direction(params.layer(f"{which}_gru.l{l}f").tensors, seq)
        if cfg.bidirectional:
            bwd = _gru_direction(params.layer(f"{which}_gru.l{l}b").tensors, seq[::-1])
            seq = [ad.concat([f, bk]) for f, bk in zip(fwd, bwd[::-1])]
        else:
            seq = fwd
    if cfg.bidirectional:
        return ad.concat([fwd[-1], bwd[-1]])
    return fwd[-1]


def _mlp(tensors: list[Tensor], x: Tensor, hidden_act=ad.relu) -> Tensor:
    w1, b1, w2, b2 = tensors
    h = hidden_act(ad.add(ad.matvec(w1, x), b1))
    return ad.add(ad.matvec(w2, h), b2)


def _branch_mlp(tensors: list[Tensor], x: Tensor) -> Tensor:
    # tanh keeps the branch transforms smooth; the heads stay ReLU
    return _mlp(tensors, x, hidden_act=ad.tanh)


def session_representation(params: ParamSet, session: Session,
                           cache: dict | None = None) -> Tensor:
    """Pool the transformed targeted, previous-context, and next-context
    branches into z. An empty context side contributes a zero branch."""
    t = session.targeted_index
    zero_branch = Tensor(np.zeros(params.config.embed_dim))

    def branch(which, turns):
        if not turns:
            return zero_branch
        key = ("branch", which, tuple(id(x) for x in turns))
        if cache is not None:
            hit = cache.get(key)
            if hit is not None:
                return hit
        vecs = [encode_turn(params, x, cache) for x in turns]
        out = _branch_mlp(params.layer(f"mlp_{which}").tensors,
                          _context_summary(params, which, vecs))
        if cache is not None:
            cache[key] = out
        return out

    targeted = _branch_mlp(params.layer("mlp_targeted").tensors,
                           encode_turn(params, session.turns[t], cache))
    prev = branch("prev", list(session.turns[:t]))
    nxt = branch("next", list(session.turns[t + 1:]))
    return ad.mean(ad.stack([prev, targeted, nxt]), axis=0)


def head_forward(params: ParamSet, z: Tensor, head: str) -> Tensor:
    """Scalar logit of the named head; probabilities are taken downstream."""
    if head not in HEAD_LAYERS:
        raise ContractError(f"unknown head {head!r}; expected one of {sorted(HEAD_LAYERS)}")
    out = _mlp(params.layer(HEAD_LAYERS[head]).tensors, z)
    return ad.reshape(out, ())


def forward_logit(params: ParamSet, session: Session, head: str,
                  cache: dict | None = None) -> Tensor:
    return head_forward(params, session_representation(params, session, cache), head)


# -- checkpoints ----------------------------------------------------------------

_MAGIC = "turnsat-checkpoint v1"


def save_checkpoint(params: ParamSet, path: str) -> None:
    """Write a checkpoint directory: a plain-text manifest plus the raw
    little-endian float64 parameter payload."""
    os.makedirs(path, exist_ok=True)
    lines = [_MAGIC]
    for f in fields(ModelConfig):
        lines.append(f"config {f.name} {getattr(params.config, f.name)}")
    blobs = []
    offset = 0
    for layer in params.layers.values():
        for t in layer.tensors:
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            dims = "x".join(str(n) for n in t.data.shape) or "scalar"
            lines.append(
                f"tensor {layer.name} {layer.role} {t.name} {dims} {offset} {t.data.size}"
            )
            blobs.append(raw)
            offset += t.data.size
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(b"".join(blobs))


class CheckpointError(ValueError):
    """Checkpoint structure does not match what the caller expects."""


def _parse_bool(s):
    return s == "True"


def load_checkpoint(path: str, expect: ParamSet | None = None) -> ParamSet:
    """Load a checkpoint. When ``expect`` is given, the stored layer names,
    roles, and shapes must match it exactly."""
    with open(os.path.join(path, "manifest.txt")) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _MAGIC:
        raise CheckpointError(f"not a checkpoint manifest: {path}")
    cfg_kwargs = {}
    casts = {f.name: (_parse_bool if f.type == "bool" else type(getattr(ModelConfig(), f.name)))
             for f in fields(ModelConfig)}
    entries = []
    for ln in lines[1:]:
        if not ln:
            continue
        kind, rest = ln.split(" ", 1)
        if kind == "config":
            key, val = rest.split(" ", 1)
            cfg_kwargs[key] = casts[key](val)
        elif kind == "tensor":
            layer_name, role, tname, dims, offset, size = rest.split(" ")
            shape = () if dims == "scalar" else tuple(int(x) for x in dims.split("x"))
            entries.append((layer_name, role, tname, shape, int(offset), int(size)))
        else:
            raise CheckpointError(f"unknown manifest line kind {kind!r}")
    cfg = ModelConfig(**cfg_kwargs)
    payload = np.fromfile(os.path.join(path, "params.bin"), dtype="<f8")

    layers: dict[str, Layer] = {}
    for layer_name, role, tname, shape, offset, size in entries:
        flat = payload[offset:offset + size]
        if flat.size != size or int(np.prod(shape, dtype=int)) != size:
            raise CheckpointError(f"payload truncated for tensor {tname}")
        t = Tensor(flat.reshape(shape).copy(), requires_grad=True, name=tname)
        layers.setdefault(layer_name, Layer(layer_name, role, [])).tensors.append(t)
        if layers[layer_name].role != role:
            raise CheckpointError(f"conflicting roles for layer {layer_name}")
    loaded = ParamSet(cfg, list(layers.values()))

    if expect is not None:
        want = {(l.name, l.role, t.name, t.data.shape)
                for l in expect.layers.values() for t in l.tensors}
        got = {(l.name, l.role, t.name, t.data.shape)
               for l in loaded.layers.values() for t in l.tensors}
        if want != got:
            missing = want - got
            extra = got - want
            raise CheckpointError(
                f"checkpoint structure mismatch; missing={sorted(missing)[:3]} "
                f"extra={sorted(extra)[:3]}"
            )
    return loaded
