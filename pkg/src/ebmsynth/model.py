"""Attention-based energy network over (token sequence, feature sequence) pairs.

A bidirectional text encoder produces a memory; a non-causal decoder reads the
full feature sequence plus that memory (self-attention and cross-attention,
no masking anywhere) and emits per-frame vectors g_t; a small MLP head maps
each g_t to a frame energy e_t; the utterance energy is the attention-weighted
sum E = sum_t alpha_t * e_t with alpha = softmax(v * e) for a learned scalar v
(v starts at 0, i.e. mean pooling).

Graphs are built per (text length, frame count) and cached; parameters are a
plain name -> array dict bound at evaluation time, so concurrent scoring with
shared parameters is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = ["ModelConfig", "EnergyBreakdown", "EnergyModel", "sinusoidal_encoding"]


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position table, shape (length, dim)."""
    pe = np.zeros((length, dim))
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, dim, 2, dtype=np.float64) * (-math.log(10000.0) / dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: dim // 2])
    return pe


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int
    embed_dim: int = 32
    hidden_dim: int = 32
    heads: int = 2
    encoder_layers: int = 1
    decoder_layers: int = 1
    head_hidden_dim: int = 64

    def __post_init__(self):
        dims = (self.vocab_size, self.feature_dim, self.embed_dim, self.hidden_dim,
                self.heads, self.encoder_layers, self.decoder_layers, self.head_hidden_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all config dimensions must be >= 1, got {self}")
        if self.embed_dim % self.heads or self.hidden_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} and hidden_dim {self.hidden_dim} "
                f"must be divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "feature_dim": self.feature_dim,
            "embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim,
            "heads": self.heads, "encoder_layers": self.encoder_layers,
            "decoder_layers": self.decoder_layers, "head_hidden_dim": self.head_hidden_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class EnergyBreakdown:
    """Utterance energy with its per-frame decomposition."""
    energy: float
    frame_energies: np.ndarray  # shape (T,)
    weights: np.ndarray         # shape (T,), non-negative, sums to 1


def validate_tokens(ids, vocab_size: int) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"token sequence must be 1-D and non-empty, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise ValueError(
            f"token id out of range: ids span [{arr.min()}, {arr.max()}], vocab {vocab_size}")
    return arr


def validate_features(Y, feature_dim: int | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(Y, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"feature sequence must be a non-empty T x F matrix, got {arr.shape}")
    if feature_dim is not None and arr.shape[1] != feature_dim:
        raise ValueError(f"feature dim mismatch: got {arr.shape[1]}, expected {feature_dim}")
    if not np.isfinite(arr).all():
        raise ValueError("feature sequence contains non-finite entries")
    return arr


def one_hot(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    out = np.zeros((len(ids), vocab_size))
    out[np.arange(len(ids)), ids] = 1.0
    return out


@dataclass
class GraphBundle:
    graph: ad.Graph
    nodes: dict = field(default_factory=dict)


class EnergyModel:
    """Builds, caches, and evaluates energy graphs for one configuration."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._param_leaves: dict[str, ad.Node] = {}
        for name, shape in self.param_shapes().items():
            self._param_leaves[name] = ad.leaf(name, shape, param=True)
        self._bundles: dict[tuple, GraphBundle] = {}

    # -- parameter inventory ------------------------------------------------

    def param_shapes(self) -> dict[str, tuple]:
        c = self.config
        h, ff = c.hidden_dim, 2 * c.hidden_dim
        shapes: dict[str, tuple] = {
            "embed": (c.vocab_size, c.embed_dim),
            "enc_in.w": (c.embed_dim, h), "enc_in.b": (1, h),
            "enc.pos": (1, 1),
        }

        def attn(prefix):
            for nm in ("wq", "wk", "wv", "wo"):
                shapes[f"{prefix}.{nm}"] = (h, h)
            for nm in ("bq", "bk", "bv", "bo"):
                shapes[f"{prefix}.{nm}"] = (1, h)

        def lnorm(prefix):
            shapes[f"{prefix}.g"] = (1, h)
            shapes[f"{prefix}.b"] = (1, h)

        def ffn(prefix):
            shapes[f"{prefix}.w1"] = (h, ff)
            shapes[f"{prefix}.b1"] = (1, ff)
            shapes[f"{prefix}.w2"] = (ff, h)
            shapes[f"{prefix}.b2"] = (1, h)

        for i in range(c.encoder_layers):
            attn(f"enc{i}.attn")
            lnorm(f"enc{i}.ln1")
            ffn(f"enc{i}.ff")
            lnorm(f"enc{i}.ln2")
        shapes["dec_in.w"] = (c.feature_dim, h)
        shapes["dec_in.b"] = (1, h)
        shapes["dec.pos"] = (1, 1)
        for i in range(c.decoder_layers):
            attn(f"dec{i}.self")
            lnorm(f"dec{i}.ln1")
            attn(f"dec{i}.cross")
            lnorm(f"dec{i}.ln2")
            ffn(f"dec{i}.ff")
            lnorm(f"dec{i}.ln3")
        shapes["out.w"] = (h, h)
        shapes["out.b"] = (1, h)
        k = c.head_hidden_dim
        shapes["head.w1"] = (h, k)
        shapes["head.b1"] = (1, k)
        shapes["head.w2"] = (k, k)
        shapes["head.b2"] = (1, k)
        shapes["head.a"] = (k, 1)
        shapes["head.b"] = (1, 1)
        shapes["weighting.v"] = (1, 1)
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains and
        position scales, zero head bias and weighting scalar."""
        params = {}
        for name, shape in self.param_shapes().items():
            last = name.rsplit(".", 1)[-1]
            if name in ("weighting.v", "head.b"):
                params[name] = np.zeros(shape)
            elif last == "g" or last == "pos":
                params[name] = np.ones(shape)
            elif last.startswith("b"):
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
        return params

    # -- graph construction ---------------------------------------------------

    def _affine(self, x, wname, bname, rows):
        p = self._param_leaves
        tiled_b = ad.matmul(self._ones(rows), p[bname])
        return ad.add(ad.matmul(x, p[wname]), tiled_b)

    def _ones(self, rows):
        key = ("ones", rows)
        node = self._const_cache.get(key)
        if node is None:
            node = ad.const(np.ones((rows, 1)))
            self._const_cache[key] = node
        return node

    def _pos_table(self, length):
        key = ("pos", length, self.config.embed_dim)
        node = self._const_cache.get(key)
        if node is None:
            node = ad.const(sinusoidal_encoding(length, self.config.embed_dim))
            self._const_cache[key] = node
        return node

    def _pos_table_hidden(self, length):
        key = ("posh", length, self.config.hidden_dim)
        node = self._const_cache.get(key)
        if node is None:
            node = ad.const(sinusoidal_encoding(length, self.config.hidden_dim))
            self._const_cache[key] = node
        return node

    def _ln(self, x, prefix, rows):
        p = self._param_leaves
        normed = ad.layer_norm(x)
        g = ad.matmul(self._ones(rows), p[f"{prefix}.g"])
        b = ad.matmul(self._ones(rows), p[f"{prefix}.b"])
        return ad.add(ad.mul(normed, g), b)

    def _attention(self, prefix, q_in, kv_in, rows_q, rows_kv):
        c = self.config
        dh = c.hidden_dim // c.heads
        q = self._affine(q_in, f"{prefix}.wq", f"{prefix}.bq", rows_q)
        k = self._affine(kv_in, f"{prefix}.wk", f"{prefix}.bk", rows_kv)
        v = self._affine(kv_in, f"{prefix}.wv", f"{prefix}.bv", rows_kv)
        contexts = []
        for head in range(c.heads):
            cols = (head * dh, (head + 1) * dh)
            qh = ad.slice_(q, [(0, rows_q), cols])
            kh = ad.slice_(k, [(0, rows_kv), cols])
            vh = ad.slice_(v, [(0, rows_kv), cols])
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
            attn = ad.softmax(scores, axis=1)
            contexts.append(ad.matmul(attn, vh))
        ctx = contexts[0] if len(contexts) == 1 else ad.concat(contexts, axis=1)
        return self._affine(ctx, f"{prefix}.wo", f"{prefix}.bo", rows_q)

    def _ffn(self, prefix, x, rows):
        hidden = ad.relu(self._affine(x, f"{prefix}.w1", f"{prefix}.b1", rows))
        return self._affine(hidden, f"{prefix}.w2", f"{prefix}.b2", rows)

    def _encoder_nodes(self, x_node, length):
        p = self._param_leaves
        emb = ad.matmul(x_node, p["embed"])
        emb = ad.add(emb, ad.scale(self._pos_table(length), p["enc.pos"]))
        h = self._affine(emb, "enc_in.w", "enc_in.b", length)
        for i in range(self.config.encoder_layers):
            h = self._ln(ad.add(h, self._attention(f"enc{i}.attn", h, h, length, length)),
                         f"enc{i}.ln1", length)
            h = self._ln(ad.add(h, self._ffn(f"enc{i}.ff", h, length)),
                         f"enc{i}.ln2", length)
        return h

    def _decoder_nodes(self, memory_node, y_node, length, frames):
        p = self._param_leaves
        h = self._affine(y_node, "dec_in.w", "dec_in.b", frames)
        h = ad.add(h, ad.scale(self._pos_table_hidden(frames), p["dec.pos"]))
        for i in range(self.config.decoder_layers):
            h = self._ln(ad.add(h, self._attention(f"dec{i}.self", h, h, frames, frames)),
                         f"dec{i}.ln1", frames)
            h = self._ln(ad.add(h, self._attention(
                f"dec{i}.cross", h, memory_node, frames, length)),
                f"dec{i}.ln2", frames)
            h = self._ln(ad.add(h, self._ffn(f"dec{i}.ff", h, frames)),
                         f"dec{i}.ln3", frames)
        return self._affine(h, "out.w", "out.b", frames)

    def _head_nodes(self, g_node, frames):
        h1 = ad.relu(self._affine(g_node, "head.w1", "head.b1", frames))
        h2 = ad.relu(self._affine(h1, "head.w2", "head.b2", frames))
        e2d = self._affine(h2, "head.a", "head.b", frames)
        return ad.reshape(e2d, (frames,))

    def _weighting_nodes(self, e_node):
        p = self._param_leaves
        alpha = ad.softmax(ad.scale(e_node, p["weighting.v"]), axis=0)
        energy = ad.reduce_sum(ad.mul(alpha, e_node))
        return alpha, energy

    # cache of constant nodes shared across bundles
    @property
    def _const_cache(self):
        cache = getattr(self, "_consts", None)
        if cache is None:
            cache = {}
            self._consts = cache
        return cache

    def energy_nodes(self, length: int, frames: int, prefix: str = "") -> dict[str, ad.Node]:
        """Build (uncached) the full energy subgraph with prefixed input leaves."""
        c = self.config
        x = ad.leaf(prefix + "x", (length, c.vocab_size))
        y = ad.leaf(prefix + "y", (frames, c.feature_dim))
        memory = self._encoder_nodes(x, length)
        g = self._decoder_nodes(memory, y, length, frames)
        e = self._head_nodes(g, frames)
        alpha, energy = self._weighting_nodes(e)
        return {"x": x, "y": y, "memory": memory, "g": g, "e": e,
                "alpha": alpha, "energy": energy}

    def _bundle(self, key, build):
        bundle = self._bundles.get(key)
        if bundle is None:
            nodes = build()
            bundle = GraphBundle(ad.Graph(nodes["out"]), nodes)
            self._bundles[key] = bundle
        return bundle

    def _energy_bundle(self, length, frames):
        def build():
            nodes = self.energy_nodes(length, frames)
            nodes["out"] = nodes["energy"]
            return nodes
        return self._bundle(("energy", length, frames), build)

    # -- public operations ----------------------------------------------------

    def encode_text(self, params, ids) -> np.ndarray:
        """Bidirectional text encoding; rows depend on every input position."""
        ids = validate_tokens(ids, self.config.vocab_size)
        length = len(ids)

        def build():
            x = ad.leaf("x", (length, self.config.vocab_size))
            return {"x": x, "out": self._encoder_nodes(x, length)}

        bundle = self._bundle(("enc", length), build)
        values = ad.evaluate(bundle.graph,
                             {**params, "x": one_hot(ids, self.config.vocab_size)})
        return values[bundle.nodes["out"]]

    def decode_features(self, params, memory, Y) -> np.ndarray:
        """Non-causal decoding: every g_t sees the whole memory and all of Y."""
        memory = np.ascontiguousarray(memory, dtype=np.float64)
        if memory.ndim != 2 or memory.shape[1] != self.config.hidden_dim:
            raise ValueError(
                f"memory must be L x {self.config.hidden_dim}, got {memory.shape}")
        Y = validate_features(Y, self.config.feature_dim)
        length, frames = memory.shape[0], Y.shape[0]

        def build():
            mem = ad.leaf("mem", (length, self.config.hidden_dim))
            y = ad.leaf("y", (frames, self.config.feature_dim))
            return {"mem": mem, "y": y,
                    "out": self._decoder_nodes(mem, y, length, frames)}

        bundle = self._bundle(("dec", length, frames), build)
        values = ad.evaluate(bundle.graph, {**params, "mem": memory, "y": Y})
        return values[bundle.nodes["out"]]

    def frame_energies(self, params, g) -> np.ndarray:
        """Per-frame energies from decoder outputs; frames are independent."""
        g = np.ascontiguousarray(g, dtype=np.float64)
        if g.ndim != 2 or g.shape[1] != self.config.hidden_dim:
            raise ValueError(f"g must be T x {self.config.hidden_dim}, got {g.shape}")
        frames = g.shape[0]

        def build():
            gleaf = ad.leaf("g", (frames, self.config.hidden_dim))
            return {"g": gleaf, "out": self._head_nodes(gleaf, frames)}

        bundle = self._bundle(("head", frames), build)
        values = ad.evaluate(bundle.graph, {**params, "g": g})
        return values[bundle.nodes["out"]]

    def utterance_energy(self, params, e) -> EnergyBreakdown:
        """Attention-weighted pooling of frame energies."""
        e = np.ascontiguousarray(e, dtype=np.float64)
        if e.ndim != 1 or e.size < 1:
            raise ValueError(f"frame energies must be a non-empty vector, got {e.shape}")
        frames = e.size

        def build():
            eleaf = ad.leaf("e", (frames,))
            alpha, energy = self._weighting_nodes(eleaf)
            return {"e": eleaf, "alpha": alpha, "out": energy}

        bundle = self._bundle(("utt", frames), build)
        values = ad.evaluate(bundle.graph, {**params, "e": e})
        return EnergyBreakdown(
            energy=float(values[bundle.nodes["out"]]),
            frame_energies=e.copy(),
            weights=values[bundle.nodes["alpha"]],
        )

    def energy(self, params, ids, Y) -> EnergyBreakdown:
        """Utterance energy of a (text, features) pair with its breakdown."""
        ids = validate_tokens(ids, self.config.vocab_size)
        Y = validate_features(Y, self.config.feature_dim)
        bundle = self._energy_bundle(len(ids), Y.shape[0])
        values = ad.evaluate(bundle.graph, {
            **params, "x": one_hot(ids, self.config.vocab_size), "y": Y})
        return EnergyBreakdown(
            energy=float(values[bundle.nodes["energy"]]),
            frame_energies=values[bundle.nodes["e"]],
            weights=values[bundle.nodes["alpha"]],
        )

    def energy_grad_features(self, params, ids, Y) -> np.ndarray:
        """d E / d Y, exact reverse-mode, same shape as Y."""
        return self.energy_with_feature_grad(params, ids, Y)[1]

    def energy_with_feature_grad(self, params, ids, Y):
        ids = validate_tokens(ids, self.config.vocab_size)
        Y = validate_features(Y, self.config.feature_dim)
        bundle = self._energy_bundle(len(ids), Y.shape[0])
        bound = {**params, "x": one_hot(ids, self.config.vocab_size), "y": Y}
        values = ad.evaluate(bundle.graph, bound)
        grad = ad.gradients(bundle.graph, bundle.nodes["energy"], ["y"], values=values)["y"]
        return float(values[bundle.nodes["energy"]]), grad

    def feature_gradient_fn(self, params):
        """Closure (ids, Y) -> (E, dE/dY) for the samplers."""
        def fn(ids, Y):
            return self.energy_with_feature_grad(params, ids, Y)
        return fn
