"""Encoder-decoder transformer whose decoder fuses three attention streams.

The encoder is a pre-LayerNorm GPT2 stack without an attention mask; persona
and history go through it in separate calls.  Each decoder block runs causal
self-attention over the reply plus one unmasked bi-attention per encoded
source, fuses the three outputs, and then continues exactly like a GPT2
block.  Logits for every stream come from one prediction layer tied to the
decoder token embedding.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import N_TOKEN_TYPES, LengthError, SampleArrays, VocabularyError
from .fusion import FUSION_METHODS, FusionParams, fuse, init_fusion_params
from .tensor import DimensionError, Tensor

CHECKPOINT_FORMAT = "fusionformer-checkpoint"
CHECKPOINT_VERSION = 1

SOURCES = ("persona", "history")
ATTENTIONS = ("self_attn", "persona_attn", "history_attn")


@dataclass
class ModelConfig:
    vocab_size: int = 200
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_positions: int = 128
    n_token_types: int = N_TOKEN_TYPES
    dropout: float = 0.1
    fusion_method: str = "sw"
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    init_std: float = 0.02
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "max_positions", "n_token_types"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.fusion_method not in FUSION_METHODS:
            raise ValueError(f"fusion_method must be one of {FUSION_METHODS}, got {self.fusion_method!r}")
        weights = (self.alpha, self.beta, self.gamma)
        if min(weights) < 0 or max(weights) <= 0:
            raise ValueError(f"loss weights must be nonnegative with one positive, got {weights}")
        if self.init_std <= 0:
            raise ValueError(f"init_std must be positive, got {self.init_std}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        """GPT2-small dimensions (12 layers, width 768, 12 heads)."""
        base = dict(vocab_size=50257, n_layers=12, d_model=768, n_heads=12, max_positions=1024)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncodedState:
    H: Tensor
    source_tag: str


@dataclass
class AttentionModule:
    """Q/K/V/output projections (each ``d x d``) plus biases."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    n_heads: int

    def parameters(self) -> Dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    L, d = x.shape
    return x.reshape(L, n_heads, d // n_heads).transpose(1, 0, 2)


def multi_head_attention(
    module: AttentionModule,
    h_q: Tensor,
    h_kv: Tensor,
    causal: bool = False,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with ``h_q`` as queries and ``h_kv`` as keys/values."""
    d = module.w_q.shape[0]
    if h_q.ndim != 2 or h_kv.ndim != 2 or h_q.shape[1] != d or h_kv.shape[1] != d:
        raise DimensionError(f"attention expects widths {d}, got query {h_q.shape} and source {h_kv.shape}")
    n_heads = module.n_heads
    L_q, L_a = h_q.shape[0], h_kv.shape[0]
    q = _split_heads(T.matmul(h_q, module.w_q) + module.b_q, n_heads)
    k = _split_heads(T.matmul(h_kv, module.w_k) + module.b_k, n_heads)
    v = _split_heads(T.matmul(h_kv, module.w_v) + module.b_v, n_heads)
    scores = T.scale(T.matmul(q, k.transpose(0, 2, 1)), 1.0 / math.sqrt(d // n_heads))
    mask = np.tril(np.ones((L_q, L_a), dtype=bool)) if causal else None
    weights = T.softmax(scores, axis=-1, mask=mask)
    ctx = T.matmul(T.dropout(weights, dropout, rng), v)
    out = T.matmul(ctx.transpose(1, 0, 2).reshape(L_q, d), module.w_o) + module.b_o
    return (out, weights) if return_weights else out


def mh_bi_attention(module: AttentionModule, h_c: Tensor, h_a: Tensor, **kw):
    return multi_head_attention(module, h_c, h_a, causal=False, **kw)


def mh_self_attention(module: AttentionModule, h_c: Tensor, **kw):
    return multi_head_attention(module, h_c, h_c, causal=True, **kw)


class FusionTransformer:
    """Parameters and forward pass of the multi-source dialogue model."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self.fusion: List[FusionParams] = []
        self.training = False
        self._init(np.random.default_rng(seed))

    # -- construction -----------------------------------------------------------
    def _new(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _init(self, rng: np.random.Generator) -> None:
        c = self.config
        d, std = c.d_model, c.init_std
        normal = lambda *shape: rng.normal(0.0, std, size=shape)  # noqa: E731

        for side in ("enc", "dec"):
            self._new(f"{side}.wte", normal(c.vocab_size, d))
            self._new(f"{side}.wpe", normal(c.max_positions, d))
            self._new(f"{side}.wtt", normal(c.n_token_types, d))
            for i in range(c.n_layers):
                p = f"{side}.h.{i}"
                self._new(f"{p}.ln_1.weight", np.ones(d))
                self._new(f"{p}.ln_1.bias", np.zeros(d))
                # decoder bi-attentions start as copies of the layer's self-attention
                attn = {
                    "w_q": normal(d, d), "b_q": np.zeros(d),
                    "w_k": normal(d, d), "b_k": np.zeros(d),
                    "w_v": normal(d, d), "b_v": np.zeros(d),
                    "w_o": normal(d, d), "b_o": np.zeros(d),
                }
                for a in (ATTENTIONS if side == "dec" else ("attn",)):
                    for k, v in attn.items():
                        self._new(f"{p}.{a}.{k}", v.copy())
                self._new(f"{p}.ln_2.weight", np.ones(d))
                self._new(f"{p}.ln_2.bias", np.zeros(d))
                self._new(f"{p}.mlp.fc.weight", normal(d, 4 * d))
                self._new(f"{p}.mlp.fc.bias", np.zeros(4 * d))
                self._new(f"{p}.mlp.proj.weight", normal(4 * d, d))
                self._new(f"{p}.mlp.proj.bias", np.zeros(d))
            self._new(f"{side}.ln_f.weight", np.ones(d))
            self._new(f"{side}.ln_f.bias", np.zeros(d))

        for i in range(c.n_layers):
            fp = init_fusion_params(c.fusion_method, d, rng, std=std, layer=i)
            for k, t in fp.tensors.items():
                self.params[f"fusion.{i}.{k}"] = t
            self.fusion.append(fp)

    def attention_module(self, prefix: str) -> AttentionModule:
        p = self.params
        return AttentionModule(
            **{k: p[f"{prefix}.{k}"] for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")},
            n_heads=self.config.n_heads,
        )

    # -- parameter access -----------------------------------------------------
    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    @staticmethod
    def is_fusion_param(name: str) -> bool:
        return name.startswith("fusion.")

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def train(self, mode: bool = True) -> "FusionTransformer":
        self.training = mode
        return self

    def eval(self) -> "FusionTransformer":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()

    def fusion_weights(self) -> Optional[np.ndarray]:
        """Per-layer ``(w_c, w_p, w_h)`` normalized to sum 1, or None for non-weighting methods."""
        rows = [fp.source_weights() for fp in self.fusion]
        if any(r is None for r in rows):
            return None
        raw = np.array(rows)
        return raw / raw.sum(axis=1, keepdims=True)

    # -- forward pieces -----------------------------------------------------------
    def _drop(self, x: Tensor, rng) -> Tensor:
        return T.dropout(x, self.config.dropout, rng, training=self.training)

    def embed(self, side: str, tokens, positions, types, rng=None) -> Tensor:
        tokens, positions, types = (np.asarray(a, dtype=np.int64) for a in (tokens, positions, types))
        if not (tokens.shape == positions.shape == types.shape) or tokens.ndim != 1:
            raise DimensionError(
                f"embed: token/position/type sequences must be equal-length 1-D, got "
                f"{tokens.shape}, {positions.shape}, {types.shape}"
            )
        c = self.config
        for name, ids, n in (("token", tokens, c.vocab_size), ("position", positions, c.max_positions),
                             ("token-type", types, c.n_token_types)):
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise VocabularyError(f"{side} {name} table has {n} rows; got id out of range in {ids.tolist()}")
        p = self.params
        h = T.embedding(p[f"{side}.wte"], tokens) + T.embedding(p[f"{side}.wpe"], positions)
        h = h + T.embedding(p[f"{side}.wtt"], types)
        return self._drop(h, rng)

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"],
                            self.config.layer_norm_eps)

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = T.gelu(T.matmul(x, p[f"{prefix}.fc.weight"]) + p[f"{prefix}.fc.bias"])
        return T.matmul(h, p[f"{prefix}.proj.weight"]) + p[f"{prefix}.proj.bias"]

    def encoder_block(self, layer: int, x: Tensor, rng=None) -> Tensor:
        p = f"enc.h.{layer}"
        drop = self.config.dropout if self.training else 0.0
        h = self._ln(f"{p}.ln_1", x)
        a = mh_bi_attention(self.attention_module(f"{p}.attn"), h, h, dropout=drop, rng=rng)
        x = x + self._drop(a, rng)
        return x + self._drop(self._mlp(f"{p}.mlp", self._ln(f"{p}.ln_2", x)), rng)

    def encode(self, source_embedding: Tensor, source_tag: str = "persona", rng=None) -> EncodedState:
        L = source_embedding.shape[0]
        if L > self.config.max_positions:
            raise LengthError(f"{source_tag} length {L} exceeds max_positions={self.config.max_positions}")
        x = source_embedding
        for i in range(self.config.n_layers):
            x = self.encoder_block(i, x, rng)
        return EncodedState(self._ln("enc.ln_f", x), source_tag)

    def encode_source(self, tokens, positions, types, source_tag: str, rng=None) -> EncodedState:
        if len(tokens) > self.config.max_positions:
            raise LengthError(f"{source_tag} length {len(tokens)} exceeds max_positions={self.config.max_positions}")
        return self.encode(self.embed("enc", tokens, positions, types, rng), source_tag, rng)

    def decoder_block(self, layer: int, h_c: Tensor, h_p: Tensor, h_h: Tensor,
                      fusion: Optional[FusionParams] = None, rng=None) -> Tensor:
        p = f"dec.h.{layer}"
        fusion = self.fusion[layer] if fusion is None else fusion
        drop = self.config.dropout if self.training else 0.0
        h = self._ln(f"{p}.ln_1", h_c)
        a_c = mh_self_attention(self.attention_module(f"{p}.self_attn"), h, dropout=drop, rng=rng)
        a_p = mh_bi_attention(self.attention_module(f"{p}.persona_attn"), h, h_p, dropout=drop, rng=rng)
        a_h = mh_bi_attention(self.attention_module(f"{p}.history_attn"), h, h_h, dropout=drop, rng=rng)
        a_f = fuse(fusion, a_c, a_p, a_h, causal=True)
        x = h_c + self._drop(a_f, rng)
        return x + self._drop(self._mlp(f"{p}.mlp", self._ln(f"{p}.ln_2", x)), rng)

    def decode(self, tokens, positions, types, persona: EncodedState, history: EncodedState, rng=None) -> Tensor:
        if len(tokens) > self.config.max_positions:
            raise LengthError(f"reply length {len(tokens)} exceeds max_positions={self.config.max_positions}")
        x = self.embed("dec", tokens, positions, types, rng)
        for i in range(self.config.n_layers):
            x = self.decoder_block(i, x, persona.H, history.H, rng=rng)
        return self._ln("dec.ln_f", x)

    def predict_logits(self, H: Tensor) -> Tensor:
        E = self.params["dec.wte"]
        if H.ndim != 2 or H.shape[1] != E.shape[1]:
            raise DimensionError(f"predict_logits expects width {E.shape[1]}, got {H.shape}")
        return T.matmul(H, E.T)

    def forward(self, item: SampleArrays, rng=None) -> Tuple[Tensor, Tensor, Tensor]:
        """Teacher-forced logits ``(persona, history, reply)`` for one sample."""
        enc_p = self.encode_source(item.persona.tokens, item.persona.positions, item.persona.types, "persona", rng)
        enc_h = self.encode_source(item.history.tokens, item.history.positions, item.history.types, "history", rng)
        r = item.reply
        dec = self.decode(r.tokens, r.positions, r.types, enc_p, enc_h, rng)
        return self.predict_logits(enc_p.H), self.predict_logits(enc_h.H), self.predict_logits(dec)

    def next_token_logprobs(self, prefix, persona: EncodedState, history: EncodedState) -> np.ndarray:
        """Log-probabilities over the vocabulary for the token after ``prefix`` (no graph)."""
        from .data import TYPE_REPLY

        prefix = np.asarray(prefix, dtype=np.int64)
        n = len(prefix)
        with T.no_grad():
            h = self.decode(prefix, np.arange(n), np.full(n, TYPE_REPLY), persona, history)
            logits = self.predict_logits(h[n - 1:n]).data[0]
        z = logits - logits.max()
        return z - np.log(np.exp(z).sum())


# -- checkpoints -------------------------------------------------------------------
def save_checkpoint(path, model: FusionTransformer, vocab_tokens: Optional[List[str]] = None,
                    extra: Optional[dict] = None) -> None:
    """Write a ``.npz`` holding ``__meta__`` (JSON) plus one array per parameter.

    ``__meta__`` carries ``format``, ``version``, ``config``, ``vocab`` (the
    full id-ordered token list, or null) and ``extra``.  Parameter arrays are
    stored under ``param/<name>``.  The file is written to a temporary name
    and renamed into place.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab": list(vocab_tokens) if vocab_tokens is not None else None,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.array(json.dumps(meta))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple[FusionTransformer, dict]:
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz.files:
            raise ValueError(f"{path} is not a fusionformer checkpoint (no __meta__ entry)")
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unexpected checkpoint format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        state = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
    model = FusionTransformer(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta
