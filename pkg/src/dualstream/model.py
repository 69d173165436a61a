"""A small decoder-only transformer exposing per-layer states and attention.

Pre-norm blocks, causal masking, learned positional embeddings, and a
weight-tied unembedding.  The forward pass runs on the autodiff kernels, so a
fusion hook carrying taped parameters makes the path from the hook to the
logits differentiable while plain inference records nothing.

Layer removal (``skip_layers``) is identity pass-through of the whole block;
a hooked layer has its self-attention output replaced by the hook's output.
Skipped and hooked layers record identity attention patterns in the trace so
trace shapes never depend on options.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolationError
from .tensorstore import load_tensors, save_tensors

Array = np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_seq: int
    seed: int = 0

    def __post_init__(self):
        counts = {
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_model": self.d_model,
            "d_ff": self.d_ff, "vocab_size": self.vocab_size, "max_seq": self.max_seq,
        }
        for name, v in counts.items():
            if v < 1:
                raise ContractViolationError(f"{name} must be >= 1, got {v}")
        if self.d_model % self.n_heads != 0:
            raise ContractViolationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_model": self.d_model,
            "d_ff": self.d_ff, "vocab_size": self.vocab_size, "max_seq": self.max_seq,
            "seed": self.seed,
        }


@dataclass
class ForwardOptions:
    """Layer removal and fusion-hook placement for a single forward pass."""
    skip_layers: frozenset[int] = frozenset()
    dssp_layer: int | None = None
    dssp_hook: Callable[[Tensor], Tensor] | None = None

    def validate(self, n_layers: int) -> None:
        for l in self.skip_layers:
            if not 0 <= l < n_layers:
                raise ContractViolationError(f"skip layer {l} outside 0..{n_layers - 1}")
        if (self.dssp_layer is None) != (self.dssp_hook is None):
            raise ContractViolationError("dssp_layer and dssp_hook must be set together")
        if self.dssp_layer is not None:
            if not 0 <= self.dssp_layer < n_layers:
                raise ContractViolationError(f"hook layer {self.dssp_layer} outside model")
            if self.dssp_layer in self.skip_layers:
                raise ContractViolationError("hook layer cannot also be skipped")


@dataclass
class ForwardTrace:
    hidden: list[Array]        # residual stream after each block, seq x d_model
    attention: list[Array]     # per layer: (n_heads, seq, seq), rows stochastic
    logits: Array              # seq x vocab
    logits_node: Tensor | None = None  # present when a tape was active


class TinyTransformer:
    """Immutable-weight toy decoder; weights live in a flat name->array dict."""

    def __init__(self, config: ModelConfig, weights: dict[str, Array]):
        self.config = config
        self.weights = weights

    @classmethod
    def random(cls, config: ModelConfig) -> "TinyTransformer":
        rng = np.random.default_rng(config.seed)
        d, dh, dff = config.d_model, config.d_head, config.d_ff
        w: dict[str, Array] = {
            "tok_emb": rng.normal(0.0, 0.5, size=(config.vocab_size, d)),
            "pos_emb": rng.normal(0.0, 0.1, size=(config.max_seq, d)),
            "lnf.gain": np.ones((1, d)),
            "lnf.bias": np.zeros((1, d)),
        }
        proj = 0.3 / np.sqrt(d)
        for l in range(config.n_layers):
            for h in range(config.n_heads):
                for part in ("wq", "wk", "wv"):
                    w[f"l{l}.attn.{part}.h{h}"] = rng.normal(0.0, proj, size=(d, dh))
            w[f"l{l}.attn.wo"] = rng.normal(0.0, proj, size=(d, d))
            w[f"l{l}.attn.bo"] = np.zeros((1, d))
            w[f"l{l}.ffn.w1"] = rng.normal(0.0, proj, size=(d, dff))
            w[f"l{l}.ffn.b1"] = np.zeros((1, dff))
            w[f"l{l}.ffn.w2"] = rng.normal(0.0, proj, size=(dff, d))
            w[f"l{l}.ffn.b2"] = np.zeros((1, d))
            for ln in ("ln1", "ln2"):
                w[f"l{l}.{ln}.gain"] = np.ones((1, d))
                w[f"l{l}.{ln}.bias"] = np.zeros((1, d))
        return cls(config, w)


def _causal_mask(n: int) -> Array:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def _validate_tokens(config: ModelConfig, tokens: Sequence[int]) -> list[int]:
    toks = [int(t) for t in tokens]
    if len(toks) == 0:
        raise ContractViolationError("empty token sequence")
    if len(toks) > config.max_seq:
        raise ContractViolationError(f"sequence length {len(toks)} exceeds max_seq {config.max_seq}")
    for t in toks:
        if not 0 <= t < config.vocab_size:
            raise ContractViolationError(f"token id {t} outside vocab of {config.vocab_size}")
    return toks


def forward(
    model: TinyTransformer,
    tokens: Sequence[int],
    options: ForwardOptions | None = None,
    weight_tensors: dict[str, Tensor] | None = None,
) -> ForwardTrace:
    """Run the decoder over ``tokens`` and return the full trace.

    Host weights enter as constants, so nothing is recorded unless the fusion
    hook (or a ``weight_tensors`` override carrying taped leaves, for host
    fine-tuning) introduces a tape; from there on the graph is differentiable.
    """
    cfg = model.config
    opts = options or ForwardOptions()
    opts.validate(cfg.n_layers)
    toks = _validate_tokens(cfg, tokens)
    n = len(toks)

    def W(name: str) -> Tensor:
        if weight_tensors is not None and name in weight_tensors:
            return weight_tensors[name]
        return Tensor(model.weights[name])

    emb = W("tok_emb")
    x = ad.add(ad.take_rows(emb, toks), ad.take_rows(W("pos_emb"), list(range(n))))
    mask = Tensor(_causal_mask(n))
    eye_stack = np.broadcast_to(np.eye(n), (cfg.n_heads, n, n)).copy()

    hidden: list[Array] = []
    attention: list[Array] = []
    for l in range(cfg.n_layers):
        if l in opts.skip_layers:
            hidden.append(x.value.copy())
            attention.append(eye_stack)
            continue
        xn = ad.layer_norm(x, W(f"l{l}.ln1.gain"), W(f"l{l}.ln1.bias"))
        if opts.dssp_layer == l:
            attn_out = opts.dssp_hook(xn)
            if not isinstance(attn_out, Tensor) or attn_out.value.shape != xn.value.shape:
                raise ContractViolationError("hook must return a Tensor shaped like its input")
            attention.append(eye_stack)
        else:
            head_outs = []
            pattern = np.empty((cfg.n_heads, n, n))
            for h in range(cfg.n_heads):
                q = ad.matmul(xn, W(f"l{l}.attn.wq.h{h}"))
                k = ad.matmul(xn, W(f"l{l}.attn.wk.h{h}"))
                v = ad.matmul(xn, W(f"l{l}.attn.wv.h{h}"))
                scores = ad.add(ad.matmul(q, ad.transpose(k)), mask)
                attn = ad.softmax_rows(scores, 1.0 / np.sqrt(cfg.d_head))
                pattern[h] = attn.value
                head_outs.append(ad.matmul(attn, v))
            merged = head_outs[0] if cfg.n_heads == 1 else ad.concat_cols(head_outs)
            attn_out = ad.add(ad.matmul(merged, W(f"l{l}.attn.wo")), W(f"l{l}.attn.bo"))
            attention.append(pattern)
        x = ad.add(x, attn_out)
        yn = ad.layer_norm(x, W(f"l{l}.ln2.gain"), W(f"l{l}.ln2.bias"))
        h1 = ad.relu(ad.add(ad.matmul(yn, W(f"l{l}.ffn.w1")), W(f"l{l}.ffn.b1")))
        ffn_out = ad.add(ad.matmul(h1, W(f"l{l}.ffn.w2")), W(f"l{l}.ffn.b2"))
        x = ad.add(x, ffn_out)
        hidden.append(x.value.copy())

    final = ad.layer_norm(x, W("lnf.gain"), W("lnf.bias"))
    logits = ad.matmul(final, ad.transpose(emb))
    return ForwardTrace(
        hidden=hidden,
        attention=attention,
        logits=logits.value.copy(),
        logits_node=logits if logits.tape is not None else None,
    )


def _readout(model: TinyTransformer, h_last: Array) -> Array:
    """Final layer-norm + tied unembedding + softmax on one hidden row."""
    w = model.weights
    normed = ad.layer_norm(Tensor(h_last), Tensor(w["lnf.gain"]), Tensor(w["lnf.bias"]))
    logits = normed.value @ w["tok_emb"].T
    return ad.softmax_rows(Tensor(logits), 1.0).value.ravel()


def layer_distributions(
    model: TinyTransformer,
    tokens: Sequence[int],
    options: ForwardOptions | None = None,
) -> list[Array]:
    """Logit-lens profile: per-layer next-token distribution at the last position."""
    trace = forward(model, tokens, options)
    return [_readout(model, h[-1:]) for h in trace.hidden]


def generate(
    model: TinyTransformer,
    prompt: Sequence[int],
    n_samples: int,
    temperature: float,
    seed: int,
    max_new_tokens: int = 1,
    options: ForwardOptions | None = None,
    eos_id: int | None = None,
) -> list[list[int]]:
    """Sample answer continuations; temperature 0 is greedy (lowest-index ties)."""
    if n_samples < 1:
        raise ContractViolationError("n_samples must be >= 1")
    if temperature < 0:
        raise ContractViolationError("temperature must be >= 0")
    if max_new_tokens < 1:
        raise ContractViolationError("max_new_tokens must be >= 1")
    prompt = _validate_tokens(model.config, prompt)
    if len(prompt) + max_new_tokens > model.config.max_seq:
        raise ContractViolationError("prompt plus max_new_tokens exceeds max_seq")

    samples: list[list[int]] = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        seq = list(prompt)
        answer: list[int] = []
        for _ in range(max_new_tokens):
            trace = forward(model, seq, options)
            logits = trace.logits[-1]
            if temperature == 0.0:
                tok = int(np.argmax(logits))
            else:
                probs = ad.softmax_rows(Tensor(logits), 1.0 / temperature).value.ravel()
                tok = int(rng.choice(len(probs), p=probs))
            answer.append(tok)
            seq.append(tok)
            if eos_id is not None and tok == eos_id:
                break
        samples.append(answer)
    return samples


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_model(model: TinyTransformer, bin_path, json_path=None, dtype: str = "f32",
               meta: dict | None = None) -> None:
    json_path = json_path or str(bin_path) + ".json"
    save_tensors(bin_path, model.weights, dtype=dtype)
    doc = {"config": model.config.to_json(), "meta": meta or {}}
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(bin_path, json_path=None) -> tuple[TinyTransformer, dict]:
    json_path = json_path or str(bin_path) + ".json"
    with open(json_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    config = ModelConfig(**doc["config"])
    weights = load_tensors(bin_path)
    return TinyTransformer(config, weights), doc.get("meta", {})
