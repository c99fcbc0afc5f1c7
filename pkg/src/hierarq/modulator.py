"""Text-conditioned feature modulation.

A modulator re-weights the tokens of one frame according to a piece of
prompt text. Per layer, the text embeddings (projected into visual space)
query the frame tokens through cross-attention; the attention weights,
averaged over heads and text tokens, give a salience distribution over the
N visual tokens, and the gate is that distribution scaled by N so a fully
uniform attention leaves tokens untouched. Gated tokens then pass through a
pre-norm residual feed-forward block.

Two independently parameterized modulators exist per model: one driven by
the extracted entity tokens, one by the full prompt. When a prompt yields
no text tokens for a stream, that stream's modulator returns the frame
unchanged with a gate of ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .errors import DimensionError


@dataclass
class ModulatorLayerWeights:
    attn: tk.AttentionWeights
    ln_gain: tk.Tensor
    ln_bias: tk.Tensor
    ffn_w1: tk.Tensor
    ffn_b1: tk.Tensor
    ffn_w2: tk.Tensor
    ffn_b2: tk.Tensor


@dataclass
class ModulatorWeights:
    text_proj: tk.Tensor              # (d_text, d_visual)
    layers: list[ModulatorLayerWeights]
    heads: int


@dataclass
class ModulatedFeature:
    tokens: tk.Tensor                 # (B, N, D), differentiable
    gate: np.ndarray                  # (B, N), last layer's gate values
    gates: list[np.ndarray]           # per-layer gates


TEXT_PROJ_INIT_STD = 0.02


def init_modulator(rng: np.random.Generator, d_text: int, d_visual: int,
                   layers: int, heads: int, dtype) -> ModulatorWeights:
    if d_visual % heads:
        raise DimensionError(f"heads={heads} must divide d_visual={d_visual}")
    def w(*shape):
        std = np.sqrt(2.0 / (shape[0] + shape[1]))
        return tk.randn(rng, shape, std=std, dtype=dtype, requires_grad=True)
    built = []
    for _ in range(layers):
        built.append(ModulatorLayerWeights(
            attn=tk.AttentionWeights(w(d_visual, d_visual), w(d_visual, d_visual),
                                     w(d_visual, d_visual), w(d_visual, d_visual)),
            ln_gain=tk.Tensor(np.ones(d_visual, dtype=dtype), requires_grad=True),
            ln_bias=tk.zeros((d_visual,), dtype=dtype, requires_grad=True),
            ffn_w1=w(d_visual, 4 * d_visual),
            ffn_b1=tk.zeros((4 * d_visual,), dtype=dtype, requires_grad=True),
            ffn_w2=w(4 * d_visual, d_visual),
            ffn_b2=tk.zeros((d_visual,), dtype=dtype, requires_grad=True),
        ))
    # a small text projection keeps the initial attention near-uniform, so
    # freshly initialized gates start close to 1 and gating is learned, not
    # inflicted on the banks as noise from step 0
    text_proj = tk.randn(rng, (d_text, d_visual), std=TEXT_PROJ_INIT_STD,
                         dtype=dtype, requires_grad=True)
    return ModulatorWeights(text_proj=text_proj, layers=built, heads=heads)


def modulator_parameters(w: ModulatorWeights, prefix: str) -> dict[str, tk.Tensor]:
    params = {f"{prefix}.text_proj": w.text_proj}
    for i, layer in enumerate(w.layers):
        base = f"{prefix}.layers.{i}"
        params.update({
            f"{base}.attn.wq": layer.attn.wq,
            f"{base}.attn.wk": layer.attn.wk,
            f"{base}.attn.wv": layer.attn.wv,
            f"{base}.attn.wo": layer.attn.wo,
            f"{base}.ln_gain": layer.ln_gain,
            f"{base}.ln_bias": layer.ln_bias,
            f"{base}.ffn_w1": layer.ffn_w1,
            f"{base}.ffn_b1": layer.ffn_b1,
            f"{base}.ffn_w2": layer.ffn_w2,
            f"{base}.ffn_b2": layer.ffn_b2,
        })
    return params


def _ffn(x: tk.Tensor, layer: ModulatorLayerWeights) -> tk.Tensor:
    b, n, d = x.shape
    h = tk.layer_norm(x, layer.ln_gain, layer.ln_bias)
    flat = tk.reshape(h, (b * n, d))
    flat = tk.add(tk.matmul(flat, layer.ffn_w1), tk.reshape(layer.ffn_b1, (1, -1)))
    flat = tk.gelu(flat)
    flat = tk.add(tk.matmul(flat, layer.ffn_w2), tk.reshape(layer.ffn_b2, (1, -1)))
    return tk.add(x, tk.reshape(flat, (b, n, d)))


def modulate(frame: tk.Tensor, text_emb: np.ndarray, w: ModulatorWeights) -> ModulatedFeature:
    """Gate frame tokens by text salience. frame: (B, N, D) or (N, D)."""
    squeeze = frame.ndim == 2
    if squeeze:
        frame = tk.reshape(frame, (1,) + frame.shape)
    if frame.ndim != 3:
        raise DimensionError(f"modulate expects (B, N, D) tokens, got {frame.shape}")
    b, n, d = frame.shape
    if text_emb.ndim != 2:
        raise DimensionError(f"text embeddings must be (K, d_text), got {text_emb.shape}")

    if text_emb.shape[0] == 0:
        ones = np.ones((b, n), dtype=frame.data.dtype)
        out = tk.reshape(frame, (n, d)) if squeeze else frame
        gate = ones[0] if squeeze else ones
        return ModulatedFeature(tokens=out, gate=gate, gates=[gate])

    text = tk.Tensor(text_emb.astype(frame.data.dtype, copy=False))
    queries = tk.expand0(tk.reshape(tk.matmul(text, w.text_proj), (1, -1, d)), b)

    x = frame
    gates: list[np.ndarray] = []
    for layer in w.layers:
        _, attn = tk.multi_head_attention(queries, x, x, layer.attn, w.heads)
        salience = tk.reduce_mean(attn, axes=(1, 2))       # (B, N), rows sum to 1
        gate = tk.scale(salience, float(n))                # mean(gate) == 1
        x = tk.mul(x, tk.reshape(gate, (b, n, 1)))
        x = _ffn(x, layer)
        gates.append(gate.data.copy())

    if squeeze:
        x = tk.reshape(x, (n, d))
        gates = [g[0] for g in gates]
    return ModulatedFeature(tokens=x, gate=gates[-1], gates=gates)
