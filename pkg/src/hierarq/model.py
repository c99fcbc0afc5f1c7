"""The two-stream streaming model.

Per frame: temporal position encoding is added to the frame tokens, the two
modulators produce entity-weighted and scene-weighted token grids, each grid
is pushed into its stream's visual memory bank, and two querying
transformers read the banks back out:

  entity transformer   per layer: self-attention over that layer's query
                       bank (current input pushed first, so the read always
                       includes it), visual cross-attention every k-th
                       layer, feed-forward; all pre-norm residual blocks.

  scene transformer    the same, plus (at cross-attention layers) an inner
                       self-attention over the intermediate queries and a
                       coupling cross-attention whose keys/values are the
                       entity transformer's output for this frame.

Each transformer starts every frame from its own learnable query grid, so
output size is fixed no matter how long the video runs, and bank capacities
bound the state. The classification head is a linear projection of the
flattened scene queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tk
from .config import ModelConfig, RunConfig
from .errors import DimensionError, SequenceError
from .memory import BankSpec, MemoryBank
from .modulator import (ModulatedFeature, ModulatorWeights, init_modulator,
                        modulate, modulator_parameters)
from .text import PromptBundle

QUERY_INIT_STD = 0.02


def xavier_std(fan_in: int, fan_out: int) -> float:
    """Weight scale that keeps signal magnitude through a linear map."""
    return math.sqrt(2.0 / (fan_in + fan_out))


def temporal_encoding(t: int, d: int, dtype) -> np.ndarray:
    """Sinusoidal position code for frame index t, shared by all tokens."""
    pe = np.zeros(d)
    idx = np.arange(d)
    freqs = np.exp(-math.log(10000.0) * (2.0 * (idx // 2) / d))
    angles = t * freqs
    pe[0::2] = np.sin(angles[0::2])
    pe[1::2] = np.cos(angles[1::2])
    return pe.astype(dtype)


# --------------------------------------------------------------------------
# weights

@dataclass
class SublayerNorm:
    gain: tk.Tensor
    bias: tk.Tensor


@dataclass
class QFormerLayerWeights:
    self_attn: tk.AttentionWeights
    ln_self: SublayerNorm
    ffn_w1: tk.Tensor
    ffn_b1: tk.Tensor
    ffn_w2: tk.Tensor
    ffn_b2: tk.Tensor
    ln_ffn: SublayerNorm
    # visual cross-attention, present every cross_every-th layer
    cross_attn: tk.AttentionWeights | None = None
    ln_cross: SublayerNorm | None = None
    visual_proj: tk.Tensor | None = None      # (d_visual, d_query)
    visual_bias: tk.Tensor | None = None
    # scene-only extras, co-located with cross-attention by default
    inner_attn: tk.AttentionWeights | None = None
    ln_inner: SublayerNorm | None = None
    link_attn: tk.AttentionWeights | None = None
    ln_link: SublayerNorm | None = None


@dataclass
class QFormerWeights:
    layers: list[QFormerLayerWeights]
    final: SublayerNorm
    heads: int


def _init_qformer(rng: np.random.Generator, cfg: ModelConfig, dtype,
                  scene: bool) -> QFormerWeights:
    d = cfg.d_query
    def w(*shape):
        return tk.randn(rng, shape, std=xavier_std(*shape), dtype=dtype,
                        requires_grad=True)
    def attn():
        return tk.AttentionWeights(w(d, d), w(d, d), w(d, d), w(d, d))
    def norm():
        return SublayerNorm(tk.Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                            tk.zeros((d,), dtype=dtype, requires_grad=True))
    layers = []
    for l in range(cfg.n_layers):
        is_cross = l % cfg.cross_attention_frequency == 0
        extras = scene and (is_cross or cfg.scene_submodules_all_layers)
        layers.append(QFormerLayerWeights(
            self_attn=attn(), ln_self=norm(),
            ffn_w1=w(d, 4 * d), ffn_b1=tk.zeros((4 * d,), dtype=dtype, requires_grad=True),
            ffn_w2=w(4 * d, d), ffn_b2=tk.zeros((d,), dtype=dtype, requires_grad=True),
            ln_ffn=norm(),
            cross_attn=attn() if is_cross else None,
            ln_cross=norm() if is_cross else None,
            visual_proj=w(cfg.d_visual, d) if is_cross else None,
            visual_bias=tk.zeros((d,), dtype=dtype, requires_grad=True) if is_cross else None,
            inner_attn=attn() if extras else None,
            ln_inner=norm() if extras else None,
            link_attn=attn() if extras else None,
            ln_link=norm() if extras else None,
        ))
    return QFormerWeights(layers=layers, final=norm(), heads=cfg.n_heads)


def _qformer_parameters(qf: QFormerWeights, prefix: str) -> dict[str, tk.Tensor]:
    params: dict[str, tk.Tensor] = {}
    def put_attn(base: str, a: tk.AttentionWeights | None):
        if a is not None:
            params.update({f"{base}.wq": a.wq, f"{base}.wk": a.wk,
                           f"{base}.wv": a.wv, f"{base}.wo": a.wo})
    def put_norm(base: str, nrm: SublayerNorm | None):
        if nrm is not None:
            params[f"{base}.gain"] = nrm.gain
            params[f"{base}.bias"] = nrm.bias
    for i, layer in enumerate(qf.layers):
        base = f"{prefix}.layers.{i}"
        put_attn(f"{base}.self_attn", layer.self_attn)
        put_norm(f"{base}.ln_self", layer.ln_self)
        put_attn(f"{base}.cross_attn", layer.cross_attn)
        put_norm(f"{base}.ln_cross", layer.ln_cross)
        if layer.visual_proj is not None:
            params[f"{base}.visual_proj"] = layer.visual_proj
            params[f"{base}.visual_bias"] = layer.visual_bias
        put_attn(f"{base}.inner_attn", layer.inner_attn)
        put_norm(f"{base}.ln_inner", layer.ln_inner)
        put_attn(f"{base}.link_attn", layer.link_attn)
        put_norm(f"{base}.ln_link", layer.ln_link)
        put_norm(f"{base}.ln_ffn", layer.ln_ffn)
        params[f"{base}.ffn_w1"] = layer.ffn_w1
        params[f"{base}.ffn_b1"] = layer.ffn_b1
        params[f"{base}.ffn_w2"] = layer.ffn_w2
        params[f"{base}.ffn_b2"] = layer.ffn_b2
    put_norm(f"{prefix}.final", qf.final)
    return params


# --------------------------------------------------------------------------
# streaming state

@dataclass
class StreamState:
    """Per-video state of one stream: a visual bank plus per-layer query banks."""

    visual_bank: MemoryBank
    query_banks: list[MemoryBank]
    last_output: np.ndarray | None = None

    def state_floats(self) -> int:
        total = self.visual_bank.state_floats()
        total += sum(b.state_floats() for b in self.query_banks)
        if self.last_output is not None:
            total += self.last_output.size
        return total


@dataclass
class GateSummary:
    mean: float
    peak: float
    argmax: int


@dataclass
class StreamingContext:
    """Everything tied to one video being streamed."""

    bundle: PromptBundle
    entity: StreamState
    scene: StreamState
    t: int = 0
    gate_log: list[dict] = field(default_factory=list)

    def state_floats(self) -> int:
        return self.entity.state_floats() + self.scene.state_floats()


def closed_form_state_floats(cfg: ModelConfig, batch: int = 1) -> int:
    """Upper bound on live state floats per context, independent of video length."""
    visual = (cfg.m_short + cfg.m_long) * cfg.n_visual_tokens * cfg.d_visual
    query = cfg.n_layers * (cfg.m_short + cfg.m_long) * cfg.n_query_tokens * cfg.d_query
    outputs = 2 * cfg.n_query_tokens * cfg.d_query
    return batch * (visual + query + outputs)


def _gate_summary(gate: np.ndarray) -> GateSummary:
    flat = gate.reshape(-1, gate.shape[-1]).mean(axis=0)
    return GateSummary(mean=float(flat.mean()), peak=float(flat.max()),
                       argmax=int(flat.argmax()))


# --------------------------------------------------------------------------
# the model

class HierarQModel:
    """Weights plus the per-frame update; per-video state lives in contexts."""

    def __init__(self, cfg: RunConfig, seed: int | None = None,
                 capacity_overrides: dict[str, int] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.mc = cfg.model
        self.dtype = tk.resolve_dtype(self.mc.precision)
        # ablation hook: cap visual or query banks independently of the
        # per-stream capacities (keys "visual" / "query")
        self.capacity_overrides = dict(capacity_overrides or {})
        rng = np.random.default_rng(cfg.seed if seed is None else seed)

        mc = self.mc
        self.mod_entity = init_modulator(rng, mc.d_text, mc.d_visual,
                                         mc.modulator_layers, mc.modulator_heads, self.dtype)
        self.mod_scene = init_modulator(rng, mc.d_text, mc.d_visual,
                                        mc.modulator_layers, mc.modulator_heads, self.dtype)
        self.qf_entity = _init_qformer(rng, mc, self.dtype, scene=False)
        self.qf_scene = _init_qformer(rng, mc, self.dtype, scene=True)
        self.z_entity = tk.randn(rng, (mc.n_query_tokens, mc.d_query), std=QUERY_INIT_STD,
                                 dtype=self.dtype, requires_grad=True)
        self.z_scene = tk.randn(rng, (mc.n_query_tokens, mc.d_query), std=QUERY_INIT_STD,
                                dtype=self.dtype, requires_grad=True)
        flat = mc.n_query_tokens * mc.d_query
        self.head_w = tk.randn(rng, (flat, mc.n_classes), std=xavier_std(flat, mc.n_classes),
                               dtype=self.dtype, requires_grad=True)
        self.head_b = tk.zeros((mc.n_classes,), dtype=self.dtype, requires_grad=True)
        if mc.decoder_stub:
            self.decoder_w = tk.randn(rng, (mc.d_query, mc.decoder_vocab),
                                      std=xavier_std(mc.d_query, mc.decoder_vocab),
                                      dtype=self.dtype, requires_grad=True)
            self.decoder_b = tk.zeros((mc.decoder_vocab,), dtype=self.dtype, requires_grad=True)
        else:
            self.decoder_w = None
            self.decoder_b = None

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, tk.Tensor]:
        params: dict[str, tk.Tensor] = {}
        params.update(modulator_parameters(self.mod_entity, "modulator.entity"))
        params.update(modulator_parameters(self.mod_scene, "modulator.scene"))
        params.update(_qformer_parameters(self.qf_entity, "qformer.entity"))
        params.update(_qformer_parameters(self.qf_scene, "qformer.scene"))
        params["queries.entity"] = self.z_entity
        params["queries.scene"] = self.z_scene
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        if self.decoder_w is not None:
            params["decoder.w"] = self.decoder_w
            params["decoder.b"] = self.decoder_b
        return params

    # -- contexts -------------------------------------------------------------

    def _bank_spec(self, scene: bool, kind: str) -> BankSpec:
        capacity = self.capacity_overrides.get(kind)
        if capacity is None:
            capacity = self.mc.m_long if scene else self.mc.m_short
        return BankSpec(
            capacity=capacity,
            policy=self.cfg.long_policy if scene else self.cfg.short_policy,
            granularity=self.cfg.compression_granularity,
            weighted_merge=self.mc.mbc_weighted_merge,
            detach_history=self.mc.detach_bank_entries,
        )

    def new_context(self, bundle: PromptBundle) -> StreamingContext:
        mc = self.mc
        def stream(scene: bool) -> StreamState:
            vis = self._bank_spec(scene, "visual")
            query = self._bank_spec(scene, "query")
            return StreamState(
                visual_bank=MemoryBank(vis, mc.n_visual_tokens, mc.d_visual),
                query_banks=[MemoryBank(query, mc.n_query_tokens, mc.d_query)
                             for _ in range(mc.n_layers)],
            )
        return StreamingContext(bundle=bundle, entity=stream(False), scene=stream(True))

    # -- per-frame computation --------------------------------------------------

    def _ffn(self, x: tk.Tensor, layer: QFormerLayerWeights) -> tk.Tensor:
        b, n, d = x.shape
        h = tk.layer_norm(x, layer.ln_ffn.gain, layer.ln_ffn.bias)
        flat = tk.reshape(h, (b * n, d))
        flat = tk.add(tk.matmul(flat, layer.ffn_w1), tk.reshape(layer.ffn_b1, (1, -1)))
        flat = tk.gelu(flat)
        flat = tk.add(tk.matmul(flat, layer.ffn_w2), tk.reshape(layer.ffn_b2, (1, -1)))
        return tk.add(x, tk.reshape(flat, (b, n, d)))

    def _attend(self, x: tk.Tensor, kv: tk.Tensor, attn: tk.AttentionWeights,
                nrm: SublayerNorm, heads: int) -> tk.Tensor:
        q = tk.layer_norm(x, nrm.gain, nrm.bias)
        out, _ = tk.multi_head_attention(q, kv, kv, attn, heads)
        return tk.add(x, out)

    def _project_visual(self, vis: tk.Tensor, layer: QFormerLayerWeights) -> tk.Tensor:
        b, rows, d = vis.shape
        flat = tk.matmul(tk.reshape(vis, (b * rows, d)), layer.visual_proj)
        flat = tk.add(flat, tk.reshape(layer.visual_bias, (1, -1)))
        return tk.reshape(flat, (b, rows, layer.visual_proj.shape[1]))

    def _qformer_step(self, qf: QFormerWeights, state: StreamState, z_in: tk.Tensor,
                      link_kv: tk.Tensor | None) -> tk.Tensor:
        x = z_in
        for l, layer in enumerate(qf.layers):
            state.query_banks[l].push(x)
            kv = state.query_banks[l].read_tokens()
            x = self._attend(x, kv, layer.self_attn, layer.ln_self, qf.heads)
            if layer.cross_attn is not None:
                vis = self._project_visual(state.visual_bank.read_tokens(), layer)
                x = self._attend(x, vis, layer.cross_attn, layer.ln_cross, qf.heads)
            if layer.inner_attn is not None:
                q = tk.layer_norm(x, layer.ln_inner.gain, layer.ln_inner.bias)
                out, _ = tk.multi_head_attention(q, q, q, layer.inner_attn, qf.heads)
                x = tk.add(x, out)
                if link_kv is not None:
                    x = self._attend(x, link_kv, layer.link_attn, layer.ln_link, qf.heads)
            x = self._ffn(x, layer)
        return tk.layer_norm(x, qf.final.gain, qf.final.bias)

    def _queries(self, z: tk.Tensor, batch: int) -> tk.Tensor:
        return tk.expand0(tk.reshape(z, (1,) + z.shape), batch)

    def process_frame(self, ctx: StreamingContext, tokens: tk.Tensor,
                      frame_index: int | None = None) -> tk.Tensor:
        """Advance the context by one frame; returns scene queries (B, N_q, D_q)."""
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tk.reshape(tokens, (1,) + tokens.shape)
        mc = self.mc
        if tokens.ndim != 3 or tokens.shape[1:] != (mc.n_visual_tokens, mc.d_visual):
            raise DimensionError(
                f"expected (B, {mc.n_visual_tokens}, {mc.d_visual}) frame tokens, got {tokens.shape}")
        if tokens.data.dtype != self.dtype:
            raise DimensionError(
                f"frame dtype {tokens.data.dtype} does not match model precision {self.dtype}")
        if frame_index is not None and frame_index != ctx.t:
            raise SequenceError(f"frame {frame_index} arrived but context expects {ctx.t}")
        batch = tokens.shape[0]

        pe = tk.Tensor(temporal_encoding(ctx.t, mc.d_visual, self.dtype))
        x = tk.add(tokens, pe)

        if self.cfg.disable_entity_stream:
            f_ent = ModulatedFeature(tokens=x, gate=np.ones((batch, mc.n_visual_tokens),
                                                            dtype=self.dtype), gates=[])
        else:
            f_ent = modulate(x, ctx.bundle.entity_emb, self.mod_entity)
        if self.cfg.disable_scene_modulator:
            f_sc = ModulatedFeature(tokens=x, gate=np.ones((batch, mc.n_visual_tokens),
                                                           dtype=self.dtype), gates=[])
        else:
            f_sc = modulate(x, ctx.bundle.scene_emb, self.mod_scene)

        ctx.entity.visual_bank.push(f_ent.tokens)
        ctx.scene.visual_bank.push(f_sc.tokens)

        z_e = self._qformer_step(self.qf_entity, ctx.entity,
                                 self._queries(self.z_entity, batch), link_kv=None)
        link = None if self.cfg.disable_hierarchical_link else z_e
        z_s = self._qformer_step(self.qf_scene, ctx.scene,
                                 self._queries(self.z_scene, batch), link_kv=link)

        ctx.entity.last_output = z_e.data.copy()
        ctx.scene.last_output = z_s.data.copy()
        ctx.gate_log.append({
            "frame": ctx.t,
            "entity": _gate_summary(f_ent.gate),
            "scene": _gate_summary(f_sc.gate),
        })
        ctx.t += 1
        return tk.reshape(z_s, z_s.shape[1:]) if squeeze else z_s

    def process_video(self, features: np.ndarray, bundle: PromptBundle) -> "VideoResult":
        """Stream a whole (T, N_v, D_vis) or (B, T, N_v, D_vis) clip."""
        arr = np.asarray(features)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None]
        if arr.ndim != 4:
            raise DimensionError(f"expected (T, N, D) or (B, T, N, D) features, got {arr.shape}")
        if arr.shape[1] == 0:
            raise DimensionError("a video needs at least one frame")
        arr = arr.astype(self.dtype, copy=False)
        ctx = self.new_context(bundle)
        peak = 0
        out: tk.Tensor | None = None
        for t in range(arr.shape[1]):
            out = self.process_frame(ctx, tk.Tensor(arr[:, t]), frame_index=t)
            peak = max(peak, ctx.state_floats())
        final = tk.reshape(out, out.shape[1:]) if squeeze else out
        return VideoResult(output=final, context=ctx, peak_state_floats=peak)

    # -- heads -------------------------------------------------------------------

    def classify(self, z_s: tk.Tensor) -> tk.Tensor:
        """Class logits from scene queries: (B, N_q, D_q) -> (B, C)."""
        squeeze = z_s.ndim == 2
        if squeeze:
            z_s = tk.reshape(z_s, (1,) + z_s.shape)
        b = z_s.shape[0]
        flat = tk.reshape(z_s, (b, z_s.shape[1] * z_s.shape[2]))
        logits = tk.add(tk.matmul(flat, self.head_w), tk.reshape(self.head_b, (1, -1)))
        return tk.reshape(logits, (logits.shape[1],)) if squeeze else logits

    def decode_tokens(self, z_s: tk.Tensor) -> tk.Tensor:
        """Optional generative stub: per-query-token symbol scores."""
        if self.decoder_w is None:
            raise DimensionError("decoder stub is disabled in this configuration")
        squeeze = z_s.ndim == 2
        if squeeze:
            z_s = tk.reshape(z_s, (1,) + z_s.shape)
        b, n, d = z_s.shape
        flat = tk.add(tk.matmul(tk.reshape(z_s, (b * n, d)), self.decoder_w),
                      tk.reshape(self.decoder_b, (1, -1)))
        scores = tk.reshape(flat, (b, n, self.mc.decoder_vocab))
        return tk.reshape(scores, scores.shape[1:]) if squeeze else scores


@dataclass
class VideoResult:
    output: tk.Tensor                 # (N_q, D_q) or (B, N_q, D_q) scene queries
    context: StreamingContext
    peak_state_floats: int
