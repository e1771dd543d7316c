"""The desnowing network: 5-level encoder, scale-aware feature aggregation,
latent transformer, decoder alternating local / local-global context
interaction driven by per-sample snow queries, and an attention refinement
head with degradation-aware position encodings.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, NotDivisible
from .tensor import Tensor

SAFA_MODES = ("off", "avgpool", "conv", "cat", "maxpool_add")
DECODER_MODES = ("full", "li_only", "lgci_only", "resblock")
QUERY_MODES = ("scale_aware", "learnable", "same_layer")
ARH_MODES = ("on", "off")


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128, 256)
    encoder_blocks: tuple = (4, 6, 7, 8)
    latent_blocks: int = 8
    latent_heads: int = 16
    decoder_blocks: tuple = (4, 6, 7, 8)
    decoder_heads: tuple = (1, 2, 4, 8)
    window: int = 8
    ffn_expansion: int = 2
    arh_blocks_per_stage: int = 2
    safa: str = "maxpool_add"
    decoder: str = "full"
    queries: str = "scale_aware"
    arh: str = "on"
    scale: float = 1.0
    dtype: str = "f32"

    def resolved_channels(self):
        return tuple(max(1, int(round(c * self.scale))) for c in self.channels)

    def validate(self):
        ch = self.resolved_channels()
        if len(ch) != 5 or any(a >= b for a, b in zip(ch, ch[1:])):
            raise InvalidConfig(f"channels must be 5 strictly increasing values: {ch}")
        if len(self.encoder_blocks) != 4 or len(self.decoder_blocks) != 4:
            raise InvalidConfig("encoder_blocks and decoder_blocks must have 4 entries")
        if len(self.decoder_heads) != 4:
            raise InvalidConfig("decoder_heads must have 4 entries")
        for c, h in zip(ch[:4], self.decoder_heads):
            if c % h:
                raise InvalidConfig(f"decoder heads {h} must divide channels {c}")
        if ch[4] % self.latent_heads:
            raise InvalidConfig(f"latent heads {self.latent_heads} must divide {ch[4]}")
        if self.window < 1:
            raise InvalidConfig(f"window must be >= 1: {self.window}")
        if self.ffn_expansion < 1:
            raise InvalidConfig("ffn_expansion must be >= 1")
        if self.arh_blocks_per_stage < 1:
            raise InvalidConfig("arh_blocks_per_stage must be >= 1")
        if self.safa not in SAFA_MODES:
            raise InvalidConfig(f"safa must be one of {SAFA_MODES}")
        if self.decoder not in DECODER_MODES:
            raise InvalidConfig(f"decoder must be one of {DECODER_MODES}")
        if self.queries not in QUERY_MODES:
            raise InvalidConfig(f"queries must be one of {QUERY_MODES}")
        if self.arh not in ARH_MODES:
            raise InvalidConfig(f"arh must be one of {ARH_MODES}")

    def check_input_size(self, h, w):
        """Window attention runs down to H/8; levels downsample to H/16."""
        if h % 16 or w % 16 or (h // 8) % self.window or (w // 8) % self.window:
            raise InvalidConfig(
                f"input {h}x{w} incompatible with window {self.window}: "
                f"H and W must be divisible by 16 and by 8*window={8 * self.window}"
            )

    def to_dict(self):
        from dataclasses import asdict
        d = asdict(self)
        for k in ("channels", "encoder_blocks", "decoder_blocks", "decoder_heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("channels", "encoder_blocks", "decoder_blocks", "decoder_heads"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """Quarter-scale config for desk experiments (64x64-friendly)."""
    return ModelConfig(scale=0.25, **overrides)


def gradcheck_config() -> ModelConfig:
    """Smallest config that still exercises every code path end to end."""
    return ModelConfig(
        channels=(2, 4, 8, 16, 32),
        encoder_blocks=(1, 1, 1, 1),
        latent_blocks=1,
        latent_heads=2,
        decoder_blocks=(1, 2, 1, 2),
        decoder_heads=(1, 1, 2, 2),
        ffn_expansion=2,
        arh_blocks_per_stage=1,
        dtype="f64",
    )


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParamStore:
    """Registry of named parameters with deterministic fan-in init."""

    def __init__(self, seed, dtype="f32"):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def _register(self, name, arr):
        if name in self.params:
            raise InvalidConfig(f"duplicate parameter name: {name}")
        t = Tensor(arr, dtype=self.dtype, requires_grad=True)
        self.params[name] = t
        return t

    def _fanin_uniform(self, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def conv(self, name, c_out, c_in, k):
        w = self._register(f"{name}.w", self._fanin_uniform((c_out, c_in, k, k), c_in * k * k))
        b = self._register(f"{name}.b", np.zeros(c_out))
        return w, b

    def linear(self, name, c_in, c_out):
        w = self._register(f"{name}.w", self._fanin_uniform((c_in, c_out), c_in))
        b = self._register(f"{name}.b", np.zeros(c_out))
        return w, b

    def norm(self, name, c):
        g = self._register(f"{name}.g", np.ones(c))
        b = self._register(f"{name}.b", np.zeros(c))
        return g, b

    def zeros(self, name, shape):
        return self._register(name, np.zeros(shape))

    def uniform(self, name, shape, fan_in):
        return self._register(name, self._fanin_uniform(shape, fan_in))


# ---------------------------------------------------------------------------
# attention probe (used by invariant tests)
# ---------------------------------------------------------------------------

_attn_probe: list | None = None


@contextlib.contextmanager
def attention_probe():
    """Collects every attention probability tensor computed during forwards."""
    global _attn_probe
    prev = _attn_probe
    _attn_probe = []
    try:
        yield _attn_probe
    finally:
        _attn_probe = prev


def _probe(att: Tensor):
    if _attn_probe is not None:
        _attn_probe.append(att.data)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def layernorm_nchw(x, g, b):
    return T.permute(T.layernorm(T.permute(x, (0, 2, 3, 1)), g, b), (0, 3, 1, 2))


def _split_heads(x, heads):
    b, t, c = x.shape
    return T.permute(T.reshape(x, (b, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, d = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, t, h * d))


class ConvBlock:
    """conv3x3 -> norm -> GELU -> conv3x3, residual."""

    def __init__(self, store, prefix, c):
        self.w1, self.b1 = store.conv(f"{prefix}.conv1", c, c, 3)
        self.ng, self.nb = store.norm(f"{prefix}.norm", c)
        self.w2, self.b2 = store.conv(f"{prefix}.conv2", c, c, 3)

    def core(self, x):
        h = T.conv2d(x, self.w1, self.b1, pad=1)
        h = T.gelu(layernorm_nchw(h, self.ng, self.nb))
        return T.conv2d(h, self.w2, self.b2, pad=1)

    def __call__(self, x):
        return T.add(x, self.core(x))


class FFN:
    def __init__(self, store, prefix, c, expansion):
        self.w1, self.b1 = store.linear(f"{prefix}.fc1", c, c * expansion)
        self.w2, self.b2 = store.linear(f"{prefix}.fc2", c * expansion, c)

    def __call__(self, x):
        return T.linear(T.gelu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)


class AttentionBlock:
    """Pre-norm transformer block on window tokens.

    mode "li": self-attention over the window's own tokens.
    mode "lgci": cross-attention; per-sample queries attend to each window's
    keys/values, query token k landing on grid cell k.
    """

    def __init__(self, store, prefix, c, heads, window, expansion, mode):
        self.c, self.heads, self.window, self.mode = c, heads, window, mode
        self.n1g, self.n1b = store.norm(f"{prefix}.norm1", c)
        self.qw, self.qb = store.linear(f"{prefix}.attn.qproj", c, c)
        self.kw, self.kb = store.linear(f"{prefix}.attn.kproj", c, c)
        self.vw, self.vb = store.linear(f"{prefix}.attn.vproj", c, c)
        self.ow, self.ob = store.linear(f"{prefix}.attn.oproj", c, c)
        self.relpos = T.RelPosBias.__new__(T.RelPosBias)
        self.relpos.window_side = window
        self.relpos.num_heads = heads
        self.relpos.index_map = T.build_relpos_index(window)
        self.relpos.table = store.zeros(f"{prefix}.relpos.table", ((2 * window - 1) ** 2, heads))
        if mode == "lgci":
            self.nqg, self.nqb = store.norm(f"{prefix}.normq", c)
        self.n2g, self.n2b = store.norm(f"{prefix}.norm2", c)
        self.ffn = FFN(store, f"{prefix}.ffn", c, expansion)

    def _bias(self):
        return self.relpos.bias()  # [heads, T, T]

    def attend_li(self, x):
        """x: [B, T, C] window tokens."""
        h = T.layernorm(x, self.n1g, self.n1b)
        d = self.c // self.heads
        q = _split_heads(T.linear(h, self.qw, self.qb), self.heads)
        k = _split_heads(T.linear(h, self.kw, self.kb), self.heads)
        v = _split_heads(T.linear(h, self.vw, self.vb), self.heads)
        logits = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        att = T.softmax(T.add(logits, self._bias()), axis=-1)
        _probe(att)
        out = T.linear(_merge_heads(T.matmul(att, v)), self.ow, self.ob)
        x = T.add(x, out)
        return T.add(x, self.ffn(T.layernorm(x, self.n2g, self.n2b)))

    def attend_lgci(self, x, q_s):
        """x: [N*nw, T, C] window tokens, q_s: [N, T, C] shared queries."""
        b, tok, c = x.shape
        n = q_s.shape[0]
        nw = b // n
        d = c // self.heads
        h = T.layernorm(x, self.n1g, self.n1b)
        qh = T.layernorm(q_s, self.nqg, self.nqb)
        q = _split_heads(T.linear(qh, self.qw, self.qb), self.heads)  # [N,h,T,d]
        k = _split_heads(T.linear(h, self.kw, self.kb), self.heads)   # [B,h,T,d]
        v = _split_heads(T.linear(h, self.vw, self.vb), self.heads)
        q5 = T.reshape(q, (n, 1, self.heads, tok, d))
        k5 = T.reshape(k, (n, nw, self.heads, tok, d))
        v5 = T.reshape(v, (n, nw, self.heads, tok, d))
        logits = T.scale(T.matmul(q5, T.permute(k5, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(d))
        att = T.softmax(T.add(logits, self._bias()), axis=-1)  # [N,nw,h,T,T]
        _probe(att)
        out = T.reshape(T.matmul(att, v5), (b, self.heads, tok, d))
        out = T.linear(_merge_heads(out), self.ow, self.ob)
        x = T.add(x, out)
        return T.add(x, self.ffn(T.layernorm(x, self.n2g, self.n2b)))


class SpatialAttentionBlock:
    """Window-partitions a [N,C,H,W] feature, runs one AttentionBlock, merges."""

    def __init__(self, store, prefix, c, heads, window, expansion, mode):
        self.window = window
        self.block = AttentionBlock(store, prefix, c, heads, window, expansion, mode)

    def __call__(self, x, q_s=None):
        n, c, h, w = x.shape
        tok = T.window_partition(x, self.window)
        if self.block.mode == "lgci":
            tok = self.block.attend_lgci(tok, q_s)
        else:
            tok = self.block.attend_li(tok)
        return T.window_merge(tok, self.window, n, c, h, w)


class DualAttention:
    """Channel gate (squeeze-excite style) followed by a spatial gate."""

    def __init__(self, store, prefix, c, reduction=4):
        hidden = max(c // reduction, 1)
        self.c = c
        self.w1, self.b1 = store.linear(f"{prefix}.ca.fc1", c, hidden)
        self.w2, self.b2 = store.linear(f"{prefix}.ca.fc2", hidden, c)
        self.sw, self.sb = store.conv(f"{prefix}.sa.conv", 1, 2, 7)

    def __call__(self, x):
        n = x.shape[0]
        p = T.reshape(T.global_avgpool(x), (n, self.c))
        gate_c = T.sigmoid(T.linear(T.gelu(T.linear(p, self.w1, self.b1)), self.w2, self.b2))
        x = T.mul(x, T.reshape(gate_c, (n, self.c, 1, 1)))
        stats = T.concat([T.mean(x, axis=1, keepdims=True), T.amax(x, axis=1, keepdims=True)], axis=1)
        gate_s = T.sigmoid(T.conv2d(stats, self.sw, self.sb, pad=3))
        return T.mul(x, gate_s)


def _pool_to(x, out_side):
    """Adaptive square pooling/upsampling between power-of-two grids."""
    side = x.shape[2]
    if side == out_side:
        return x
    if side > out_side:
        if side % out_side:
            raise NotDivisible(f"cannot pool {side} -> {out_side}")
        k = side // out_side
        return T.avgpool2d(x, k, k)
    factor = out_side // side
    if out_side % side or factor & (factor - 1):
        raise NotDivisible(f"cannot upsample {side} -> {out_side}")
    while x.shape[2] < out_side:
        x = T.upsample_nearest2x(x)
    return x


class QueryGenerator:
    """Produces the per-sample 64-token query set for one decoder level."""

    def __init__(self, store, prefix, c_lat, c_out, window, mode):
        self.window = window
        self.mode = mode
        self.c_out = c_out
        if mode == "learnable":
            self.table = store.uniform(f"{prefix}.table", (window * window, c_out), c_out)
            return
        c_in = c_out if mode == "same_layer" else c_lat
        self.dam = DualAttention(store, f"{prefix}.am", c_in)
        self.pw, self.pb = store.conv(f"{prefix}.proj", c_out, c_in, 1)

    def __call__(self, feature, batch):
        if self.mode == "learnable":
            q = T.reshape(self.table, (1, self.window * self.window, self.c_out))
            ones = Tensor(np.ones((batch, 1, 1), dtype=self.table.data.dtype),
                          dtype=self.table.dtype)
            return T.mul(q, ones)  # broadcast to [N, T, C]
        g = self.dam(feature)
        g = _pool_to(g, self.window)
        g = T.conv2d(g, self.pw, self.pb)  # [N, C_out, s, s]
        n, c, s, _ = g.shape
        return T.permute(T.reshape(g, (n, c, s * s)), (0, 2, 1))  # token k = cell k


class RefineBlock:
    """Conv residual block whose residual branch is gated by dual attention."""

    def __init__(self, store, prefix, c):
        self.conv = ConvBlock(store, prefix, c)
        self.dam = DualAttention(store, f"{prefix}.dam", c)

    def __call__(self, x):
        return T.add(x, self.dam(self.conv.core(x)))


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class Model:
    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore(seed, dtype=cfg.dtype)
        ch = cfg.resolved_channels()
        self.ch = ch
        st = self.store

        self.stem_w, self.stem_b = st.conv("enc.stem", ch[0], 3, 3)
        self.enc_blocks = [
            [ConvBlock(st, f"enc.l{i + 1}.b{k}", ch[i]) for k in range(cfg.encoder_blocks[i])]
            for i in range(4)
        ]
        self.enc_down = [st.conv(f"enc.down{i + 1}", ch[i + 1], ch[i], 3) for i in range(3)]
        if cfg.safa == "off":
            self.enc_down4 = st.conv("enc.down4", ch[4], ch[3], 3)

        if cfg.safa in ("maxpool_add", "avgpool", "cat"):
            self.safa_proj = [st.conv(f"safa.l{i + 1}.proj", ch[4], ch[i], 1) for i in range(4)]
            if cfg.safa == "cat":
                self.safa_fuse = st.conv("safa.fuse", ch[4], 4 * ch[4], 1)
        elif cfg.safa == "conv":
            self.safa_proj = [st.conv(f"safa.l{i + 1}.proj", ch[4], ch[i], 3) for i in range(4)]

        self.latent_blocks = [
            AttentionBlock(st, f"lat.blk{k}", ch[4], cfg.latent_heads, cfg.window,
                           cfg.ffn_expansion, "li")
            for k in range(cfg.latent_blocks)
        ]
        # a second bias table for the shrunken latent window used on small inputs
        self._latent_small = {}

        if cfg.decoder != "li_only":
            self.query_gens = [
                QueryGenerator(st, f"qgen.l{i + 1}", ch[4], ch[i], cfg.window, cfg.queries)
                for i in range(4)
            ]

        self.dec_up = [st.conv(f"dec.l{i + 1}.up", ch[i], ch[i + 1], 1) for i in range(4)]
        self.dec_blocks = []
        for i in range(4):
            level = []
            for k in range(cfg.decoder_blocks[i]):
                mode = self._block_mode(k)
                prefix = f"dec.l{i + 1}.blk{k}"
                if mode == "resblock":
                    level.append(ConvBlock(st, prefix, ch[i]))
                else:
                    level.append(SpatialAttentionBlock(
                        st, prefix, ch[i], cfg.decoder_heads[i], cfg.window,
                        cfg.ffn_expansion, mode))
            self.dec_blocks.append(level)

        if cfg.arh == "on":
            self.arh_pos = []
            self.arh_stages = []
            for i in (2, 3, 4):
                pos_proj = st.conv(f"arh.stage{i}.pos.proj", ch[0], ch[i - 1], 1)
                pos_dam = DualAttention(st, f"arh.stage{i}.pos.dam", ch[0])
                self.arh_pos.append((pos_proj, pos_dam))
                self.arh_stages.append([
                    RefineBlock(st, f"arh.stage{i}.blk{k}", ch[0])
                    for k in range(cfg.arh_blocks_per_stage)
                ])
        self.final_w, self.final_b = st.conv("arh.final", 3, ch[0], 3)
        self.arh_stage_order: list[int] = []

    def _block_mode(self, k):
        dec = self.cfg.decoder
        if dec == "li_only":
            return "li"
        if dec == "lgci_only":
            return "lgci"
        local = "resblock" if dec == "resblock" else "li"
        # alternate starting with local interaction
        return local if k % 2 == 0 else "lgci"

    # -- pieces ------------------------------------------------------------

    def encode(self, x):
        n, c, h, w = x.shape
        if h % 16 or w % 16:
            raise NotDivisible(f"encode: {h}x{w} not divisible by 16")
        feats = []
        f = T.conv2d(x, self.stem_w, self.stem_b, pad=1)
        for i in range(4):
            for blk in self.enc_blocks[i]:
                f = blk(f)
            feats.append(f)
            if i < 3:
                w_, b_ = self.enc_down[i]
                f = T.conv2d(f, w_, b_, stride=2, pad=1)
        latent_in = None
        if self.cfg.safa == "off":
            w_, b_ = self.enc_down4
            latent_in = T.conv2d(feats[3], w_, b_, stride=2, pad=1)
        return feats, latent_in

    def safa_aggregate(self, feats):
        mode = self.cfg.safa
        target = feats[0].shape[2] // 16
        parts = []
        for i, f in enumerate(feats):
            factor = f.shape[2] // target
            if mode == "maxpool_add" or mode == "cat":
                p = T.maxpool2d(f, factor, factor)
                w_, b_ = self.safa_proj[i]
                parts.append(T.conv2d(p, w_, b_))
            elif mode == "avgpool":
                p = T.avgpool2d(f, factor, factor)
                w_, b_ = self.safa_proj[i]
                parts.append(T.conv2d(p, w_, b_))
            elif mode == "conv":
                w_, b_ = self.safa_proj[i]
                parts.append(T.conv2d(f, w_, b_, stride=factor, pad=1))
        if mode == "cat":
            w_, b_ = self.safa_fuse
            return T.conv2d(T.concat(parts, axis=1), w_, b_)
        out = parts[0]
        for p in parts[1:]:
            out = T.add(out, p)
        return out

    def _latent_bias(self, blk, side):
        """Latent windows shrink to the grid side when it is below cfg.window."""
        if side >= blk.window:
            return blk.window, blk._bias()
        full_idx = self._latent_small.get(side)
        if full_idx is None:
            # reuse the central offsets of the full table for the smaller window
            s_full = blk.window
            coords = np.stack(
                np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), -1
            ).reshape(-1, 2)
            rel = coords[:, None, :] - coords[None, :, :] + (s_full - 1)
            full_idx = (rel[..., 0] * (2 * s_full - 1) + rel[..., 1]).astype(np.int64)
            self._latent_small[side] = full_idx
        b = T.gather_rows(blk.relpos.table, full_idx)
        return side, T.permute(b, (2, 0, 1))

    def latent_forward(self, f):
        n, c, h, w = f.shape
        side = min(self.cfg.window, h)
        if h % side or w % side:
            raise NotDivisible(f"latent grid {h}x{w} not divisible by window {side}")
        for blk in self.latent_blocks:
            tok = T.window_partition(f, side)
            hn = T.layernorm(tok, blk.n1g, blk.n1b)
            d = blk.c // blk.heads
            q = _split_heads(T.linear(hn, blk.qw, blk.qb), blk.heads)
            k = _split_heads(T.linear(hn, blk.kw, blk.kb), blk.heads)
            v = _split_heads(T.linear(hn, blk.vw, blk.vb), blk.heads)
            logits = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
            _, bias = self._latent_bias(blk, side)
            att = T.softmax(T.add(logits, bias), axis=-1)
            _probe(att)
            out = T.linear(_merge_heads(T.matmul(att, v)), blk.ow, blk.ob)
            tok = T.add(tok, out)
            tok = T.add(tok, blk.ffn(T.layernorm(tok, blk.n2g, blk.n2b)))
            f = T.window_merge(tok, side, n, c, h, w)
        return f

    def generate_queries(self, f_latent, batch):
        """One [N, window^2, C_i] query set per decoder level (None for same_layer,
        which derives its queries inside decode)."""
        if self.cfg.decoder == "li_only":
            return [None] * 4
        if self.cfg.queries == "same_layer":
            return [None] * 4
        return [gen(f_latent, batch) for gen in self.query_gens]

    def decode(self, f_latent, enc_feats, queries):
        n = f_latent.shape[0]
        x = f_latent
        dec_feats = [None] * 4
        for i in (3, 2, 1, 0):  # coarse to fine
            x = T.upsample_nearest2x(x)
            w_, b_ = self.dec_up[i]
            x = T.add(T.conv2d(x, w_, b_), enc_feats[i])
            q_s = queries[i]
            if q_s is None and self.cfg.queries == "same_layer" and self.cfg.decoder != "li_only":
                q_s = self.query_gens[i](x, n)
            for blk in self.dec_blocks[i]:
                if isinstance(blk, ConvBlock):
                    x = blk(x)
                else:
                    x = blk(x, q_s) if blk.block.mode == "lgci" else blk(x)
            dec_feats[i] = x
        return dec_feats, x

    def position_encoding(self, stage, f_enc, f_dec):
        """Degradation-aware position encoding for stage in {2,3,4}."""
        pos_proj, pos_dam = self.arh_pos[stage - 2]
        w_, b_ = pos_proj
        # 1x1 conv commutes with nearest upsampling; project at level resolution
        p = T.conv2d(T.add(f_enc, f_dec), w_, b_)
        for _ in range(stage - 1):
            p = T.upsample_nearest2x(p)
        return pos_dam(p)

    def refine_progressive(self, f_in, positions):
        self.arh_stage_order = []
        if self.cfg.arh == "off":
            return T.conv2d(f_in, self.final_w, self.final_b, pad=1)
        f = f_in
        for stage, p in zip((2, 3, 4), positions):
            self.arh_stage_order.append(stage)
            f = T.add(f, p)
            for blk in self.arh_stages[stage - 2]:
                f = blk(f)
        return T.conv2d(f, self.final_w, self.final_b, pad=1)

    def forward_full(self, x):
        n, c, h, w = x.shape
        try:
            self.cfg.check_input_size(h, w)
        except InvalidConfig as e:
            raise NotDivisible(str(e)) from e
        enc_feats, latent_in = self.encode(x)
        if self.cfg.safa != "off":
            latent_in = self.safa_aggregate(enc_feats)
        f_latent = self.latent_forward(latent_in)
        queries = self.generate_queries(f_latent, n)
        dec_feats, f_in = self.decode(f_latent, enc_feats, queries)
        if self.cfg.arh == "on":
            positions = [
                self.position_encoding(i, enc_feats[i - 1], dec_feats[i - 1])
                for i in (2, 3, 4)
            ]
        else:
            positions = []
        return self.refine_progressive(f_in, positions)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def params(self):
        return self.store.params

    def param_list(self):
        return [self.store.params[k] for k in sorted(self.store.params)]

    def param_count(self) -> int:
        return sum(p.size for p in self.store.params.values())

    def flops_estimate(self, h, w) -> int:
        """Multiply-accumulate count of one forward at h x w (batch 1)."""
        x = Tensor(np.zeros((1, 3, h, w)), dtype=self.cfg.dtype)
        with T.no_grad(), T.count_macs() as counter:
            self.forward_full(x)
        return counter.macs


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)
