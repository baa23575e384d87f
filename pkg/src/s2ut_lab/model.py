"""Encoder-decoder sequence model over discrete units.

The encoder is a Conformer-lite stack (self-attention, optional depthwise
separable convolution, feed-forward; post-LN residuals) with tap states
recorded at configured layers for the auxiliary text decoders. The decoder
exposes every intermediate state so losses can attach to a chosen layer.
Multi-token prediction heads are owned by the model but live under the
"mtp." parameter namespace and are never touched by the generation path.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN_EPS = 1e-5

MTP_VARIANTS = ("none", "parallel_linear", "deepseek_v3", "vocalnet", "s2ut")

CKPT_MAGIC = b"S2UTLAB\x00"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture and loss-attachment hyperparameters.

    Desk-scale defaults; the full-scale configuration (12 enc layers at 256,
    6 dec layers at 512, 7 future tokens, attachment layer 3, taps 6 and 8,
    3-layer heads) is expressible through the same fields.
    """

    unit_vocab: int
    text_vocab: int
    feat_dim: int = 16
    enc_layers: int = 4
    enc_dim: int = 64
    dec_layers: int = 4
    dec_dim: int = 64
    heads: int = 4
    mtp_variant: str = "none"
    n_future: int = 3
    attach_layer: int = 2          # decoder layer (1-based) feeding CTC and mid-layer MTP
    mtp_head_layers: int = 1
    aux_enc_taps: tuple[int, ...] = (2, 3)  # 1-based; earlier tap -> source text, later -> target text
    aux_dec_layers: int = 1
    use_conv_block: bool = True
    ffn_mult: int = 2
    unit_bos: int = -1
    unit_eos: int = -1
    unit_pad: int = -1
    text_blank: int = 0
    text_bos: int = -1
    text_eos: int = -1
    text_pad: int = -1

    def __post_init__(self):
        if self.unit_bos < 0:
            self.unit_bos = self.unit_vocab - 3
        if self.unit_eos < 0:
            self.unit_eos = self.unit_vocab - 2
        if self.unit_pad < 0:
            self.unit_pad = self.unit_vocab - 1
        if self.text_bos < 0:
            self.text_bos = self.text_vocab - 3
        if self.text_eos < 0:
            self.text_eos = self.text_vocab - 2
        if self.text_pad < 0:
            self.text_pad = self.text_vocab - 1
        if self.mtp_variant not in MTP_VARIANTS:
            raise ValueError(f"unknown mtp_variant {self.mtp_variant!r}, expected one of {MTP_VARIANTS}")
        if not (1 <= self.attach_layer <= self.dec_layers):
            raise ValueError(f"attach_layer must satisfy 1 <= m <= {self.dec_layers}, got {self.attach_layer}")
        if self.n_future < 1:
            raise ValueError("n_future must be >= 1")
        if self.enc_dim % self.heads or self.dec_dim % self.heads:
            raise ValueError("enc_dim and dec_dim must be divisible by heads")
        for tap in self.aux_enc_taps:
            if not (1 <= tap <= self.enc_layers):
                raise ValueError(f"aux tap {tap} outside encoder depth {self.enc_layers}")

    def digest(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EncoderOutput:
    h_enc: Tensor                     # (B, S, enc_dim)
    tap_states: dict[int, Tensor]     # 1-based encoder layer -> (B, S, enc_dim)
    src_mask: np.ndarray              # (B, S) bool, True on real frames


@dataclass
class DecoderTrace:
    states: list[Tensor]              # H^0 .. H^L, each (B, T, dec_dim)


def output_logits(h: Tensor, w_out: Tensor) -> Tensor:
    """Shared output projection; pair with log_softmax_row for scoring."""
    return ad.matmul(h, w_out)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.W = Tensor(_uniform(rng, d_in, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.W, self.b)

    def named_params(self, prefix: str):
        yield f"{prefix}.W", self.W
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNormParams:
    def __init__(self, d: int):
        self.g = Tensor(np.ones(d), requires_grad=True)
        self.b = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b, eps=LN_EPS)

    def named_params(self, prefix: str):
        yield f"{prefix}.g", self.g
        yield f"{prefix}.b", self.b


class MultiHeadAttention:
    def __init__(self, rng, d_model: int, d_kv: int, heads: int):
        self.heads = heads
        self.head_dim = d_model // heads
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_kv, d_model)
        self.wv = Linear(rng, d_kv, d_model)
        self.wo = Linear(rng, d_model, d_model)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: Tensor | np.ndarray | None) -> Tensor:
        mask_arr = mask.data if isinstance(mask, Tensor) else mask
        ctx = ad.multi_head_attention_core(
            self.wq(q_in), self.wk(kv_in), self.wv(kv_in),
            self.heads, mask_arr, 1.0 / math.sqrt(self.head_dim),
        )
        return self.wo(ctx)

    def named_params(self, prefix: str):
        for name, sub in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            yield from sub.named_params(f"{prefix}.{name}")


class FeedForward:
    def __init__(self, rng, d: int, mult: int):
        self.w1 = Linear(rng, d, d * mult)
        self.w2 = Linear(rng, d * mult, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(ad.gelu(self.w1(x)))

    def named_params(self, prefix: str):
        yield from self.w1.named_params(f"{prefix}.w1")
        yield from self.w2.named_params(f"{prefix}.w2")


class EncoderLayer:
    def __init__(self, rng, d: int, heads: int, ffn_mult: int, use_conv: bool):
        self.attn = MultiHeadAttention(rng, d, d, heads)
        self.ln1 = LayerNormParams(d)
        self.use_conv = use_conv
        if use_conv:
            self.conv_dw = Tensor(_uniform(rng, 3, (3, d)), requires_grad=True)
            self.conv_pw = Linear(rng, d, d)
            self.ln_conv = LayerNormParams(d)
        self.ffn = FeedForward(rng, d, ffn_mult)
        self.ln2 = LayerNormParams(d)

    def __call__(self, x: Tensor, attn_mask: Tensor | None, frame_mask: Tensor | None) -> Tensor:
        x = self.ln1(ad.add(x, self.attn(x, x, attn_mask)))
        if self.use_conv:
            xin = ad.mul(x, frame_mask) if frame_mask is not None else x
            c = self.conv_pw(ad.gelu(ad.depthwise_conv1d(xin, self.conv_dw)))
            x = self.ln_conv(ad.add(x, c))
        x = self.ln2(ad.add(x, self.ffn(x)))
        return x

    def named_params(self, prefix: str):
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln1.named_params(f"{prefix}.ln1")
        if self.use_conv:
            yield f"{prefix}.conv_dw", self.conv_dw
            yield from self.conv_pw.named_params(f"{prefix}.conv_pw")
            yield from self.ln_conv.named_params(f"{prefix}.ln_conv")
        yield from self.ffn.named_params(f"{prefix}.ffn")
        yield from self.ln2.named_params(f"{prefix}.ln2")


class DecoderLayer:
    def __init__(self, rng, d: int, d_kv: int, heads: int, ffn_mult: int):
        self.self_attn = MultiHeadAttention(rng, d, d, heads)
        self.ln1 = LayerNormParams(d)
        self.cross_attn = MultiHeadAttention(rng, d, d_kv, heads)
        self.ln2 = LayerNormParams(d)
        self.ffn = FeedForward(rng, d, ffn_mult)
        self.ln3 = LayerNormParams(d)

    def __call__(self, x: Tensor, memory: Tensor, causal_mask: Tensor, cross_mask: Tensor | None) -> Tensor:
        x = self.ln1(ad.add(x, self.self_attn(x, x, causal_mask)))
        x = self.ln2(ad.add(x, self.cross_attn(x, memory, cross_mask)))
        x = self.ln3(ad.add(x, self.ffn(x)))
        return x

    def named_params(self, prefix: str):
        yield from self.self_attn.named_params(f"{prefix}.self_attn")
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.cross_attn.named_params(f"{prefix}.cross_attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.ffn.named_params(f"{prefix}.ffn")
        yield from self.ln3.named_params(f"{prefix}.ln3")


class DecoderStack:
    """A run of decoder layers over an already-embedded input."""

    def __init__(self, rng, n_layers: int, d: int, d_kv: int, heads: int, ffn_mult: int):
        self.layers = [DecoderLayer(rng, d, d_kv, heads, ffn_mult) for _ in range(n_layers)]

    def run(self, x: Tensor, memory: Tensor, causal_mask: Tensor, cross_mask: Tensor | None,
            collect: bool = False):
        states = [x]
        for layer in self.layers:
            x = layer(x, memory, causal_mask, cross_mask)
            if collect:
                states.append(x)
        return states if collect else x

    def named_params(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layers.{i}")


class TextDecoderHead:
    """Small causal decoder over text tokens, cross-attending to a tap state."""

    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.enc_dim
        self.emb = Tensor(_uniform(rng, d, (cfg.text_vocab, d)), requires_grad=True)
        self.stack = DecoderStack(rng, cfg.aux_dec_layers, d, d, cfg.heads, cfg.ffn_mult)
        self.out = Linear(rng, d, cfg.text_vocab, bias=False)

    def named_params(self, prefix: str):
        yield f"{prefix}.emb", self.emb
        yield from self.stack.named_params(prefix)
        yield from self.out.named_params(f"{prefix}.out")


class MtpParams:
    """Variant-specific multi-token prediction parameters.

    parallel_linear scores shift 0 through the model's own output projection
    (that term is the next-token term) and owns fresh projections for the
    remaining shifts; the chained and sibling-head variants own small decoder
    stacks and share the model's output projection.
    """

    def __init__(self, rng, cfg: ModelConfig):
        self.variant = cfg.mtp_variant
        n = cfg.n_future
        d = cfg.dec_dim
        self.proj: dict[int, Linear] = {}
        self.fuse_ln_prev: dict[int, LayerNormParams] = {}
        self.fuse_ln_emb: dict[int, LayerNormParams] = {}
        self.fuse: dict[int, Linear] = {}
        self.heads: dict[int, DecoderStack] = {}
        if self.variant == "parallel_linear":
            for k in range(1, n):
                self.proj[k] = Linear(rng, d, cfg.unit_vocab, bias=False)
        elif self.variant == "deepseek_v3":
            for k in range(1, n):
                self.fuse_ln_prev[k] = LayerNormParams(d)
                self.fuse_ln_emb[k] = LayerNormParams(d)
                self.fuse[k] = Linear(rng, 2 * d, d, bias=False)
                self.heads[k] = DecoderStack(rng, cfg.mtp_head_layers, d, cfg.enc_dim, cfg.heads, cfg.ffn_mult)
        elif self.variant == "vocalnet":
            for k in range(1, n):
                self.heads[k] = DecoderStack(rng, cfg.mtp_head_layers, d, cfg.enc_dim, cfg.heads, cfg.ffn_mult)
        elif self.variant == "s2ut":
            for k in range(n):
                self.heads[k] = DecoderStack(rng, cfg.mtp_head_layers, d, cfg.enc_dim, cfg.heads, cfg.ffn_mult)

    def named_params(self, prefix: str):
        for k in sorted(self.proj):
            yield from self.proj[k].named_params(f"{prefix}.k{k}.proj")
        for k in sorted(self.heads):
            if k in self.fuse:
                yield from self.fuse_ln_prev[k].named_params(f"{prefix}.k{k}.ln_prev")
                yield from self.fuse_ln_emb[k].named_params(f"{prefix}.k{k}.ln_emb")
                yield from self.fuse[k].named_params(f"{prefix}.k{k}.fuse")
            yield from self.heads[k].named_params(f"{prefix}.k{k}")


# ---------------------------------------------------------------------------
# positional encoding and masks
# ---------------------------------------------------------------------------


def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def causal_mask(t: int) -> np.ndarray:
    m = np.zeros((1, 1, t, t))
    m[..., np.triu_indices(t, k=1)[0], np.triu_indices(t, k=1)[1]] = -1e9
    return m


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, S) bool -> (B, 1, 1, S) additive mask."""
    return np.where(valid[:, None, None, :], 0.0, -1e9)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d_enc, d_dec = cfg.enc_dim, cfg.dec_dim

        self.in_proj = Linear(rng, cfg.feat_dim, d_enc)
        self.enc_layers = [
            EncoderLayer(rng, d_enc, cfg.heads, cfg.ffn_mult, cfg.use_conv_block)
            for _ in range(cfg.enc_layers)
        ]
        self.unit_emb = Tensor(_uniform(rng, d_dec, (cfg.unit_vocab, d_dec)), requires_grad=True)
        self.decoder = DecoderStack(rng, cfg.dec_layers, d_dec, d_enc, cfg.heads, cfg.ffn_mult)
        self.w_out = Tensor(_uniform(rng, d_dec, (d_dec, cfg.unit_vocab)), requires_grad=True)
        self.ctc_head = Linear(rng, d_dec, cfg.text_vocab)
        taps = sorted(cfg.aux_enc_taps)
        self.aux_src = TextDecoderHead(rng, cfg)   # earlier tap predicts source text
        self.aux_tgt = TextDecoderHead(rng, cfg)   # later tap predicts target text
        self.aux_tap_src, self.aux_tap_tgt = taps[0], taps[-1]
        self.mtp = MtpParams(rng, cfg)

        self._pe_enc = sinusoidal_encoding(512, d_enc)
        self._pe_dec = sinusoidal_encoding(512, d_dec)
        self._causal_cache: dict[int, Tensor] = {}

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(it):
            for name, t in it:
                out[name] = t

        put(self.in_proj.named_params("encoder.in_proj"))
        for i, layer in enumerate(self.enc_layers):
            put(layer.named_params(f"encoder.layers.{i}"))
        out["decoder.emb"] = self.unit_emb
        put(self.decoder.named_params("decoder"))
        out["out_proj.W"] = self.w_out
        put(self.ctc_head.named_params("ctc_head"))
        put(self.aux_src.named_params("aux.src"))
        put(self.aux_tgt.named_params("aux.tgt"))
        put(self.mtp.named_params("mtp"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def inference_param_names(self) -> list[str]:
        return [n for n in self.named_params() if not n.startswith("mtp.")]

    # -- helpers ------------------------------------------------------------

    def _pe(self, table: np.ndarray, t: int, d: int) -> np.ndarray:
        if t > table.shape[0]:
            table = sinusoidal_encoding(2 * t, d)
            if d == self.cfg.enc_dim:
                self._pe_enc = table
            if d == self.cfg.dec_dim:
                self._pe_dec = table
        return table[:t]

    def causal(self, t: int) -> Tensor:
        if t not in self._causal_cache:
            self._causal_cache[t] = Tensor(causal_mask(t))
        return self._causal_cache[t]

    # -- encoder ------------------------------------------------------------

    def encode(self, src_feats, src_mask: np.ndarray | None = None) -> EncoderOutput:
        """src_feats (S, F) or (B, S, F); mask (B, S) True on real frames."""
        feats = np.asarray(src_feats, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        b, s, f = feats.shape
        if s < 1:
            raise ValueError("encode requires at least one source frame")
        if f != self.cfg.feat_dim:
            raise ValueError(f"feature dim {f} does not match configured input size {self.cfg.feat_dim}")
        if src_mask is None:
            src_mask = np.ones((b, s), dtype=bool)
        x = self.in_proj(Tensor(feats))
        x = ad.add(x, Tensor(self._pe(self._pe_enc, s, self.cfg.enc_dim)[None]))
        attn_mask = Tensor(key_padding_mask(src_mask))
        frame_mask = Tensor(src_mask[..., None].astype(np.float64))
        taps: dict[int, Tensor] = {}
        for i, layer in enumerate(self.enc_layers, start=1):
            x = layer(x, attn_mask, frame_mask)
            if i in self.cfg.aux_enc_taps:
                taps[i] = x
        return EncoderOutput(h_enc=x, tap_states=taps, src_mask=src_mask)

    # -- decoder ------------------------------------------------------------

    def decode_trace(self, enc: EncoderOutput, unit_ids) -> DecoderTrace:
        """unit_ids: right-shifted unit ids, (T,) or (B, T), first id must be bos."""
        ids = np.asarray(unit_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] < 1:
            raise ValueError("decode_trace requires a non-empty target (at least bos)")
        if (ids[:, 0] != self.cfg.unit_bos).any():
            raise ValueError("shifted unit sequence must begin with bos")
        b, t = ids.shape
        x = ad.mul(ad.embedding_lookup(self.unit_emb, ids), math.sqrt(self.cfg.dec_dim))
        x = ad.add(x, Tensor(self._pe(self._pe_dec, t, self.cfg.dec_dim)[None]))
        cross = Tensor(key_padding_mask(enc.src_mask))
        states = self.decoder.run(x, enc.h_enc, self.causal(t), cross, collect=True)
        return DecoderTrace(states=states)

    def out_logits(self, h: Tensor) -> Tensor:
        return output_logits(h, self.w_out)

    def ctc_logprobs(self, h_mid: Tensor) -> Tensor:
        return ad.log_softmax_row(self.ctc_head(h_mid))

    # -- auxiliary text decoders ---------------------------------------------

    def aux_text_logits(self, which: str, enc: EncoderOutput, text_in_ids) -> Tensor:
        head = self.aux_src if which == "src" else self.aux_tgt
        tap_idx = self.aux_tap_src if which == "src" else self.aux_tap_tgt
        if tap_idx not in enc.tap_states:
            raise ValueError(f"encoder tap {tap_idx} missing; configured taps {self.cfg.aux_enc_taps}")
        tap = enc.tap_states[tap_idx]
        ids = np.asarray(text_in_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        t = ids.shape[1]
        d = self.cfg.enc_dim
        x = ad.mul(ad.embedding_lookup(head.emb, ids), math.sqrt(d))
        x = ad.add(x, Tensor(self._pe(self._pe_enc, t, d)[None]))
        cross = Tensor(key_padding_mask(enc.src_mask))
        h = head.stack.run(x, tap, self.causal(t), cross)
        return head.out(h)

    # -- decode-time helpers (forward-only) -----------------------------------

    def tile_encoder_output(self, enc: EncoderOutput, n: int) -> EncoderOutput:
        h = Tensor(np.repeat(enc.h_enc.data, n, axis=0))
        taps = {k: Tensor(np.repeat(v.data, n, axis=0)) for k, v in enc.tap_states.items()}
        return EncoderOutput(h_enc=h, tap_states=taps, src_mask=np.repeat(enc.src_mask, n, axis=0))

    def prefix_logprobs(self, enc: EncoderOutput, prefixes) -> np.ndarray:
        """Last-position next-unit log-probs for equal-length prefixes, (n, V)."""
        ids = np.asarray(prefixes, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        src = enc if enc.h_enc.shape[0] == ids.shape[0] else self.tile_encoder_output(enc, ids.shape[0])
        with ad.no_grad():
            trace = self.decode_trace(src, ids)
            logits = self.out_logits(trace.states[-1])
            logp = ad.log_softmax_row(logits)
        return logp.data[:, -1, :]

    def sequence_unit_distributions(self, enc: EncoderOutput, prefix_ids) -> np.ndarray:
        """Per-position next-unit distributions for one full prefix sequence, (T, V)."""
        ids = np.asarray(prefix_ids, dtype=np.int64)[None]
        with ad.no_grad():
            trace = self.decode_trace(enc, ids)
            probs = ad.softmax_row(self.out_logits(trace.states[-1]))
        return probs.data[0]

    def ctc_frame_labels(self, enc: EncoderOutput, prefix_ids) -> np.ndarray:
        """Argmax CTC label per decoder position of one prefix sequence, (T,)."""
        ids = np.asarray(prefix_ids, dtype=np.int64)[None]
        with ad.no_grad():
            trace = self.decode_trace(enc, ids)
            logits = self.ctc_head(trace.states[self.cfg.attach_layer])
        return logits.data[0].argmax(axis=-1)

    # -- checkpointing --------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_params().items()}

    def save_checkpoint(self, path, extra_arrays: dict[str, np.ndarray] | None = None,
                        meta: dict | None = None) -> None:
        arrays = dict(self.state_arrays())
        if extra_arrays:
            arrays.update(extra_arrays)
        write_array_container(path, arrays, config_digest=self.cfg.digest(), meta=meta or {})

    def load_checkpoint(self, path) -> dict:
        header, arrays = read_array_container(path)
        if header["config_digest"] != self.cfg.digest():
            raise ValueError(
                f"checkpoint config digest {header['config_digest']} does not match model {self.cfg.digest()}"
            )
        params = self.named_params()
        for name, t in params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            t.data = arrays[name]
        header["extra_arrays"] = {k: v for k, v in arrays.items() if k not in params}
        return header


# ---------------------------------------------------------------------------
# versioned little-endian array container
# ---------------------------------------------------------------------------


def write_array_container(path, arrays: dict[str, np.ndarray], config_digest: str = "",
                          meta: dict | None = None) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"config_digest": config_digest, "meta": meta or {}, "manifest": manifest},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_array_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        body = fh.read()
    arrays = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    return header, arrays
