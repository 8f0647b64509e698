"""Encoder-decoder transformer with per-step quantization codebooks.

The encoder turns a token sequence into a memory of hidden states; the
decoder consumes a (possibly empty) prefix of already-assigned codes and
produces one hidden state per step. A dot-product softmax of that state
against the step's codebook yields the code distribution; the argmax is the
assigned code. Codebooks are never trained by gradient - they follow
exponential moving averages of the states assigned to them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from semidx import autodiff as ad
from semidx.autodiff import Tensor

SemanticId = tuple[int, ...]

_NEG_BIAS = -1e9


@dataclass
class ModelConfig:
    """Backbone and quantization hyperparameters.

    Desk-scale defaults; the full-scale schedule used in production-sized
    runs is 4 steps with 128-entry codebooks (see the class constants).
    """

    vocab_size: int
    hidden_size: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 2
    feed_forward_size: int = 256
    max_text_len: int = 32
    num_steps: int = 4
    codebook_size: int = 16
    dropout: float = 0.0
    seed: int = 0

    FULL_SCALE_NUM_STEPS = 4
    FULL_SCALE_CODEBOOK_SIZE = 128

    def __post_init__(self):
        if self.hidden_size % self.attention_heads != 0:
            raise ValueError("hidden_size must be divisible by attention_heads")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")


class Codebook:
    """One step's K x D embedding table plus its EMA statistics.

    Invariant maintained by every update: each row equals
    ema_sums[j] / (ema_counts[j] + laplace_eps).
    """

    def __init__(self, step: int, size: int, dim: int, decay: float = 0.99,
                 laplace_eps: float = 1e-5, rng: np.random.Generator | None = None):
        if not (0.0 < decay <= 1.0):
            raise ValueError("decay must lie in (0, 1]")
        if laplace_eps <= 0:
            raise ValueError("laplace_eps must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.step = int(step)
        self.size = int(size)
        self.dim = int(dim)
        self.decay = float(decay)
        self.laplace_eps = float(laplace_eps)
        init = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(size, dim))
        self.embeddings = Tensor(init, requires_grad=True)
        self.ema_counts = np.zeros(size, dtype=np.float64)
        # laplace-consistent start so the row identity already holds
        self.ema_sums = init * self.laplace_eps

    def conditioning_rows(self) -> np.ndarray:
        """Unit-normalized rows used as decoder inputs for assigned codes.

        Feeding raw EMA rows lets the prefix dominate later decoder states
        (their norm tracks the state norm), which starves deeper codes of
        content signal; normalizing keeps the branch identity without the
        amplitude.
        """
        norms = np.linalg.norm(self.embeddings.data, axis=1, keepdims=True)
        return self.embeddings.data / np.maximum(norms, 1e-12)

    def logits(self, d: Tensor) -> Tensor:
        """Dot products of decoder states against the codebook rows.

        The codebook enters the graph as a constant: code losses train the
        encoder/decoder only, rows move via EMA.
        """
        single = d.ndim == 1
        if single:
            d = ad.reshape(d, (1, -1))
        out = ad.matmul(d, Tensor(self.embeddings.data.T))
        return ad.reshape(out, (-1,)) if single else out

    def distribution(self, d: Tensor, temperature: float = 1.0) -> Tensor:
        return ad.softmax(self.logits(d), axis=-1, temperature=temperature)

    def assign(self, d_values: np.ndarray):
        """Argmax code per row; ties break toward the lowest index."""
        d_values = np.asarray(d_values, dtype=np.float64)
        scores = d_values @ self.embeddings.data.T
        return int(np.argmax(scores)) if scores.ndim == 1 else np.argmax(scores, axis=-1)

    def ema_update(self, vectors: np.ndarray, codes: np.ndarray) -> None:
        """Fold one batch of assigned vectors into the moving averages."""
        vectors = np.asarray(vectors, dtype=np.float64)
        codes = np.asarray(codes, dtype=np.int64)
        counts = np.bincount(codes, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self.ema_sums)
        np.add.at(sums, codes, vectors)
        g = self.decay
        self.ema_counts = g * self.ema_counts + (1.0 - g) * counts
        self.ema_sums = g * self.ema_sums + (1.0 - g) * sums
        self._refresh_rows()

    def reinit_dead(self, threshold: float, donors: np.ndarray,
                    rng: np.random.Generator) -> int:
        """Reset rows with usage below ``threshold`` to random donor states."""
        donors = np.asarray(donors, dtype=np.float64)
        if donors.size == 0:
            return 0
        dead = np.where(self.ema_counts < threshold)[0]
        for j in dead:
            v = donors[int(rng.integers(len(donors)))]
            self.ema_counts[j] = 1.0
            self.ema_sums[j] = v * (1.0 + self.laplace_eps)
        if dead.size:
            self._refresh_rows()
        return int(dead.size)

    def _refresh_rows(self) -> None:
        self.embeddings.data = self.ema_sums / (self.ema_counts[:, None] + self.laplace_eps)

    def row_identity_error(self) -> float:
        expected = self.ema_sums / (self.ema_counts[:, None] + self.laplace_eps)
        return float(np.max(np.abs(self.embeddings.data - expected)))

    def usage_entropy(self) -> float:
        total = self.ema_counts.sum()
        if total <= 0:
            return 0.0
        p = self.ema_counts / total
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())


def _causal_bias(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), _NEG_BIAS), k=1)[None, None]


def _pad_bias(mask: np.ndarray) -> np.ndarray:
    # mask: (B, L) with 1 for real tokens; bias keyed on attention keys
    return _NEG_BIAS * (1.0 - mask[:, None, None, :])


class TransformerModel:
    """The trainable backbone plus its codebooks."""

    def __init__(self, config: ModelConfig, vocab_hash: str = "",
                 rng: np.random.Generator | None = None):
        self.config = config
        self.vocab_hash = vocab_hash
        self.trained_steps = 0
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        self._init_params(rng)
        self.codebooks = [
            Codebook(step=t, size=config.codebook_size, dim=config.hidden_size, rng=rng)
            for t in range(1, config.num_steps + 1)
        ]
        self._rng = rng

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        D, F = cfg.hidden_size, cfg.feed_forward_size
        dec_len = max(cfg.max_text_len + 1, cfg.num_steps + 1)

        def table(name, shape):
            # embedding rows at 1/sqrt(D): unit-ish activations from step one,
            # which matters a lot at desk scale with few optimizer steps
            self.params[name] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(D), size=shape),
                                       requires_grad=True)

        def proj(name, shape):
            fan_in = shape[0]
            self.params[name] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape),
                                       requires_grad=True)

        def ln(name):
            self.params[f"{name}.g"] = Tensor(np.ones(D), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(D), requires_grad=True)

        table("tok_emb", (cfg.vocab_size, D))
        table("pos_enc", (cfg.max_text_len, D))
        table("pos_dec", (dec_len, D))
        table("code_start", (1, D))
        for i in range(cfg.encoder_layers):
            for w in ("wq", "wk", "wv", "wo"):
                proj(f"enc{i}.attn.{w}", (D, D))
            proj(f"enc{i}.ff.w1", (D, F))
            self.params[f"enc{i}.ff.b1"] = Tensor(np.zeros(F), requires_grad=True)
            proj(f"enc{i}.ff.w2", (F, D))
            self.params[f"enc{i}.ff.b2"] = Tensor(np.zeros(D), requires_grad=True)
            ln(f"enc{i}.ln1")
            ln(f"enc{i}.ln2")
        ln("enc_final")
        for i in range(cfg.decoder_layers):
            for w in ("wq", "wk", "wv", "wo"):
                proj(f"dec{i}.self.{w}", (D, D))
                proj(f"dec{i}.cross.{w}", (D, D))
            proj(f"dec{i}.ff.w1", (D, F))
            self.params[f"dec{i}.ff.b1"] = Tensor(np.zeros(F), requires_grad=True)
            proj(f"dec{i}.ff.w2", (F, D))
            self.params[f"dec{i}.ff.b2"] = Tensor(np.zeros(D), requires_grad=True)
            ln(f"dec{i}.ln1")
            ln(f"dec{i}.ln2")
            ln(f"dec{i}.ln3")
        ln("dec_final")
        proj("lm_head", (D, cfg.vocab_size))

    def parameters(self) -> dict[str, Tensor]:
        """Gradient-trained parameters (codebooks excluded by design)."""
        return self.params

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def _attention(self, prefix: str, x_q: Tensor, x_kv: Tensor,
                   bias: np.ndarray | None) -> Tensor:
        p = self.params
        H = self.config.attention_heads
        D = self.config.hidden_size
        dh = D // H
        B, Lq = x_q.shape[0], x_q.shape[1]
        Lk = x_kv.shape[1]

        def heads(t: Tensor, L: int) -> Tensor:
            return ad.transpose(ad.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q = heads(ad.matmul(x_q, p[f"{prefix}.wq"]), Lq)
        k = heads(ad.matmul(x_kv, p[f"{prefix}.wk"]), Lk)
        v = heads(ad.matmul(x_kv, p[f"{prefix}.wv"]), Lk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        if bias is not None:
            scores = ad.add(scores, bias)
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, Lq, D))
        return ad.matmul(ctx, p[f"{prefix}.wo"])

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = ad.gelu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _maybe_dropout(self, x: Tensor, train: bool) -> Tensor:
        if train and self.config.dropout > 0.0:
            return ad.dropout(x, self.config.dropout, self._rng)
        return x

    def encode_batch(self, tokens: np.ndarray, mask: np.ndarray,
                     train: bool = False) -> Tensor:
        """Encoder memory for a padded batch: (B, L) ids -> (B, L, D)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.asarray(mask, dtype=np.float64)
        B, L = tokens.shape
        if L == 0:
            raise ValueError("cannot encode an empty token sequence")
        if L > self.config.max_text_len:
            raise ValueError(f"sequence length {L} exceeds max_text_len "
                             f"{self.config.max_text_len}")
        p = self.params
        x = ad.add(ad.embedding(p["tok_emb"], tokens), p["pos_enc"][:L])
        x = self._maybe_dropout(x, train)
        bias = _pad_bias(mask)
        for i in range(self.config.encoder_layers):
            h = ad.layer_norm(x, p[f"enc{i}.ln1.g"], p[f"enc{i}.ln1.b"])
            x = ad.add(x, self._maybe_dropout(self._attention(f"enc{i}.attn", h, h, bias), train))
            h = ad.layer_norm(x, p[f"enc{i}.ln2.g"], p[f"enc{i}.ln2.b"])
            x = ad.add(x, self._maybe_dropout(self._ff(f"enc{i}.ff", h), train))
        return ad.layer_norm(x, p["enc_final.g"], p["enc_final.b"])

    def encode(self, tokens: Sequence[int]) -> Tensor:
        """Single-sequence encoder memory: one D-vector per input position."""
        ids = np.asarray(list(tokens), dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot encode an empty token sequence")
        memory = self.encode_batch(ids[None, :], np.ones((1, ids.size)))
        return ad.reshape(memory, (ids.size, self.config.hidden_size))

    def _decode_stack(self, x: Tensor, self_bias: np.ndarray, memory: Tensor,
                      cross_bias: np.ndarray | None, train: bool) -> Tensor:
        p = self.params
        for i in range(self.config.decoder_layers):
            h = ad.layer_norm(x, p[f"dec{i}.ln1.g"], p[f"dec{i}.ln1.b"])
            x = ad.add(x, self._maybe_dropout(
                self._attention(f"dec{i}.self", h, h, self_bias), train))
            h = ad.layer_norm(x, p[f"dec{i}.ln2.g"], p[f"dec{i}.ln2.b"])
            x = ad.add(x, self._maybe_dropout(
                self._attention(f"dec{i}.cross", h, memory, cross_bias), train))
            h = ad.layer_norm(x, p[f"dec{i}.ln3.g"], p[f"dec{i}.ln3.b"])
            x = ad.add(x, self._maybe_dropout(self._ff(f"dec{i}.ff", h), train))
        return ad.layer_norm(x, p["dec_final.g"], p["dec_final.b"])

    def decode_code_states(self, memory: Tensor, enc_mask: np.ndarray,
                           prefix: np.ndarray, train: bool = False) -> Tensor:
        """Decoder states d_1..d_{P+1} given a code prefix of length P.

        ``prefix`` is (B, P) integer codes; position p of the decoder input
        is the step-p codebook embedding of prefix[:, p-1] (position 0 is a
        learned start embedding). Returns (B, P+1, D).
        """
        prefix = np.asarray(prefix, dtype=np.int64)
        B, P = prefix.shape
        if P >= self.config.num_steps:
            raise ValueError("code prefix longer than the configured number of steps")
        p = self.params
        parts = [ad.embedding(p["code_start"], np.zeros((B, 1), dtype=np.int64))]
        for pos in range(1, P + 1):
            cb = self.codebooks[pos - 1]
            rows = ad.embedding(Tensor(cb.conditioning_rows()), prefix[:, pos - 1])
            parts.append(ad.reshape(rows, (B, 1, self.config.hidden_size)))
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        x = ad.add(x, p["pos_dec"][: P + 1])
        x = self._maybe_dropout(x, train)
        cross_bias = _pad_bias(np.asarray(enc_mask, dtype=np.float64))
        return self._decode_stack(x, _causal_bias(P + 1), memory, cross_bias, train)

    def decode_step(self, memory: Tensor, prefix: Sequence[int], t: int) -> Tensor:
        """d_t for a single sequence; ``prefix`` must hold exactly t-1 codes."""
        prefix = tuple(int(c) for c in prefix)
        if not (1 <= t <= self.config.num_steps):
            raise ValueError(f"step {t} outside [1, {self.config.num_steps}]")
        if len(prefix) != t - 1:
            raise ValueError(f"prefix length {len(prefix)} does not match step {t}")
        L = memory.shape[0]
        mem3 = ad.reshape(memory, (1, L, self.config.hidden_size))
        states = self.decode_code_states(mem3, np.ones((1, L)),
                                         np.array(prefix, dtype=np.int64).reshape(1, -1))
        return ad.reshape(states[:, t - 1, :], (self.config.hidden_size,))

    def decode_text(self, memory: Tensor, enc_mask: np.ndarray,
                    dec_tokens: np.ndarray, dec_mask: np.ndarray,
                    train: bool = False) -> Tensor:
        """Teacher-forced decoder pass over token inputs: (B, Lt) -> (B, Lt, D)."""
        dec_tokens = np.asarray(dec_tokens, dtype=np.int64)
        B, Lt = dec_tokens.shape
        p = self.params
        x = ad.add(ad.embedding(p["tok_emb"], dec_tokens), p["pos_dec"][:Lt])
        x = self._maybe_dropout(x, train)
        self_bias = _causal_bias(Lt) + _pad_bias(np.asarray(dec_mask, dtype=np.float64))
        cross_bias = _pad_bias(np.asarray(enc_mask, dtype=np.float64))
        return self._decode_stack(x, self_bias, memory, cross_bias, train)

    def lm_log_probs(self, hidden: Tensor) -> Tensor:
        return ad.log_softmax(ad.matmul(hidden, self.params["lm_head"]), axis=-1)

    # ------------------------------------------------------------------
    # quantization surface
    # ------------------------------------------------------------------

    def code_distribution(self, d_t: Tensor, t: int, temperature: float = 1.0) -> Tensor:
        return self.codebooks[t - 1].distribution(d_t, temperature=temperature)

    def assign_code(self, d_t, t: int):
        values = d_t.data if isinstance(d_t, Tensor) else d_t
        return self.codebooks[t - 1].assign(values)

    def _check_depth(self, depth: int) -> None:
        if depth < 1 or depth > self.config.num_steps:
            raise ValueError(f"depth {depth} outside [1, {self.config.num_steps}]")
        if depth > self.trained_steps:
            raise ValueError(f"depth {depth} exceeds trained steps ({self.trained_steps})")

    def greedy_decode_batch(self, tokens: np.ndarray, mask: np.ndarray,
                            depth: int) -> tuple[np.ndarray, np.ndarray]:
        """Greedy code assignment for a padded batch.

        Returns (codes (B, depth) int, d_depth (B, D) float): the assigned
        semantic IDs and the pre-quantization state at the final step.
        """
        self._check_depth(depth)
        memory = self.encode_batch(tokens, mask)
        B = tokens.shape[0]
        codes = np.zeros((B, 0), dtype=np.int64)
        final = None
        for t in range(1, depth + 1):
            states = self.decode_code_states(memory, mask, codes)
            d_t = states.data[:, t - 1, :]
            final = d_t
            assigned = self.codebooks[t - 1].assign(d_t)
            codes = np.concatenate([codes, assigned[:, None]], axis=1)
        return codes, final

    def generate_ids(self, tokens: Sequence[int], depth: int,
                     temperature: float = 1.0) -> SemanticId:
        """Greedy semantic ID: encode once, then decode/assign step by step.

        ``temperature`` is accepted for interface symmetry with the
        distribution lookup; it cannot change an argmax.
        """
        del temperature
        ids = np.asarray(list(tokens), dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot generate an ID for an empty sequence")
        codes, _ = self.greedy_decode_batch(ids[None, :], np.ones((1, ids.size)), depth)
        return tuple(int(c) for c in codes[0])

    def final_representation(self, tokens: Sequence[int], depth: int) -> np.ndarray:
        """d_depth along the greedy chain (pre-quantization decoder state)."""
        ids = np.asarray(list(tokens), dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot represent an empty sequence")
        _, final = self.greedy_decode_batch(ids[None, :], np.ones((1, ids.size)), depth)
        return final[0]

    def mean_pooled_encoding(self, tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Mask-aware mean of encoder states; the dense baseline embedding."""
        memory = self.encode_batch(tokens, mask).data
        m = np.asarray(mask, dtype=np.float64)
        return (memory * m[:, :, None]).sum(axis=1) / np.maximum(m.sum(axis=1), 1.0)[:, None]


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"SIDXCKPT"
FORMAT_VERSION = 1


@dataclass
class CheckpointBundle:
    model: TransformerModel
    optimizer_state: dict | None
    extra: dict


def save_checkpoint(path: str | Path, model: TransformerModel,
                    optimizer=None, extra: dict | None = None) -> None:
    """Write a single self-describing binary container.

    Layout: magic, u64 header length, UTF-8 JSON header (config, vocab hash,
    array manifest), raw little-endian float64 array payloads in manifest
    order. Deterministic for identical inputs.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    for name in sorted(model.params):
        arrays.append((f"param.{name}", model.params[name].data))
    for cb in model.codebooks:
        arrays.append((f"codebook.{cb.step}.embeddings", cb.embeddings.data))
        arrays.append((f"codebook.{cb.step}.ema_counts", cb.ema_counts))
        arrays.append((f"codebook.{cb.step}.ema_sums", cb.ema_sums))
    opt_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_meta = {k: state[k] for k in
                    ("mode", "lr", "beta1", "beta2", "eps", "step_count", "skipped_updates")}
        for name in sorted(state["m"]):
            arrays.append((f"opt.m.{name}", state["m"][name]))
            arrays.append((f"opt.v.{name}", state["v"][name]))

    manifest = []
    offset = 0
    for name, arr in arrays:
        nbytes = arr.size * 8
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "vocab_hash": model.vocab_hash,
        "trained_steps": model.trained_steps,
        "codebooks": [{"step": cb.step, "decay": cb.decay, "laplace_eps": cb.laplace_eps}
                      for cb in model.codebooks],
        "optimizer": opt_meta,
        "extra": extra or {},
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    header_len = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {header['format_version']}")
    payload = raw[16 + header_len:]

    def read_array(entry) -> np.ndarray:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        return arr.reshape(shape).astype(np.float64)

    by_name = {entry["name"]: entry for entry in header["arrays"]}
    config = ModelConfig(**header["config"])
    model = TransformerModel(config, vocab_hash=header["vocab_hash"])
    model.trained_steps = int(header["trained_steps"])
    for name, tensor in model.params.items():
        tensor.data = read_array(by_name[f"param.{name}"])
    for cb, meta in zip(model.codebooks, header["codebooks"]):
        cb.decay = float(meta["decay"])
        cb.laplace_eps = float(meta["laplace_eps"])
        cb.embeddings.data = read_array(by_name[f"codebook.{cb.step}.embeddings"])
        cb.ema_counts = read_array(by_name[f"codebook.{cb.step}.ema_counts"])
        cb.ema_sums = read_array(by_name[f"codebook.{cb.step}.ema_sums"])

    opt_state = None
    if header["optimizer"] is not None:
        opt_state = dict(header["optimizer"])
        opt_state["m"] = {}
        opt_state["v"] = {}
        for name in by_name:
            if name.startswith("opt.m."):
                opt_state["m"][name[len("opt.m."):]] = read_array(by_name[name])
            elif name.startswith("opt.v."):
                opt_state["v"][name[len("opt.v."):]] = read_array(by_name[name])
    return CheckpointBundle(model=model, optimizer_state=opt_state, extra=header["extra"])


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
