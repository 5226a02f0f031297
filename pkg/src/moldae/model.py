"""Pre-layer-norm encoder-decoder transformer with a self-contained trainer.

torch supplies tensors and reverse-mode differentiation; the architecture,
optimizer step (global-norm clipping, decoupled weight decay, bias-corrected
Adam), learning-rate schedule, checkpoint container, and training loop are
all defined here so that every contract can be tested directly.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corruptor import NoiseConfig, corrupt, per_sample_rng
from .tokenizer import PAD_ID, Vocab, encode

_CKPT_MAGIC = b"MDCKPT01"


class ModelError(RuntimeError):
    pass


class LengthOverflow(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class AllPadBatch(ModelError):
    pass


class NonFiniteGradient(ModelError):
    pass


class FingerprintMismatch(ModelError):
    pass


class TrainingDiverged(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers_enc: int = 4
    layers_dec: int = 4
    d_model: int = 256
    heads: int = 4
    d_ffn: int = 1024
    dropout: float = 0.1
    attention_dropout: float = 0.2
    activation_dropout: float = 0.1
    max_positions: int = 128
    share_all_embeddings: bool = True
    pre_layernorm: bool = True
    layernorm_embedding: bool = True
    positions: str = "learned"  # or "sinusoidal"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ShapeMismatch(
                f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.positions not in ("learned", "sinusoidal"):
            raise ValueError(f"unknown positions mode {self.positions!r}")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def tiny_config(vocab_size, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **overrides)


def micro_config(vocab_size, **overrides) -> ModelConfig:
    base = dict(layers_enc=2, layers_dec=2, d_model=16, heads=2, d_ffn=32,
                dropout=0.0, attention_dropout=0.0, activation_dropout=0.0)
    base.update(overrides)
    return ModelConfig(vocab_size=vocab_size, **base)


def _sinusoidal_table(max_positions, d_model):
    position = torch.arange(max_positions, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32)
                    * (-math.log(10000.0) / d_model))
    table = torch.zeros(max_positions, d_model)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: (d_model + 1) // 2])
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, heads, dropout):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, key_padding_mask=None, causal=False):
        bsz, q_len, d_model = query.shape
        k_len = key.shape[1]
        q = self.q_proj(query).view(bsz, q_len, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(bsz, k_len, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(bsz, k_len, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if causal:
            future = torch.triu(torch.ones(q_len, k_len, dtype=torch.bool,
                                           device=scores.device), diagonal=1)
            scores = scores.masked_fill(future, float("-inf"))
        if key_padding_mask is not None:
            scores = scores.masked_fill(
                key_padding_mask[:, None, None, :], float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(bsz, q_len, d_model)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ffn, activation_dropout):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)
        self.dropout = nn.Dropout(activation_dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.attention_dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.activation_dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, h, key_padding_mask=pad_mask))
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.attention_dropout)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.attention_dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.activation_dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, src_pad_mask):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, h, causal=True))
        h = self.norm2(x)
        x = x + self.dropout(self.cross_attn(h, memory, memory,
                                             key_padding_mask=src_pad_mask))
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x


class Seq2SeqTransformer(nn.Module):
    """The model state: named parameter tensors plus its config."""

    def __init__(self, cfg: ModelConfig, init_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(init_seed)
        self.embed_tokens = nn.Embedding(cfg.vocab_size, cfg.d_model)
        if cfg.share_all_embeddings:
            self.decoder_embed_tokens = self.embed_tokens
        else:
            self.decoder_embed_tokens = nn.Embedding(cfg.vocab_size, cfg.d_model)
            self.output_proj = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        if cfg.positions == "learned":
            self.embed_positions_enc = nn.Embedding(cfg.max_positions, cfg.d_model)
            self.embed_positions_dec = nn.Embedding(cfg.max_positions, cfg.d_model)
        else:
            self.register_buffer(
                "sin_table", _sinusoidal_table(cfg.max_positions, cfg.d_model))
        if cfg.layernorm_embedding:
            self.layernorm_embedding_enc = nn.LayerNorm(cfg.d_model)
            self.layernorm_embedding_dec = nn.LayerNorm(cfg.d_model)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(cfg) for _ in range(cfg.layers_enc))
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(cfg) for _ in range(cfg.layers_dec))
        self.encoder_norm = nn.LayerNorm(cfg.d_model)
        self.decoder_norm = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)
        self._init_weights(gen)

    def _init_weights(self, gen):
        for p in self.parameters():
            if p.dim() > 1:
                with torch.no_grad():
                    p.normal_(0.0, 0.02, generator=gen)
            else:
                with torch.no_grad():
                    p.zero_()
        for module in self.modules():
            if isinstance(module, nn.LayerNorm):
                with torch.no_grad():
                    module.weight.fill_(1.0)

    def num_parameters(self):
        seen, total = set(), 0
        for p in self.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.numel()
        return total

    def fingerprint(self):
        return self.cfg.fingerprint()

    def _check_length(self, name, length):
        if length > self.cfg.max_positions:
            raise LengthOverflow(
                f"{name} length {length} exceeds max_positions "
                f"{self.cfg.max_positions}")

    def embed_src(self, src):
        emb = self.embed_tokens(src)
        return emb

    def encode_from_embeddings(self, src_emb, src_pad_mask):
        self._check_length("source", src_emb.shape[1])
        pos = (self.embed_positions_enc.weight[:src_emb.shape[1]]
               if self.cfg.positions == "learned"
               else self.sin_table[:src_emb.shape[1]].to(src_emb.dtype))
        x = src_emb + pos.unsqueeze(0)
        if self.cfg.layernorm_embedding:
            x = self.layernorm_embedding_enc(x)
        x = self.dropout(x)
        for layer in self.encoder_layers:
            x = layer(x, src_pad_mask)
        return self.encoder_norm(x)

    def decode(self, tgt_in, memory, src_pad_mask):
        self._check_length("target", tgt_in.shape[1])
        emb = self.decoder_embed_tokens(tgt_in)
        pos = (self.embed_positions_dec.weight[:tgt_in.shape[1]]
               if self.cfg.positions == "learned"
               else self.sin_table[:tgt_in.shape[1]].to(emb.dtype))
        x = emb + pos.unsqueeze(0)
        if self.cfg.layernorm_embedding:
            x = self.layernorm_embedding_dec(x)
        x = self.dropout(x)
        for layer in self.decoder_layers:
            x = layer(x, memory, src_pad_mask)
        return self.decoder_norm(x)

    def output_logits(self, dec_hidden):
        if self.cfg.share_all_embeddings:
            return F.linear(dec_hidden, self.embed_tokens.weight)
        return self.output_proj(dec_hidden)

    def forward(self, src, tgt_in):
        """Return (logits, encoder hidden states, decoder hidden states)."""
        if src.dim() != 2 or tgt_in.dim() != 2 or src.shape[0] != tgt_in.shape[0]:
            raise ShapeMismatch(
                f"expected matching 2-d batches, got {tuple(src.shape)} "
                f"and {tuple(tgt_in.shape)}")
        src_pad_mask = src.eq(PAD_ID)
        memory = self.encode_from_embeddings(self.embed_src(src), src_pad_mask)
        dec_hidden = self.decode(tgt_in, memory, src_pad_mask)
        return self.output_logits(dec_hidden), memory, dec_hidden


def reference_dtype_of(model):
    return next(model.parameters()).dtype


def collate(sequences, pad_to=None, dtype=torch.long):
    """Pad variable-length id lists into a (batch, len) LongTensor."""
    width = pad_to or max(len(s) for s in sequences)
    out = torch.full((len(sequences), width), PAD_ID, dtype=dtype)
    for i, seq in enumerate(sequences):
        out[i, :len(seq)] = torch.as_tensor(seq, dtype=dtype)
    return out


def loss(logits, targets):
    """Mean token-level cross entropy over non-pad target positions."""
    if logits.shape[:2] != targets.shape:
        raise ShapeMismatch(
            f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if targets.eq(PAD_ID).all():
        raise AllPadBatch("every target position is padding")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                           targets.reshape(-1), ignore_index=PAD_ID)


def gradients(model, src, tgt_in, targets):
    """Exact gradients of loss(forward(...)) for every named parameter."""
    model.zero_grad(set_to_none=True)
    logits, _, _ = model(src, tgt_in)
    value = loss(logits, targets)
    value.backward()
    out = {}
    for name, p in model.named_parameters():
        out[name] = (p.grad.detach().clone() if p.grad is not None
                     else torch.zeros_like(p))
    model.zero_grad(set_to_none=True)
    return value.detach(), out


# ---------------------------------------------------------------------------
# Optimizer, schedule, checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    peak_lr: float = 1e-4
    warmup: float = 1500  # steps if >= 1, else fraction of total_updates
    total_updates: int = 2000
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.warmup_steps() >= self.total_updates:
            raise ValueError("warmup must be shorter than total_updates")

    def warmup_steps(self):
        if 0 < self.warmup < 1:
            return int(round(self.warmup * self.total_updates))
        return int(self.warmup)


def lr_at(step, tcfg: TrainConfig):
    """Linear ramp to peak over warmup, then linear decay to 0 at the end."""
    warmup = tcfg.warmup_steps()
    total = tcfg.total_updates
    if step <= warmup:
        if warmup == 0:
            return tcfg.peak_lr
        return tcfg.peak_lr * step / warmup
    return tcfg.peak_lr * (total - step) / (total - warmup)


@dataclass
class Checkpoint:
    model: Seq2SeqTransformer
    adam_m: dict[str, torch.Tensor]
    adam_v: dict[str, torch.Tensor]
    step: int = 0
    schedule: dict = field(default_factory=dict)
    rng_state: bytes | None = None

    @property
    def config(self):
        return self.model.cfg

    def fingerprint(self):
        return self.model.fingerprint()


def init_checkpoint(cfg: ModelConfig, init_seed=0) -> Checkpoint:
    model = Seq2SeqTransformer(cfg, init_seed=init_seed)
    zeros_like = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    return Checkpoint(model=model, adam_m=zeros_like,
                      adam_v={n: t.clone() for n, t in zeros_like.items()})


def adam_step(ckpt: Checkpoint, grads, tcfg: TrainConfig, lr=None) -> Checkpoint:
    """One optimizer update in place: clip, decoupled decay, Adam; step += 1."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name!r}")
    sq_sum = sum(float(g.pow(2).sum()) for g in grads.values())
    norm = math.sqrt(sq_sum)
    scale = tcfg.clip_norm / norm if norm > tcfg.clip_norm else 1.0
    t = ckpt.step + 1
    if lr is None:
        lr = lr_at(min(t, tcfg.total_updates), tcfg)
    beta1, beta2 = tcfg.adam_betas
    bias1 = 1 - beta1 ** t
    bias2 = 1 - beta2 ** t
    with torch.no_grad():
        for name, p in ckpt.model.named_parameters():
            g = grads[name] * scale
            m = ckpt.adam_m[name]
            v = ckpt.adam_v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            if tcfg.weight_decay:
                p.add_(p, alpha=-lr * tcfg.weight_decay)
            denom = (v / bias2).sqrt_().add_(tcfg.adam_eps)
            p.addcdiv_(m / bias1, denom, value=-lr)
    ckpt.step = t
    return ckpt


def swa_average(models) -> Seq2SeqTransformer:
    """Elementwise mean of every parameter tensor across model states."""
    models = list(models)
    if not models:
        raise ValueError("need at least one model state")
    first = models[0]
    for other in models[1:]:
        if other.fingerprint() != first.fingerprint():
            raise FingerprintMismatch(
                f"{other.fingerprint()} != {first.fingerprint()}")
    out = Seq2SeqTransformer(first.cfg)
    out = out.to(reference_dtype_of(first))
    with torch.no_grad():
        for name, p in out.named_parameters():
            stacked = torch.stack([dict(m.named_parameters())[name] for m in models])
            p.copy_(stacked.mean(dim=0))
    return out


def representations(model, ids):
    """Per-token decoder last-layer vectors and their mean pool for one sequence.

    ``ids`` must include bos/eos; vectors cover the non-special positions of
    the (shifted) decoder input, pooled over non-pad, non-special tokens.
    """
    model.eval()
    ids = list(ids.ids) if hasattr(ids, "ids") else list(ids)
    src = collate([ids])
    tgt_in = collate([ids[:-1]])
    with torch.no_grad():
        _, _, dec_hidden = model(src, tgt_in)
    keep = [i for i, t in enumerate(ids[:-1]) if not Vocab.is_special(t)]
    per_token = dec_hidden[0, keep]
    return per_token, per_token.mean(dim=0)


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path):
    """Versioned container: JSON header + raw little-endian tensor payload."""
    manifest = []
    payload = bytearray()
    groups = [("param", dict(ckpt.model.named_parameters())),
              ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)]
    for prefix, tensors in groups:
        for name in sorted(tensors):
            arr = tensors[name].detach().cpu().numpy()
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            raw = np.ascontiguousarray(arr).tobytes()
            manifest.append({"name": f"{prefix}/{name}",
                             "shape": list(arr.shape),
                             "dtype": str(arr.dtype),
                             "offset": len(payload),
                             "nbytes": len(raw)})
            payload.extend(raw)
    header = {
        "format_version": 1,
        "config": asdict(ckpt.config),
        "fingerprint": ckpt.fingerprint(),
        "step": ckpt.step,
        "schedule": ckpt.schedule,
        "rng_state_hex": ckpt.rng_state.hex() if ckpt.rng_state else None,
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ModelError(f"not a checkpoint file: {path}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len))
        payload = fh.read()
    cfg = ModelConfig(**header["config"])
    if cfg.fingerprint() != header["fingerprint"]:
        raise FingerprintMismatch("stored fingerprint does not match config")
    if expected_config is not None and \
            expected_config.fingerprint() != header["fingerprint"]:
        raise FingerprintMismatch(
            f"checkpoint fingerprint {header['fingerprint']} does not match "
            f"expected {expected_config.fingerprint()}")
    tensors = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(
            payload, dtype=np.dtype(entry["dtype"]),
            count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
            offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    model = Seq2SeqTransformer(cfg)
    dtype = tensors[f"param/{next(iter(dict(model.named_parameters())))}"].dtype
    model = model.to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(tensors[f"param/{name}"])
    adam_m = {n: tensors[f"adam_m/{n}"] for n, _ in model.named_parameters()}
    adam_v = {n: tensors[f"adam_v/{n}"] for n, _ in model.named_parameters()}
    rng_hex = header.get("rng_state_hex")
    return Checkpoint(model=model, adam_m=adam_m, adam_v=adam_v,
                      step=header["step"], schedule=dict(header["schedule"]),
                      rng_state=bytes.fromhex(rng_hex) if rng_hex else None)


# ---------------------------------------------------------------------------
# Pretraining loop
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    skipped_too_long: int


def _epoch_order(seed, epoch, n):
    import xxhash
    digest = xxhash.xxh64(f"order:{seed}:{epoch}".encode()).intdigest()
    return np.random.default_rng(digest).permutation(n)


def _mask_accuracy(logits, labels, batch_reports):
    """Fraction of corrupted target positions recovered by argmax."""
    hits = total = 0
    preds = logits.argmax(dim=-1)
    for row, report in enumerate(batch_reports):
        for start, length, _ in report:
            for pos in range(start, start + length):
                label_idx = pos - 1  # labels are the target shifted left
                if 0 <= label_idx < labels.shape[1] and \
                        labels[row, label_idx] != PAD_ID:
                    total += 1
                    hits += int(preds[row, label_idx] == labels[row, label_idx])
    return hits / total if total else 0.0


def majority_token_baseline(corpus, vocab):
    """Frequency of the most common piece over the encoded corpus."""
    from collections import Counter
    counts = Counter()
    for text in corpus:
        counts.update(encode(vocab, text).ids)
    total = sum(counts.values())
    return max(counts.values()) / total if total else 0.0


def pretrain(corpus, vocab, ncfg: NoiseConfig, mcfg: ModelConfig,
             tcfg: TrainConfig, checkpoint_every=0, out_dir=None,
             resume_from: Checkpoint | None = None,
             metrics_path=None, stop_after_steps=None) -> PretrainResult:
    """Stream, corrupt, and train for ``tcfg.total_updates`` steps.

    Deterministic for a fixed seed: epoch order, per-sample corruption
    streams, and dropout are all seeded, and resuming from a checkpoint
    reproduces the uninterrupted run bit-exactly.
    """
    sequences = []
    skipped = 0
    for text in corpus:
        ids = encode(vocab, text, add_bos=True, add_eos=True).ids
        if len(ids) > mcfg.max_positions:
            skipped += 1
            continue
        sequences.append(ids)
    if not sequences:
        raise ModelError("no usable sequences after length filtering")

    if resume_from is not None:
        ckpt = resume_from
        if ckpt.rng_state is not None:
            torch.set_rng_state(torch.frombuffer(
                bytearray(ckpt.rng_state), dtype=torch.uint8).clone())
    else:
        torch.manual_seed(tcfg.seed)
        ckpt = init_checkpoint(mcfg, init_seed=tcfg.seed)
    model = ckpt.model
    model.train()

    n = len(sequences)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    metrics: list[dict] = []
    metrics_fh = open(metrics_path, "a") if metrics_path else None

    last_step = tcfg.total_updates
    if stop_after_steps is not None:  # early stop; the schedule is unchanged
        last_step = min(last_step, stop_after_steps)
    try:
        step = ckpt.step
        while step < last_step:
            epoch = step // steps_per_epoch
            batch_idx = step % steps_per_epoch
            order = _epoch_order(tcfg.seed, epoch, n)
            rows = order[batch_idx * tcfg.batch_size:
                         (batch_idx + 1) * tcfg.batch_size]
            batch_src, batch_tgt_in, batch_labels, batch_reports = [], [], [], []
            for row in rows:
                target = sequences[row]
                rng = per_sample_rng(tcfg.seed, (epoch + 1) * n + int(row))
                pair = corrupt(target, ncfg, rng, vocab)
                batch_src.append(pair.source)
                batch_tgt_in.append(target[:-1])
                batch_labels.append(target[1:])
                batch_reports.append(pair.mask_report)
            src = collate(batch_src)
            tgt_in = collate(batch_tgt_in)
            labels = collate(batch_labels)

            logits, _, _ = model(src, tgt_in)
            value = loss(logits, labels)
            if not torch.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value.item()} at step {step + 1}")
            model.zero_grad(set_to_none=True)
            value.backward()
            grads = {name: p.grad if p.grad is not None else torch.zeros_like(p)
                     for name, p in model.named_parameters()}
            adam_step(ckpt, grads, tcfg)
            step = ckpt.step

            with torch.no_grad():
                acc = _mask_accuracy(logits, labels, batch_reports)
            entry = {"step": step, "loss": float(value.item()),
                     "lr": lr_at(step, tcfg), "mask_acc": acc}
            metrics.append(entry)
            if metrics_fh:
                metrics_fh.write(json.dumps(entry) + "\n")
                metrics_fh.flush()

            if checkpoint_every and out_dir and step % checkpoint_every == 0:
                ckpt.rng_state = bytes(torch.get_rng_state().numpy().tobytes())
                ckpt.schedule = {"total_updates": tcfg.total_updates,
                                 "warmup": tcfg.warmup,
                                 "epoch": epoch}
                save_checkpoint(ckpt, f"{out_dir}/checkpoint_step{step:08d}.bin")
    finally:
        if metrics_fh:
            metrics_fh.close()

    ckpt.rng_state = bytes(torch.get_rng_state().numpy().tobytes())
    ckpt.schedule = {"total_updates": tcfg.total_updates, "warmup": tcfg.warmup}
    if out_dir:
        save_checkpoint(ckpt, f"{out_dir}/checkpoint_final.bin")
    return PretrainResult(checkpoint=ckpt, metrics=metrics,
                          skipped_too_long=skipped)
