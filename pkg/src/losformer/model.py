"""Transformer encoder over tokenized admissions, written against the
numerics layer with hand-derived backward passes.

Architecture: summed embeddings (trained token table, frozen sinusoidal
position table, trained age and sex tables, the last two added uniformly
at every position), a post-norm encoder stack (self-attention with
additive key padding mask and attention-probability dropout, then a
two-layer GELU feed-forward, each sublayer residual + layer norm), one
dropout after the final layer, and a linear head reading the [CLS] row.

Position ids index the sinusoid table directly, so co-timestamped events
receive identical position rows and the CLS logits are invariant to
permutations within such runs. Truncated sequences keep original position
ids, which can exceed the nominal maximum length; the table grows on
demand.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics
from .numerics import Parameter
from .tokenizer import N_AGE_BUCKETS

TASKS = ("binary", "category", "real")
N_SEXES = 3
INIT_SCALE = 0.02
ATTN_MASK_VALUE = -1e9
CHECKPOINT_FORMAT = "losformer-checkpoint"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    task: str = "binary"
    n_layers: int = 6
    hidden_dim: int = 288
    intermediate_dim: int = 288
    n_heads: int = 8
    max_len: int = 256
    dropout_p: float = 0.10
    attention_dropout_p: float = 0.10
    weight_decay: float = 0.003
    lr: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        for name in ("dropout_p", "attention_dropout_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {p}")
        if self.vocab_size < 5:
            raise ValueError(f"vocab_size {self.vocab_size} is smaller than the reserved set")
        for name in ("n_layers", "n_heads", "max_len", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_outputs(self) -> int:
        return 3 if self.task == "category" else 1


def small_config(vocab_size: int, task: str, **overrides) -> ModelConfig:
    """Desk-scale profile: trains in minutes on a CPU, same architecture."""
    base = dict(
        vocab_size=vocab_size, task=task, n_layers=2, hidden_dim=64,
        intermediate_dim=64, n_heads=4, lr=3e-4, batch_size=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


class SinusoidTable:
    """Frozen sinusoidal position rows, grown on demand and never trained.

    Row p, column 2i holds sin(p / 10000^(2i/dim)); column 2i+1 the cosine
    at the same frequency.
    """

    def __init__(self, dim: int):
        if dim % 2 != 0:
            raise ValueError(f"position table needs an even dim, got {dim}")
        self.dim = dim
        self._table = np.zeros((0, dim))

    def _ensure(self, n_rows: int) -> None:
        if n_rows <= self._table.shape[0]:
            return
        positions = np.arange(n_rows)[:, None]
        freqs = np.exp(-np.log(10000.0) * np.arange(0, self.dim, 2) / self.dim)
        table = np.zeros((n_rows, self.dim))
        table[:, 0::2] = np.sin(positions * freqs)
        table[:, 1::2] = np.cos(positions * freqs)
        self._table = table

    def rows(self, n_rows: int) -> np.ndarray:
        self._ensure(n_rows)
        return self._table[:n_rows]

    def lookup(self, position_ids: np.ndarray) -> np.ndarray:
        self._ensure(int(position_ids.max()) + 1)
        return self._table[position_ids]


@dataclass
class Batch:
    admission_ids: tuple
    token_ids: np.ndarray       # (B, L) int64, padded with 0
    position_ids: np.ndarray    # (B, L) int64
    age_buckets: np.ndarray     # (B,) int64
    sex_ids: np.ndarray         # (B,) int64
    attn_bias: np.ndarray       # (B, 1, 1, L); 0 on real keys, -1e9 on padding
    labels_binary: np.ndarray   # (B,) float64
    labels_category: np.ndarray  # (B,) int64
    labels_real: np.ndarray     # (B,) float64

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def collate(sequences) -> Batch:
    """Pad a list of TokenizedSequence to a common length and stack."""
    if not sequences:
        raise ValueError("cannot collate an empty list of sequences")
    n = len(sequences)
    max_len = max(len(s) for s in sequences)
    token_ids = np.zeros((n, max_len), dtype=np.int64)
    position_ids = np.zeros((n, max_len), dtype=np.int64)
    bias = np.full((n, 1, 1, max_len), ATTN_MASK_VALUE)
    for i, s in enumerate(sequences):
        k = len(s)
        token_ids[i, :k] = s.token_ids
        position_ids[i, :k] = s.position_ids
        bias[i, 0, 0, :k] = 0.0
    return Batch(
        admission_ids=tuple(s.admission_id for s in sequences),
        token_ids=token_ids,
        position_ids=position_ids,
        age_buckets=np.array([s.age_bucket for s in sequences], dtype=np.int64),
        sex_ids=np.array([s.sex_id for s in sequences], dtype=np.int64),
        attn_bias=bias,
        labels_binary=np.array([s.label_binary for s in sequences], dtype=np.float64),
        labels_category=np.array([s.label_category for s in sequences], dtype=np.int64),
        labels_real=np.array([s.label_real for s in sequences], dtype=np.float64),
    )


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def batch_loss(logits: np.ndarray, batch: Batch, task: str):
    """Mean loss over the batch and its gradient wrt the logits."""
    n = len(batch)
    if task == "binary":
        z = logits[:, 0]
        y = batch.labels_binary
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        dlogits = ((stable_sigmoid(z) - y) / n)[:, None]
        return float(per.mean()), dlogits
    if task == "category":
        p = numerics.softmax(logits)
        y = batch.labels_category
        per = -np.log(np.maximum(p[np.arange(n), y], 1e-300))
        dlogits = p.copy()
        dlogits[np.arange(n), y] -= 1.0
        return float(per.mean()), dlogits / n
    z = logits[:, 0]
    y = batch.labels_real
    per = (z - y) ** 2
    dlogits = (2.0 * (z - y) / n)[:, None]
    return float(per.mean()), dlogits


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return np.ascontiguousarray(
        x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, hd = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, l, h * hd)


class SequenceTransformer:
    """Encoder with CLS-pooled linear head; see module docstring."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.positions = SinusoidTable(cfg.hidden_dim)
        rng = np.random.default_rng(cfg.seed)
        d, inter = cfg.hidden_dim, cfg.intermediate_dim

        def weight(name, rows, cols):
            return Parameter(name, rng.normal(0.0, INIT_SCALE, size=(rows, cols)))

        def bias(name, n):
            return Parameter(name, np.zeros(n), decay=False)

        self.tok_emb = weight("tok_emb", cfg.vocab_size, d)
        self.age_emb = weight("age_emb", N_AGE_BUCKETS, d)
        self.sex_emb = weight("sex_emb", N_SEXES, d)
        self.layers = []
        for i in range(cfg.n_layers):
            self.layers.append({
                "wq": weight(f"layer{i}.wq", d, d), "bq": bias(f"layer{i}.bq", d),
                "wk": weight(f"layer{i}.wk", d, d), "bk": bias(f"layer{i}.bk", d),
                "wv": weight(f"layer{i}.wv", d, d), "bv": bias(f"layer{i}.bv", d),
                "wo": weight(f"layer{i}.wo", d, d), "bo": bias(f"layer{i}.bo", d),
                "ln1_g": Parameter(f"layer{i}.ln1_g", np.ones(d), decay=False),
                "ln1_b": bias(f"layer{i}.ln1_b", d),
                "w1": weight(f"layer{i}.w1", d, inter), "b1": bias(f"layer{i}.b1", inter),
                "w2": weight(f"layer{i}.w2", inter, d), "b2": bias(f"layer{i}.b2", d),
                "ln2_g": Parameter(f"layer{i}.ln2_g", np.ones(d), decay=False),
                "ln2_b": bias(f"layer{i}.ln2_b", d),
            })
        self.head_w = weight("head_w", d, cfg.n_outputs)
        self.head_b = bias("head_b", cfg.n_outputs)

    def parameters(self) -> list:
        params = [self.tok_emb, self.age_emb, self.sex_emb]
        for layer in self.layers:
            params.extend(layer.values())
        params.extend([self.head_w, self.head_b])
        return params

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def snapshot(self) -> dict:
        return {p.name: p.value.copy() for p in self.parameters()}

    def restore(self, snapshot: dict) -> None:
        for p in self.parameters():
            p.value[...] = snapshot[p.name]

    # --- forward ---------------------------------------------------------

    def embed_batch(self, batch: Batch) -> np.ndarray:
        ids = batch.token_ids
        if ids.max() >= self.cfg.vocab_size or ids.min() < 0:
            raise ValueError(
                f"token id outside embedding table of size {self.cfg.vocab_size}")
        x = self.tok_emb.value[ids]
        x = x + self.positions.lookup(batch.position_ids)
        x = x + self.age_emb.value[batch.age_buckets][:, None, :]
        x = x + self.sex_emb.value[batch.sex_ids][:, None, :]
        return x

    def forward_batch(self, batch: Batch, train: bool, rng: np.random.Generator | None = None,
                      need_cache: bool = False):
        """Run the encoder; returns (logits, cache). The cache holds every
        intermediate the hand-written backward pass needs and is None unless
        requested."""
        cfg = self.cfg
        if train and (cfg.dropout_p > 0 or cfg.attention_dropout_p > 0) and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        scale = 1.0 / np.sqrt(cfg.hidden_dim // cfg.n_heads)
        x = self.embed_batch(batch)
        cache = {"x0": x, "layers": []} if need_cache else None

        for layer in self.layers:
            attn_in = x
            q = _split_heads(attn_in @ layer["wq"].value + layer["bq"].value, cfg.n_heads)
            k = _split_heads(attn_in @ layer["wk"].value + layer["bk"].value, cfg.n_heads)
            v = _split_heads(attn_in @ layer["wv"].value + layer["bv"].value, cfg.n_heads)
            scores = q @ k.transpose(0, 1, 3, 2) * scale + batch.attn_bias
            probs = numerics.softmax(scores)
            probs_kept, attn_mask = numerics.dropout(
                probs, cfg.attention_dropout_p, rng, train)
            ctx = _merge_heads(probs_kept @ v)
            attn_out = ctx @ layer["wo"].value + layer["bo"].value

            res1 = attn_in + attn_out
            ln1_out, mean1, rstd1 = numerics.layer_norm_stats(
                res1, layer["ln1_g"].value, layer["ln1_b"].value)

            h_pre = ln1_out @ layer["w1"].value + layer["b1"].value
            h_act = numerics.gelu(h_pre)
            ff_out = h_act @ layer["w2"].value + layer["b2"].value

            res2 = ln1_out + ff_out
            ln2_out, mean2, rstd2 = numerics.layer_norm_stats(
                res2, layer["ln2_g"].value, layer["ln2_b"].value)

            if need_cache:
                cache["layers"].append({
                    "attn_in": attn_in, "q": q, "k": k, "v": v,
                    "probs": probs, "attn_mask": attn_mask, "probs_kept": probs_kept,
                    "ctx": ctx, "res1": res1, "mean1": mean1, "rstd1": rstd1,
                    "ln1_out": ln1_out, "h_pre": h_pre, "h_act": h_act,
                    "res2": res2, "mean2": mean2, "rstd2": rstd2,
                })
            x = ln2_out

        x, final_mask = numerics.dropout(x, cfg.dropout_p, rng, train)
        cls = x[:, 0, :]
        logits = cls @ self.head_w.value + self.head_b.value
        if need_cache:
            cache["final_mask"] = final_mask
            cache["cls"] = cls
        return logits, cache

    # --- backward --------------------------------------------------------

    def backward_batch(self, batch: Batch, cache: dict, dlogits: np.ndarray) -> None:
        """Accumulate gradients of the scalar loss into every trainable
        parameter; the frozen position table receives none by construction."""
        cfg = self.cfg
        scale = 1.0 / np.sqrt(cfg.hidden_dim // cfg.n_heads)
        b, l = batch.token_ids.shape
        d = cfg.hidden_dim

        self.head_w.grad += cache["cls"].T @ dlogits
        self.head_b.grad += dlogits.sum(axis=0)
        dx = np.zeros((b, l, d))
        dx[:, 0, :] = dlogits @ self.head_w.value.T
        if cache["final_mask"] is not None:
            dx = dx * cache["final_mask"]

        for layer, lc in zip(reversed(self.layers), reversed(cache["layers"])):
            # layer norm after the feed-forward
            dres2, dg2, db2 = numerics.layer_norm_backward(
                lc["res2"], layer["ln2_g"].value, lc["mean2"], lc["rstd2"], dx)
            layer["ln2_g"].grad += dg2
            layer["ln2_b"].grad += db2

            # feed-forward
            dff = dres2
            h_act2d = lc["h_act"].reshape(-1, cfg.intermediate_dim)
            dff2d = dff.reshape(-1, d)
            layer["w2"].grad += h_act2d.T @ dff2d
            layer["b2"].grad += dff2d.sum(axis=0)
            dh_act = dff @ layer["w2"].value.T
            dh_pre = numerics.gelu_backward(lc["h_pre"], dh_act)
            ln1_2d = lc["ln1_out"].reshape(-1, d)
            dh_pre2d = dh_pre.reshape(-1, cfg.intermediate_dim)
            layer["w1"].grad += ln1_2d.T @ dh_pre2d
            layer["b1"].grad += dh_pre2d.sum(axis=0)
            dln1_out = dres2 + dh_pre @ layer["w1"].value.T

            # layer norm after attention
            dres1, dg1, db1 = numerics.layer_norm_backward(
                lc["res1"], layer["ln1_g"].value, lc["mean1"], lc["rstd1"], dln1_out)
            layer["ln1_g"].grad += dg1
            layer["ln1_b"].grad += db1

            # attention output projection
            dattn_out = dres1
            ctx2d = lc["ctx"].reshape(-1, d)
            dattn2d = dattn_out.reshape(-1, d)
            layer["wo"].grad += ctx2d.T @ dattn2d
            layer["bo"].grad += dattn2d.sum(axis=0)
            dctx = _split_heads(dattn_out @ layer["wo"].value.T, cfg.n_heads)

            # scaled dot-product attention
            dprobs_kept = dctx @ lc["v"].transpose(0, 1, 3, 2)
            dv = lc["probs_kept"].transpose(0, 1, 3, 2) @ dctx
            dprobs = dprobs_kept if lc["attn_mask"] is None else dprobs_kept * lc["attn_mask"]
            dscores = numerics.softmax_backward(lc["probs"], dprobs) * scale
            dq = dscores @ lc["k"]
            dk = dscores.transpose(0, 1, 3, 2) @ lc["q"]

            # input projections
            attn_in2d = lc["attn_in"].reshape(-1, d)
            dattn_in = dres1
            for w_name, b_name, dhead in (("wq", "bq", dq), ("wk", "bk", dk), ("wv", "bv", dv)):
                dmerged = _merge_heads(dhead)
                dmerged2d = dmerged.reshape(-1, d)
                self_layer_w = layer[w_name]
                self_layer_w.grad += attn_in2d.T @ dmerged2d
                layer[b_name].grad += dmerged2d.sum(axis=0)
                dattn_in = dattn_in + dmerged @ self_layer_w.value.T
            dx = dattn_in

        # embedding tables; the position table is frozen and takes no gradient
        np.add.at(self.tok_emb.grad, batch.token_ids.reshape(-1), dx.reshape(-1, d))
        np.add.at(self.age_emb.grad, batch.age_buckets, dx.sum(axis=1))
        np.add.at(self.sex_emb.grad, batch.sex_ids, dx.sum(axis=1))

    def train_step_loss(self, batch: Batch, rng: np.random.Generator | None):
        """Forward + backward for one mini-batch; gradients are accumulated
        (call zero_grads first). Returns the mean batch loss."""
        logits, cache = self.forward_batch(batch, train=True, rng=rng, need_cache=True)
        loss, dlogits = batch_loss(logits, batch, self.cfg.task)
        self.backward_batch(batch, cache, dlogits)
        return loss

    # --- inference -------------------------------------------------------

    def eval_loss(self, sequences) -> float:
        """Mean per-sample loss over a dataset in eval mode."""
        total, count = 0.0, 0
        for chunk in _chunks(sequences, self.cfg.batch_size):
            batch = collate(chunk)
            logits, _ = self.forward_batch(batch, train=False)
            loss, _ = batch_loss(logits, batch, self.cfg.task)
            total += loss * len(batch)
            count += len(batch)
        if count == 0:
            raise ValueError("eval_loss over an empty dataset")
        return total / count

    def predict(self, sequences) -> np.ndarray:
        """Eval-mode scores: binary → P(long stay), category → (n, 3)
        softmax rows, real → predicted days (unclamped)."""
        outputs = []
        for chunk in _chunks(sequences, self.cfg.batch_size):
            logits, _ = self.forward_batch(collate(chunk), train=False)
            if self.cfg.task == "binary":
                outputs.append(stable_sigmoid(logits[:, 0]))
            elif self.cfg.task == "category":
                outputs.append(numerics.softmax(logits))
            else:
                outputs.append(logits[:, 0])
        return np.concatenate(outputs, axis=0)


def _chunks(items, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


# --- checkpointing ----------------------------------------------------------

def save_checkpoint(model: SequenceTransformer, stem: str, vocab_sha256: str) -> None:
    """Write <stem>.manifest.json + <stem>.tensors.bin (little-endian f64,
    row-major, offsets in the manifest)."""
    tensors = []
    offset = 0
    blobs = []
    for p in model.parameters():
        value2d = p.value.reshape(1, -1) if p.value.ndim == 1 else p.value
        rows, cols = value2d.shape
        raw = np.ascontiguousarray(value2d, dtype="<f8").tobytes()
        tensors.append({"name": p.name, "rows": rows, "cols": cols, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": asdict(model.cfg),
        "vocab_sha256": vocab_sha256,
        "tensors": tensors,
    }
    with open(stem + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(stem + ".tensors.bin", "wb") as fh:
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(stem: str, vocab_sha256: str) -> SequenceTransformer:
    """Rebuild a model from a checkpoint, refusing a vocabulary mismatch."""
    manifest_path = stem + ".manifest.json"
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a model checkpoint: {manifest_path}")
    if manifest["vocab_sha256"] != vocab_sha256:
        raise CheckpointError(
            "checkpoint was trained against a different vocabulary "
            f"(stored {manifest['vocab_sha256'][:12]}…, current {vocab_sha256[:12]}…)")
    cfg = ModelConfig(**manifest["config"])
    model = SequenceTransformer(cfg)
    blob_path = stem + ".tensors.bin"
    blob = np.fromfile(blob_path, dtype="<f8")
    params = {p.name: p for p in model.parameters()}
    expected_total = sum(t["rows"] * t["cols"] for t in manifest["tensors"])
    if blob.size != expected_total:
        raise CheckpointError(
            f"tensor blob holds {blob.size} values but the manifest describes "
            f"{expected_total}; {blob_path} is truncated or corrupt")
    for entry in manifest["tensors"]:
        p = params.get(entry["name"])
        if p is None:
            raise CheckpointError(f"manifest names unknown tensor {entry['name']!r}")
        start = entry["offset"] // 8
        count = entry["rows"] * entry["cols"]
        flat = blob[start:start + count]
        if flat.size != count:
            raise CheckpointError(f"tensor {entry['name']!r} is out of blob bounds")
        if p.value.size != count:
            raise CheckpointError(
                f"tensor {entry['name']!r} has {count} values, model expects {p.value.size}")
        p.value[...] = flat.reshape(p.value.shape)
    return model


def vocab_hash(vocab) -> str:
    """Stable content hash of a vocabulary (id order included)."""
    text = "\n".join(vocab.decode(i) for i in range(len(vocab))) + "\n"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
