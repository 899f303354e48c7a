"""Transformer scorer for stitched candidates, its training loop and checkpoints.

Each step becomes one token: a linear projection of the concatenated step
text embedding and clip embedding, plus a sinusoidal position code. A learned
CLS token is prepended; after a stack of pre-norm encoder blocks the CLS
output goes through a final layer norm and a linear head, and a sigmoid gives
the probability that the candidate correctly and coherently demonstrates
the procedure.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import ClipRef, Corpus, GroundTruthSample, Procedure
from .errors import CorpusError, NoCandidates, TrainingDiverged

log = logging.getLogger(__name__)

_EPS = 1e-7


@dataclass
class EvaluatorConfig:
    feature_dim: int = 768
    model_dim: int = 768
    layers: int = 4
    heads: int = 8
    mlp_hidden: int | None = None
    learning_rate: float = 3e-4
    batch_size: int = 24
    epochs: int = 10
    seed: int = 0
    negatives_per_positive: int = 3
    # "concat": one token per step from [text; clip]; "interleave": separate text and clip tokens
    input_mode: str = "concat"
    normalize_clips: bool = False
    # "rms": rescale every text and clip embedding to unit root-mean-square entries
    input_scaling: str = "rms"
    max_len: int = 128

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = self.model_dim
        for name in ("feature_dim", "model_dim", "layers", "heads", "mlp_hidden", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0 and learning_rate > 0")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.input_mode not in ("concat", "interleave"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.input_scaling not in ("rms", "none"):
            raise ValueError(f"unknown input_scaling {self.input_scaling!r}")


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : dim // 2]
    return table.float()


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, hidden)
        self.ff2 = nn.Linear(hidden, dim)

    def attention(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        dh = D // self.heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, T, self.heads, dh).transpose(1, 2)
        k = k.view(B, T, self.heads, dh).transpose(1, 2)
        v = v.view(B, T, self.heads, dh).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(dh)
        logits = logits.masked_fill(pad[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(ctx)

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x), pad)
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


def _unit_rms(x: torch.Tensor) -> torch.Tensor:
    # padded rows are all zero and stay zero
    norm = x.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return x * (math.sqrt(x.shape[-1]) / norm)


class EvaluatorModel(nn.Module):
    def __init__(self, config: EvaluatorConfig):
        super().__init__()
        self.config = config
        D = config.model_dim
        in_dim = 2 * config.feature_dim if config.input_mode == "concat" else config.feature_dim
        self.input_projection = nn.Linear(in_dim, D)
        self.cls_embedding = nn.Parameter(torch.randn(D) * 0.02)
        self.register_buffer("positional", sinusoidal_table(config.max_len, D), persistent=False)
        self.encoder_layers = nn.ModuleList(
            EncoderBlock(D, config.heads, config.mlp_hidden) for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(D)
        self.head = nn.Linear(D, 1)

    def tokens(self, text: torch.Tensor, clips: torch.Tensor, lengths: torch.Tensor):
        B, n, _ = text.shape
        if self.config.input_scaling == "rms":
            text = _unit_rms(text)
            clips = _unit_rms(clips)
        if self.config.input_mode == "concat":
            x = self.input_projection(torch.cat([text, clips], dim=-1))
            steps = torch.arange(n, device=text.device)
            valid = steps[None, :] < lengths[:, None]
        else:
            x = self.input_projection(torch.stack([text, clips], dim=2).reshape(B, 2 * n, -1))
            steps = torch.arange(2 * n, device=text.device)
            valid = steps[None, :] < 2 * lengths[:, None]
        if x.shape[1] + 1 > self.positional.shape[0]:
            raise ValueError(f"sequence of {x.shape[1]} tokens exceeds max_len")
        x = x + self.positional[1 : x.shape[1] + 1].to(x.dtype)
        cls = self.cls_embedding.expand(B, 1, -1)
        x = torch.cat([cls, x], dim=1)
        pad = torch.cat([torch.zeros(B, 1, dtype=torch.bool, device=x.device), ~valid], dim=1)
        return x, pad

    def forward(self, text: torch.Tensor, clips: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Logits of shape ``(B,)``."""
        x, pad = self.tokens(text, clips, lengths)
        for block in self.encoder_layers:
            x = block(x, pad)
        return self.head(self.final_norm(x[:, 0])).squeeze(-1)


# ---------------------------------------------------------------------------
# featurization


@dataclass
class Batch:
    text: torch.Tensor
    clips: torch.Tensor
    lengths: torch.Tensor
    labels: torch.Tensor | None = None

    def to(self, dtype) -> "Batch":
        labels = None if self.labels is None else self.labels.to(dtype)
        return Batch(self.text.to(dtype), self.clips.to(dtype), self.lengths, labels)


def step_features(query: Procedure, clips: Sequence[ClipRef], corpus: Corpus, normalize=False):
    if len(clips) != len(query):
        raise CorpusError(f"{len(clips)} clips for a {len(query)}-step procedure")
    if corpus.dim is not None and query.dim != corpus.dim:
        raise CorpusError(f"query dim {query.dim} differs from corpus dim {corpus.dim}")
    clip_emb = np.stack([corpus.clip_embedding(c) for c in clips])
    if normalize:
        clip_emb = clip_emb / np.maximum(np.linalg.norm(clip_emb, axis=1, keepdims=True), 1e-12)
    return query.embeddings, clip_emb


def make_batch(items, corpus: Corpus, labels=None, normalize=False) -> Batch:
    """``items``: sequence of ``(procedure, clips)`` pairs."""
    feats = [step_features(q, c, corpus, normalize) for q, c in items]
    n = max(len(t) for t, _ in feats)
    dim = feats[0][0].shape[1]
    text = np.zeros((len(feats), n, dim), dtype=np.float32)
    clip = np.zeros_like(text)
    for b, (t, c) in enumerate(feats):
        text[b, : len(t)] = t
        clip[b, : len(c)] = c
    lengths = torch.tensor([len(t) for t, _ in feats], dtype=torch.long)
    lab = None if labels is None else torch.tensor(labels, dtype=torch.float32)
    return Batch(torch.from_numpy(text), torch.from_numpy(clip), lengths, lab)


# ---------------------------------------------------------------------------
# scoring and ranking


def _sigmoid(logits: np.ndarray) -> np.ndarray:
    p = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


@torch.no_grad()
def candidate_logits(model: EvaluatorModel, query: Procedure, candidates, corpus: Corpus, chunk=512):
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(candidates), chunk):
        part = candidates[start : start + chunk]
        batch = make_batch(
            [(query, c.clips) for c in part], corpus, normalize=model.config.normalize_clips
        ).to(dtype)
        out.append(model(batch.text, batch.clips, batch.lengths).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def score(model: EvaluatorModel, query: Procedure, candidate, corpus: Corpus) -> float:
    """Probability that ``candidate`` demonstrates ``query``."""
    return float(_sigmoid(candidate_logits(model, query, [candidate], corpus))[0])


def rank_by_scores(scores) -> list[int]:
    """Indices by descending score; ties keep input order."""
    scores = list(scores)
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def rank_candidates(model: EvaluatorModel, query: Procedure, candidates, corpus: Corpus) -> list:
    """Candidates by descending evaluator score; the first one is the argmax."""
    if not candidates:
        raise NoCandidates(f"no candidates for {query.procedure_id!r}")
    logits = candidate_logits(model, query, list(candidates), corpus)
    return [candidates[i] for i in rank_by_scores(logits)]


# ---------------------------------------------------------------------------
# training


def bce_loss(p, label) -> float:
    p = min(max(float(p), _EPS), 1.0 - _EPS)
    return -(label * math.log(p) + (1 - label) * math.log(1.0 - p))


@dataclass
class TrainingResult:
    model: EvaluatorModel
    losses: list[float] = field(default_factory=list)


NegativeFn = Callable[[GroundTruthSample, np.random.Generator, int], list]


def train(
    config: EvaluatorConfig,
    corpus: Corpus,
    positives: Sequence[GroundTruthSample],
    negative_generator: NegativeFn,
) -> TrainingResult:
    """Adam + BCE over seeded batches of positives and generated negatives.

    ``negative_generator(sample, rng, n)`` returns up to ``n`` negatives with
    a ``clips`` attribute; shortfalls are filled from other positives.
    """
    if not positives:
        raise ValueError("training needs at least one positive")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = EvaluatorModel(config)
    optim = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    ratio = config.negatives_per_positive
    per_batch = max(1, config.batch_size // (1 + ratio))
    losses: list[float] = []
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(positives))
        total, count = 0.0, 0
        for start in range(0, len(order), per_batch):
            items, labels = [], []
            for idx in order[start : start + per_batch]:
                pos = positives[idx]
                items.append((pos.procedure, pos.clips))
                labels.append(1.0)
                negs = list(negative_generator(pos, rng, ratio))
                tries = 0
                while len(negs) < ratio and tries < 10:
                    other = positives[int(rng.integers(len(positives)))]
                    negs += negative_generator(other, rng, ratio - len(negs))
                    tries += 1
                for neg in negs[:ratio]:
                    items.append((neg.base.procedure, neg.clips))
                    labels.append(0.0)
            batch = make_batch(items, corpus, labels, normalize=config.normalize_clips)
            logits = model(batch.text, batch.clips, batch.lengths)
            loss = F.binary_cross_entropy_with_logits(logits, batch.labels)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}; try a smaller learning rate "
                    f"(current {config.learning_rate:g})"
                )
            optim.zero_grad()
            loss.backward()
            optim.step()
            total += loss.item() * len(labels)
            count += len(labels)
        losses.append(total / max(count, 1))
        log.info("epoch %d mean loss %.6f", epoch + 1, losses[-1])
    model.eval()
    return TrainingResult(model, losses)


def write_loss_log(losses: Sequence[float], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, value in enumerate(losses, start=1):
            fh.write(f"{epoch},{value:.8f}\n")


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradientCheck:
    max_rel_error: float
    per_tensor: dict[str, float]
    checked: int


def batch_loss(model: nn.Module, batch: Batch) -> torch.Tensor:
    logits = model(batch.text, batch.clips, batch.lengths)
    return F.binary_cross_entropy_with_logits(logits, batch.labels)


def gradient_check(
    model: EvaluatorModel,
    batch: Batch,
    n_params: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    corrupt: Callable[[dict[str, torch.Tensor]], None] | None = None,
) -> GradientCheck:
    """Compare autograd gradients with central differences in float64.

    Every parameter tensor contributes at least one probed entry; the rest of
    the ``n_params`` entries are drawn uniformly. ``corrupt`` may edit the
    analytic gradients in place (used as a negative control).
    """
    m = copy.deepcopy(model).double()
    m.eval()
    b = batch.to(torch.float64)
    params = dict(m.named_parameters())
    m.zero_grad()
    batch_loss(m, b).backward()
    grads = {name: p.grad.detach().clone() for name, p in params.items()}
    if corrupt is not None:
        corrupt(grads)

    rng = np.random.default_rng(seed)
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    probes = [(n, int(rng.integers(params[n].numel()))) for n in names]
    extra = max(0, n_params - len(probes))
    flat_ids = rng.choice(int(sizes.sum()), size=extra, replace=False)
    bounds = np.cumsum(sizes)
    for fid in np.sort(flat_ids):
        t = int(np.searchsorted(bounds, fid, side="right"))
        offset = int(fid - (bounds[t - 1] if t else 0))
        probes.append((names[t], offset))

    per_tensor: dict[str, float] = {}
    worst = 0.0
    with torch.no_grad():
        for name, idx in probes:
            flat = params[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = batch_loss(m, b).item()
            flat[idx] = orig - h
            down = batch_loss(m, b).item()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[name].view(-1)[idx].item()
            denom = max(abs(analytic), abs(numeric), 1e-8)
            err = abs(analytic - numeric) / denom
            per_tensor[name] = max(per_tensor.get(name, 0.0), err)
            worst = max(worst, err)
    return GradientCheck(worst, per_tensor, len(probes))


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: EvaluatorModel, path) -> None:
    """Write ``<path>`` (JSON manifest) and the sibling ``.bin`` tensor file."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    manifest, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            fh.write(arr.tobytes())
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    payload = {"config": asdict(model.config), "binary": bin_path.name, "tensors": manifest}
    path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_model(path) -> EvaluatorModel:
    path = Path(path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    model = EvaluatorModel(EvaluatorConfig(**payload["config"]))
    raw = np.fromfile(path.parent / payload["binary"], dtype="<f4")
    state = {}
    for entry in payload["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = raw[entry["offset"] : entry["offset"] + count]
        state[entry["name"]] = torch.from_numpy(chunk.astype(np.float32).reshape(entry["shape"]))
    model.load_state_dict(state)
    model.eval()
    return model


def parameter_bytes(model: nn.Module) -> bytes:
    return b"".join(t.detach().cpu().numpy().tobytes() for t in model.state_dict().values())
