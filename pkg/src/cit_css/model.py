"""Segmentation models: a small conv feature extractor, a class-independent
query head, a per-pixel softmax baseline head, and frozen snapshots.

The class-independent head gives every known class its own query vector.
Each query is refined by cross-attention over the shared feature map and a
per-query feed-forward, with no self-attention between queries, then emits
an image-level presence logit and a per-pixel mask logit map. Rows are
computed in an explicit per-class loop, so the prediction for class c is
structurally a function of row c and shared parameters only: restricting
the bank to a subset of rows, or appending new rows, reproduces the
surviving channels bit-for-bit.

Upsampling is a local bilinear implementation rather than
torch.nn.functional.interpolate: the builtin kernel is not bitwise
invariant to the number of channels, which would break the row-restriction
equality above.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ContractError, SnapshotFormatError

SNAPSHOT_FORMAT_VERSION = 1

PRESENCE_MODES = ("projection", "pooled")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    feature_dim: int = 64
    base_width: int = 32
    stride: int = 4  # fixed by the two stride-2 encoder blocks
    decoder_layers: int = 2
    ffn_hidden: int = 128

    def __post_init__(self):
        if self.stride != 4:
            raise ValueError("encoder is built for stride 4")


@dataclass
class FeatureMap:
    values: torch.Tensor  # [B, C, h, w]
    stride: int
    channels: int
    batched: bool  # False when built from a single [3,H,W] image


@dataclass
class LogitBundle:
    """Pre-sigmoid presence scores [..., K] and mask maps [..., K, H, W],
    channel-aligned with class_ids."""

    presence_logits: torch.Tensor
    mask_logits: torch.Tensor
    class_ids: tuple[int, ...]

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        k = len(self.class_ids)
        if self.presence_logits.shape[-1] != k or self.mask_logits.shape[-3] != k:
            raise ContractError("logit channel count does not match class_ids")

    @property
    def batched(self) -> bool:
        return self.mask_logits.dim() == 4

    def index_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise ContractError(f"bundle has no channel for class {class_id}") from None

    def restrict(self, class_ids) -> "LogitBundle":
        idx = [self.index_of(c) for c in class_ids]
        return LogitBundle(
            presence_logits=self.presence_logits[..., idx],
            mask_logits=self.mask_logits[..., idx, :, :],
            class_ids=tuple(class_ids),
        )

    def detach(self) -> "LogitBundle":
        return LogitBundle(
            self.presence_logits.detach(), self.mask_logits.detach(), self.class_ids
        )

    @staticmethod
    def concat(bundles: list["LogitBundle"]) -> "LogitBundle":
        """Merge disjoint bundles, channels reordered by ascending class id."""
        ids = [c for b in bundles for c in b.class_ids]
        if len(set(ids)) != len(ids):
            raise ContractError("bundles to concatenate share class ids")
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        presence = torch.cat([b.presence_logits for b in bundles], dim=-1)
        mask = torch.cat([b.mask_logits for b in bundles], dim=-3)
        return LogitBundle(
            presence_logits=presence[..., order],
            mask_logits=mask[..., order, :, :],
            class_ids=tuple(ids[i] for i in order),
        )


def upsample_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsample of the trailing two dims (half-pixel centers,
    edges clamped). Elementwise gathers only, so each channel's result is
    independent of how many channels ride along."""
    h, w = x.shape[-2:]
    H, W = size
    if (H, W) == (h, w):
        return x
    sy = torch.clamp((torch.arange(H, dtype=x.dtype) + 0.5) * (h / H) - 0.5, min=0.0)
    sx = torch.clamp((torch.arange(W, dtype=x.dtype) + 0.5) * (w / W) - 0.5, min=0.0)
    y0 = sy.floor().long().clamp(max=h - 1)
    x0 = sx.floor().long().clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    ty = (sy - y0).reshape(-1, 1)
    tx = (sx - x0).reshape(1, -1)
    ya, yb = y0.reshape(-1, 1), y1.reshape(-1, 1)
    xa, xb = x0.reshape(1, -1), x1.reshape(1, -1)
    v00 = x[..., ya, xa]
    v01 = x[..., ya, xb]
    v10 = x[..., yb, xa]
    v11 = x[..., yb, xb]
    top = v00 + tx * (v01 - v00)
    bot = v10 + tx * (v11 - v10)
    return top + ty * (bot - top)


def linear_mask_logits(values: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Per-pixel scores weight . features, one row at a time: [B,C,h,w] x
    [K,C] -> [B,K,h,w]. The row loop keeps each channel's bits independent
    of K, which both heads rely on for exact cross-checks."""
    b = values.shape[0]
    rows = [
        torch.einsum("bc,bchw->bhw", weight[i].unsqueeze(0).expand(b, -1), values)
        for i in range(weight.shape[0])
    ]
    return torch.stack(rows, dim=1)


class ConvEncoder(nn.Module):
    """Four conv blocks, overall stride 4, GroupNorm + ReLU."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c_in, base, c_out = config.in_channels, config.base_width, config.feature_dim
        mid = max(base * 3 // 2, base)

        def block(cin, cout, stride):
            groups = 4 if cout % 4 == 0 else 1
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.GroupNorm(groups, cout),
                nn.ReLU(inplace=True),
            )

        self.blocks = nn.Sequential(
            block(c_in, base, 2),
            block(base, mid, 2),
            block(mid, c_out, 1),
            block(c_out, c_out, 1),
        )
        self.stride = config.stride
        self.out_channels = c_out

    def forward(self, images: torch.Tensor) -> FeatureMap:
        batched = images.dim() == 4
        x = images if batched else images.unsqueeze(0)
        if x.dim() != 4:
            raise ContractError(f"expected [B,3,H,W] or [3,H,W], got {tuple(images.shape)}")
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ContractError(
                f"spatial dims {tuple(x.shape[-2:])} must be multiples of stride {self.stride}"
            )
        return FeatureMap(
            values=self.blocks(x),
            stride=self.stride,
            channels=self.out_channels,
            batched=batched,
        )


class CrossAttentionLayer(nn.Module):
    """One refinement layer for a single query row.

    Full form: pre-norm projected cross-attention plus a gated
    feed-forward. Minimal form (used when adapting a plain linear
    classifier): projection-free attention and a single scalar gate, adding
    only one parameter per layer. Gates start at zero, so a fresh layer is
    an exact identity.
    """

    def __init__(self, dim: int, ffn_hidden: int = 128, minimal: bool = False):
        super().__init__()
        self.minimal = minimal
        self.scale = dim**-0.5
        self.gate_attn = nn.Parameter(torch.zeros(()))
        if not minimal:
            self.norm_attn = nn.LayerNorm(dim)
            self.q_proj = nn.Linear(dim, dim)
            self.k_proj = nn.Linear(dim, dim)
            self.v_proj = nn.Linear(dim, dim)
            self.out_proj = nn.Linear(dim, dim)
            self.norm_ffn = nn.LayerNorm(dim)
            self.ffn1 = nn.Linear(dim, ffn_hidden)
            self.ffn2 = nn.Linear(ffn_hidden, dim)
            self.gate_ffn = nn.Parameter(torch.zeros(()))

    def precompute(self, feats_flat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # feats_flat: [B, P, C]; keys/values never depend on any query row
        if self.minimal:
            return feats_flat, feats_flat
        return self.k_proj(feats_flat), self.v_proj(feats_flat)

    def refine(self, q: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        # q: [B, C] for one class row
        attn_q = q if self.minimal else self.q_proj(self.norm_attn(q))
        scores = torch.einsum("bc,bpc->bp", attn_q, keys) * self.scale
        pooled = torch.einsum("bp,bpc->bc", scores.softmax(dim=-1), values)
        if not self.minimal:
            pooled = self.out_proj(pooled)
        q = q + self.gate_attn * pooled
        if not self.minimal:
            q = q + self.gate_ffn * self.ffn2(torch.relu(self.ffn1(self.norm_ffn(q))))
        return q


class QueryBank(nn.Module):
    """One learnable query per known class id plus the shared decoder.

    `presence_mode` is "projection" (shared linear readout of the refined
    query) or "pooled" (spatial max of the class's own mask logits; used by
    the parameter-light adapted form).
    """

    def __init__(
        self,
        class_ids,
        dim: int,
        num_layers: int = 2,
        ffn_hidden: int = 128,
        minimal: bool = False,
        presence_mode: str = "projection",
        queries: torch.Tensor | None = None,
    ):
        super().__init__()
        class_ids = tuple(int(c) for c in class_ids)
        if not class_ids:
            raise ValueError("bank needs at least one class")
        if any(c <= 0 for c in class_ids):
            raise ValueError("class ids are positive (0 is background)")
        if any(b <= a for a, b in zip(class_ids, class_ids[1:])):
            raise ValueError("class_ids must be strictly increasing")
        if presence_mode not in PRESENCE_MODES:
            raise ValueError(f"presence_mode must be one of {PRESENCE_MODES}")
        self.class_ids = class_ids
        self.dim = dim
        self.minimal = minimal
        self.presence_mode = presence_mode
        if queries is None:
            queries = 0.02 * torch.randn(len(class_ids), dim)
        if queries.shape != (len(class_ids), dim):
            raise ValueError("queries must be [num_classes, dim]")
        self.queries = nn.Parameter(queries.detach().clone())
        self.layers = nn.ModuleList(
            CrossAttentionLayer(dim, ffn_hidden, minimal=minimal) for _ in range(num_layers)
        )
        self.presence_head = None if presence_mode == "pooled" else nn.Linear(dim, 1)

    def row_for(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise ContractError(f"bank has no row for class {class_id}") from None

    def restrict(self, class_ids) -> "QueryBank":
        """Evaluation view over a row subset; shared decoder modules."""
        idx = [self.row_for(c) for c in class_ids]
        sub = QueryBank.__new__(QueryBank)
        nn.Module.__init__(sub)
        sub.class_ids = tuple(int(c) for c in class_ids)
        sub.dim = self.dim
        sub.minimal = self.minimal
        sub.presence_mode = self.presence_mode
        sub.queries = nn.Parameter(self.queries.detach()[idx].clone())
        sub.layers = self.layers
        sub.presence_head = self.presence_head
        return sub


def cit_forward(features: FeatureMap, bank: QueryBank, out_size: tuple[int, int] | None = None) -> LogitBundle:
    """Refine every query row independently and emit its presence and mask
    logits. No step mixes information across rows."""
    vals = features.values
    b, c, h, w = vals.shape
    if c != bank.dim:
        raise ContractError(f"feature dim {c} != bank dim {bank.dim}")
    if out_size is None:
        out_size = (h * features.stride, w * features.stride)
    flat = vals.flatten(2).transpose(1, 2)  # [B, P, C]
    kv = [layer.precompute(flat) for layer in bank.layers]
    refined = []
    for i in range(len(bank.class_ids)):
        q = bank.queries[i].unsqueeze(0).expand(b, -1)
        for layer, (keys, values) in zip(bank.layers, kv):
            q = layer.refine(q, keys, values)
        refined.append(q)
    mask_rows = [torch.einsum("bc,bchw->bhw", q, vals) for q in refined]
    mask_logits = upsample_bilinear(torch.stack(mask_rows, dim=1), out_size)
    if bank.presence_mode == "projection":
        presence = torch.stack([bank.presence_head(q).squeeze(-1) for q in refined], dim=1)
    else:
        presence = mask_logits.amax(dim=(-2, -1))
    if not features.batched:
        presence = presence.squeeze(0)
        mask_logits = mask_logits.squeeze(0)
    return LogitBundle(presence_logits=presence, mask_logits=mask_logits, class_ids=bank.class_ids)


def extend_queries(
    bank: QueryBank,
    new_class_ids,
    init: str = "random",
    *,
    weights: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> QueryBank:
    """New bank with rows for new_class_ids appended. Old rows and all
    decoder parameters keep their exact values. init="random" draws small
    gaussian rows (from `generator` when given); init="adapted" copies the
    supplied classifier weight rows."""
    new_class_ids = tuple(int(c) for c in new_class_ids)
    if not new_class_ids:
        return copy.deepcopy(bank)
    if set(new_class_ids) & set(bank.class_ids):
        raise ValueError("new class ids collide with existing bank rows")
    if any(b <= a for a, b in zip(new_class_ids, new_class_ids[1:])):
        raise ValueError("new class ids must be strictly increasing")
    if new_class_ids[0] <= bank.class_ids[-1]:
        raise ValueError("new class ids must extend past existing ones (rows are appended)")
    if init == "random":
        rows = torch.empty(len(new_class_ids), bank.dim)
        rows.normal_(mean=0.0, std=0.02, generator=generator)
    elif init == "adapted":
        if weights is None or weights.shape != (len(new_class_ids), bank.dim):
            raise ValueError("init='adapted' needs weights of shape [len(new_ids), dim]")
        rows = weights.detach().clone().to(bank.queries.dtype)
    else:
        raise ValueError("init must be 'random' or 'adapted'")
    extended = copy.deepcopy(bank)
    extended.class_ids = bank.class_ids + new_class_ids
    extended.queries = nn.Parameter(
        torch.cat([extended.queries.detach(), rows.to(extended.queries.dtype)], dim=0)
    )
    return extended


class SoftmaxHead(nn.Module):
    """Per-pixel linear classifier over rows (row 0 conventionally the
    background), closed by a softmax."""

    def __init__(self, num_rows: int, dim: int):
        super().__init__()
        if num_rows < 2:
            raise ValueError("softmax head needs at least 2 rows")
        self.weight = nn.Parameter(0.02 * torch.randn(num_rows, dim))


def softmax_head_forward(
    features: FeatureMap, weight: torch.Tensor, out_size: tuple[int, int] | None = None
) -> torch.Tensor:
    """Per-pixel class distribution [..., K, H, W]; probabilities sum to 1."""
    if weight.dim() != 2 or weight.shape[0] < 2:
        raise ValueError("weight must be [K>=2, C]")
    vals = features.values
    h, w = vals.shape[-2:]
    if out_size is None:
        out_size = (h * features.stride, w * features.stride)
    logits = upsample_bilinear(linear_mask_logits(vals, weight), out_size)
    probs = logits.softmax(dim=1)
    return probs if features.batched else probs.squeeze(0)


def cit_adapt(weight: torch.Tensor, class_ids=None, num_layers: int = 2) -> QueryBank:
    """Convert a linear classifier's foreground rows into a class-independent
    bank. Minimal decoder layers (projection-free attention, zero gates, no
    feed-forward) and pooled presence keep the parameter cost to a few
    scalars, and at initialization the mask logits reproduce the linear
    classifier's per-pixel scores exactly."""
    if weight.dim() != 2:
        raise ValueError("weight must be [K, C]")
    k, dim = weight.shape
    if class_ids is None:
        class_ids = tuple(range(1, k + 1))
    return QueryBank(
        class_ids=class_ids,
        dim=dim,
        num_layers=num_layers,
        minimal=True,
        presence_mode="pooled",
        queries=weight.detach().clone(),
    )


def semantic_decode(bundle: LogitBundle, tau: float = 0.5) -> np.ndarray:
    """Label map from independent channels: per-pixel score is
    sigmoid(presence) * sigmoid(mask); the best class wins if its score
    exceeds tau, else background. Ties go to the lowest class id."""
    presence = torch.sigmoid(bundle.presence_logits.detach()).cpu().numpy()
    mask = torch.sigmoid(bundle.mask_logits.detach()).cpu().numpy()
    scores = presence[..., None, None] * mask  # [..., K, H, W]
    ids = np.asarray(bundle.class_ids, dtype=np.int32)
    order = np.argsort(ids, kind="stable")
    best_val = np.full(scores.shape[:-3] + scores.shape[-2:], -1.0, dtype=scores.dtype)
    best_id = np.zeros(best_val.shape, dtype=np.int32)
    for i in order:  # ascending class id; strict > keeps the lowest id on ties
        s = scores[..., i, :, :]
        better = s > best_val
        best_val = np.where(better, s, best_val)
        best_id = np.where(better, ids[i], best_id)
    return np.where(best_val > tau, best_id, 0).astype(np.int32)


class SegModel(nn.Module):
    """Encoder plus one prediction head ("cit" bank or "softmax")."""

    def __init__(
        self,
        config: ModelConfig,
        head: str = "cit",
        class_ids=None,
        num_classes: int | None = None,
        bank: QueryBank | None = None,
        minimal_decoder: bool = False,
        presence_mode: str = "projection",
    ):
        super().__init__()
        if head not in ("cit", "softmax"):
            raise ValueError("head must be 'cit' or 'softmax'")
        self.config = config
        self.head_type = head
        self.encoder = ConvEncoder(config)
        if head == "cit":
            if bank is None:
                if not class_ids:
                    raise ValueError("cit head needs class_ids")
                bank = QueryBank(
                    class_ids,
                    dim=config.feature_dim,
                    num_layers=config.decoder_layers,
                    ffn_hidden=config.ffn_hidden,
                    minimal=minimal_decoder,
                    presence_mode=presence_mode,
                )
            self.bank = bank
            self.softmax_head = None
        else:
            if num_classes is None:
                raise ValueError("softmax head needs num_classes (foreground count)")
            self.num_classes = num_classes
            self.softmax_head = SoftmaxHead(num_classes + 1, config.feature_dim)
            self.bank = None

    @property
    def class_ids(self) -> tuple[int, ...]:
        if self.head_type == "cit":
            return self.bank.class_ids
        return tuple(range(1, self.num_classes + 1))

    def extract_features(self, images: torch.Tensor) -> FeatureMap:
        return self.encoder(images)

    def forward_bundle(self, images: torch.Tensor, out_size=None) -> LogitBundle:
        if self.head_type != "cit":
            raise ContractError("model has no query bank")
        if out_size is None:
            out_size = tuple(images.shape[-2:])
        return cit_forward(self.encoder(images), self.bank, out_size=out_size)

    def forward_probs(self, images: torch.Tensor) -> torch.Tensor:
        if self.head_type != "softmax":
            raise ContractError("model has no softmax head")
        return softmax_head_forward(
            self.encoder(images), self.softmax_head.weight, out_size=tuple(images.shape[-2:])
        )

    def decode(self, images: torch.Tensor, tau: float = 0.5) -> np.ndarray:
        """Predicted label map(s); softmax models argmax their distribution
        (row 0 is background), bank models use semantic_decode."""
        with torch.no_grad():
            if self.head_type == "cit":
                return semantic_decode(self.forward_bundle(images), tau=tau)
            probs = self.forward_probs(images)
        return probs.argmax(dim=-3).cpu().numpy().astype(np.int32)

    def arch_dict(self) -> dict:
        doc = {
            "model_config": asdict(self.config),
            "head": self.head_type,
        }
        if self.head_type == "cit":
            doc.update(
                {
                    "class_ids": list(self.bank.class_ids),
                    "decoder_layers": len(self.bank.layers),
                    "minimal_decoder": self.bank.minimal,
                    "presence_mode": self.bank.presence_mode,
                }
            )
        else:
            doc["num_classes"] = self.num_classes
        return doc

    @classmethod
    def from_arch_dict(cls, doc: dict) -> "SegModel":
        config = ModelConfig(**doc["model_config"])
        if doc["head"] == "cit":
            bank = QueryBank(
                doc["class_ids"],
                dim=config.feature_dim,
                num_layers=doc["decoder_layers"],
                ffn_hidden=config.ffn_hidden,
                minimal=doc["minimal_decoder"],
                presence_mode=doc["presence_mode"],
            )
            return cls(config, head="cit", bank=bank)
        return cls(config, head="softmax", num_classes=doc["num_classes"])


def _state_digest(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


class ModelSnapshot:
    """Immutable frozen copy of a model, with enough metadata to rebuild it
    in another process. Forward passes are evaluation-mode and gradient-free.
    """

    def __init__(self, arch: dict, state: dict, task_index: int, owned_class_ids, manifest: dict):
        self.arch = arch
        self.state = {k: v.detach().clone() for k, v in state.items()}
        self.task_index = int(task_index)
        self.owned_class_ids = tuple(int(c) for c in owned_class_ids)
        self.manifest = dict(manifest)
        module = SegModel.from_arch_dict(arch)
        module.load_state_dict(self.state)
        module.eval()
        module.requires_grad_(False)
        self._module = module

    @classmethod
    def from_model(
        cls, model: SegModel, task_index: int, owned_class_ids, manifest: dict | None = None
    ) -> "ModelSnapshot":
        return cls(
            arch=model.arch_dict(),
            state=model.state_dict(),
            task_index=task_index,
            owned_class_ids=owned_class_ids,
            manifest=manifest or {},
        )

    def predict(self, images: torch.Tensor, class_ids=None) -> LogitBundle:
        """Eval-mode bundle, optionally restricted to a row subset."""
        with torch.no_grad():
            feats = self._module.encoder(images)
            bank = self._module.bank
            if class_ids is not None:
                bank = bank.restrict(class_ids)
            return cit_forward(feats, bank, out_size=tuple(images.shape[-2:]))

    def restore(self) -> SegModel:
        model = SegModel.from_arch_dict(self.arch)
        model.load_state_dict({k: v.clone() for k, v in self.state.items()})
        return model

    def param_count(self) -> int:
        return sum(v.numel() for v in self.state.values())

    def parameter_digest(self) -> str:
        return _state_digest(self.state)

    def probe_digest(self) -> str:
        """Digest of eval logits on a fixed synthetic probe batch."""
        gen = torch.Generator().manual_seed(0x9E3779B9)
        size = self._module.encoder.stride * 8
        probe = torch.rand(2, self.arch["model_config"]["in_channels"], size, size, generator=gen)
        with torch.no_grad():
            if self._module.head_type == "cit":
                bundle = self._module.forward_bundle(probe)
                payload = [bundle.presence_logits, bundle.mask_logits]
            else:
                payload = [self._module.forward_probs(probe)]
        h = hashlib.sha256()
        for t in payload:
            h.update(np.ascontiguousarray(t.numpy(), dtype=np.float32).tobytes())
        return h.hexdigest()[:16]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "task_index": self.task_index,
            "owned_class_ids": list(self.owned_class_ids),
            "hyperparams": {"arch": self.arch, **self.manifest},
            "format_version": SNAPSHOT_FORMAT_VERSION,
            "probe_digest": self.probe_digest(),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        torch.save({"state": self.state}, out / "weights.pt")

    @classmethod
    def load(cls, in_dir, verify_probe: bool = True) -> "ModelSnapshot":
        root = Path(in_dir)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except FileNotFoundError as exc:
            raise SnapshotFormatError(f"no manifest.json under {root}") from exc
        if manifest.get("format_version") != SNAPSHOT_FORMAT_VERSION:
            raise SnapshotFormatError(
                f"snapshot format_version {manifest.get('format_version')} "
                f"!= supported {SNAPSHOT_FORMAT_VERSION}"
            )
        required = {"task_index", "owned_class_ids", "hyperparams", "probe_digest"}
        if not required.issubset(manifest):
            raise SnapshotFormatError(f"manifest missing fields {required - set(manifest)}")
        hyper = dict(manifest["hyperparams"])
        arch = hyper.pop("arch")
        state = torch.load(root / "weights.pt", weights_only=True)["state"]
        snap = cls(
            arch=arch,
            state=state,
            task_index=manifest["task_index"],
            owned_class_ids=manifest["owned_class_ids"],
            manifest=hyper,
        )
        if verify_probe and snap.probe_digest() != manifest["probe_digest"]:
            raise SnapshotFormatError("probe digest mismatch: weights do not reproduce logits")
        return snap


def snapshot(model: SegModel, task_index: int, owned_class_ids, manifest=None) -> ModelSnapshot:
    return ModelSnapshot.from_model(model, task_index, owned_class_ids, manifest)


def restore(snap: ModelSnapshot) -> SegModel:
    return snap.restore()
