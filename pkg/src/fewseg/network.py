"""Dual-branch episodic segmentor: support/query encoder-decoders with
support-to-query interaction (sSE or efficient GC) at every scale."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import BinaryMask
from .correlation import EfficientGC, SSEAttention
from .ioutil import atomic_write_bytes


@dataclass(frozen=True)
class BranchSpec:
    """Shape of one encoder-decoder branch."""

    channel_widths: tuple[int, ...] = (16, 32, 64, 128)
    input_channels: int = 1

    def __post_init__(self):
        if len(self.channel_widths) < 2:
            raise ValueError("need at least two scales")
        if any(w % 2 != 0 for w in self.channel_widths):
            raise ValueError(f"channel widths must be even, got {self.channel_widths}")
        if any(a >= b for a, b in zip(self.channel_widths, self.channel_widths[1:])):
            raise ValueError("channel widths must increase toward the bottleneck")

    @property
    def n_scales(self) -> int:
        return len(self.channel_widths)


@dataclass(frozen=True)
class ForwardOutput:
    """Query logits plus the final decoder features of both branches."""

    logits: torch.Tensor
    backend_query: torch.Tensor
    backend_support: torch.Tensor


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with rectifier nonlinearities."""

    def __init__(self, in_channels: int, out_channels: int, dtype: torch.dtype):
        super().__init__()
        kw = {"kernel_size": 3, "padding": 1, "dtype": dtype}
        self.conv1 = nn.Conv2d(in_channels, out_channels, **kw)
        self.conv2 = nn.Conv2d(out_channels, out_channels, **kw)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.conv1(x))
        return torch.relu(self.conv2(x))


class SegBranch(nn.Module):
    """U-style encoder-decoder; exposes per-scale blocks for interleaving."""

    def __init__(self, spec: BranchSpec, dtype: torch.dtype):
        super().__init__()
        widths = spec.channel_widths
        self.n_scales = spec.n_scales
        enc_in = (spec.input_channels,) + widths[:-1]
        self.enc_blocks = nn.ModuleList(
            ConvBlock(cin, cout, dtype) for cin, cout in zip(enc_in, widths)
        )
        # decoder scale s consumes upsampled scale s+1 concatenated with the skip
        self.dec_blocks = nn.ModuleList(
            ConvBlock(widths[s] + widths[s + 1], widths[s], dtype)
            for s in range(self.n_scales - 1)
        )
        self.pool = nn.MaxPool2d(2)

    def upsample(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.interpolate(x, scale_factor=2, mode="nearest")


class DualBranchSegmentor(nn.Module):
    """Few-shot segmentor conditioning a query branch on a support branch.

    The support branch consumes the support image concatenated with one
    binary class mask; its per-scale features modulate the query branch via
    sSE gating, replaced by efficient global correlation at the scale
    indices in ``gc_scales`` (on both the encoder and decoder sides). The
    branches share structure but never share parameters.
    """

    def __init__(
        self,
        spec: BranchSpec = BranchSpec(),
        gc_scales: frozenset[int] = frozenset({1, 2}),
        partition_factors: tuple[int, int] = (4, 4),
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        bad = [s for s in gc_scales if not 0 <= s < spec.n_scales]
        if bad:
            raise ValueError(f"gc_scales {sorted(bad)} outside valid scale indices")
        self.spec = spec
        self.gc_scales = frozenset(gc_scales)
        widths = spec.channel_widths

        self.support = SegBranch(
            BranchSpec(channel_widths=widths, input_channels=2), dtype
        )
        self.query = SegBranch(
            BranchSpec(channel_widths=widths, input_channels=1), dtype
        )

        def interaction(scale: int) -> nn.Module:
            if scale in self.gc_scales:
                return EfficientGC(widths[scale], widths[scale], partition_factors, dtype=dtype)
            return SSEAttention(widths[scale], dtype=dtype)

        self.enc_interact = nn.ModuleList(interaction(s) for s in range(spec.n_scales))
        self.dec_interact = nn.ModuleList(interaction(s) for s in range(spec.n_scales - 1))
        self.classifier = nn.Conv2d(widths[0], 1, kernel_size=1, dtype=dtype)

    def _run_branch(self, branch: SegBranch, x: torch.Tensor):
        """Unconditioned pass; returns per-scale encoder and decoder features."""
        enc = []
        for s, block in enumerate(branch.enc_blocks):
            if s > 0:
                x = branch.pool(x)
            x = block(x)
            enc.append(x)
        dec = [None] * (branch.n_scales - 1)
        deep = enc[-1]
        for s in reversed(range(branch.n_scales - 1)):
            deep = branch.dec_blocks[s](torch.cat([enc[s], branch.upsample(deep)], dim=1))
            dec[s] = deep
        return enc, dec

    def forward(
        self,
        support_image: torch.Tensor,
        support_mask: torch.Tensor,
        query_image: torch.Tensor,
    ) -> ForwardOutput:
        for name, t in (("support_image", support_image),
                        ("support_mask", support_mask),
                        ("query_image", query_image)):
            if t.ndim != 4 or t.shape[1] != 1:
                raise ValueError(f"{name} must be (B,1,H,W), got {tuple(t.shape)}")
        if not (support_image.shape == support_mask.shape == query_image.shape):
            raise ValueError("support image, mask and query image shapes must match")
        mask_vals = support_mask.detach()
        if not torch.logical_or(mask_vals == 0, mask_vals == 1).all():
            raise ValueError("support mask must be binary")

        s_enc, s_dec = self._run_branch(self.support, torch.cat([support_image, support_mask], dim=1))

        q = self.query
        q_enc = []
        x = query_image
        for s, block in enumerate(q.enc_blocks):
            if s > 0:
                x = q.pool(x)
            x = block(x)
            x = self._modulate(self.enc_interact[s], x, s_enc[s])
            q_enc.append(x)
        deep = q_enc[-1]
        for s in reversed(range(q.n_scales - 1)):
            deep = q.dec_blocks[s](torch.cat([q_enc[s], q.upsample(deep)], dim=1))
            deep = self._modulate(self.dec_interact[s], deep, s_dec[s])

        return ForwardOutput(
            logits=self.classifier(deep),
            backend_query=deep,
            backend_support=s_dec[0],
        )


def predict_mask(logits: torch.Tensor, class_id: int, threshold: float = 0.5) -> BinaryMask:
    """Threshold sigmoid probabilities into a hard mask; ties resolve to 0."""
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    probs = torch.sigmoid(logits.detach().reshape(logits.shape[-2:]))
    hard = (probs > threshold).to(torch.uint8).cpu().numpy()
    return BinaryMask(mask=hard, class_id=class_id)


_CKPT_MAGIC = b"FEWSEGCK"


def save_checkpoint(model: nn.Module, path) -> None:
    """Serialize parameters as a JSON manifest plus little-endian float32 payload."""
    manifest = []
    payload = bytearray()
    for name, param in model.named_parameters():
        arr = param.detach().cpu().numpy().astype("<f4")
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())
    head = json.dumps({"format": 1, "tensors": manifest}).encode("utf-8")
    blob = _CKPT_MAGIC + struct.pack("<Q", len(head)) + head + bytes(payload)
    atomic_write_bytes(path, blob)


def load_checkpoint(model: nn.Module, path) -> None:
    """Load a checkpoint produced by :func:`save_checkpoint` into ``model``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (head_len,) = struct.unpack_from("<Q", blob, len(_CKPT_MAGIC))
    head_start = len(_CKPT_MAGIC) + 8
    manifest = json.loads(blob[head_start : head_start + head_len].decode("utf-8"))
    payload = blob[head_start + head_len :]

    params = dict(model.named_parameters())
    names = [t["name"] for t in manifest["tensors"]]
    if set(names) != set(params):
        missing = sorted(set(params) - set(names))
        extra = sorted(set(names) - set(params))
        raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for entry in manifest["tensors"]:
            raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            target = params[entry["name"]]
            if tuple(arr.shape) != tuple(target.shape):
                raise ValueError(
                    f"shape mismatch for {entry['name']}: "
                    f"file {arr.shape} vs model {tuple(target.shape)}"
                )
            target.copy_(torch.from_numpy(arr.copy()).to(target.dtype))
