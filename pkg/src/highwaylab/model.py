"""Value model: convolutional backbone over the BEV raster plus two shallow
MLP heads scoring trajectories.

The backbone downsamples by exactly 8: a 3-layer stem, four bottleneck
residual units (1x1 / 3x3 / 1x1 with a projection skip; the middle three
carry stride 2), and a two-layer 3x3 head that sets the final channel count.
Widths are configurable so desk-scale runs stay cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .features import KIN_FEATURES, RasterConfig


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 26
    stem_width: int = 16
    block_widths: tuple = (16, 24, 32, 48)
    out_channels: int = 64      # backbone feature dimension C
    n_waypoints: int = 10       # T
    head_hidden: int = 64

    @property
    def channels_per_step(self) -> int:
        """Width of the per-timestep channel group used for indexing."""
        if self.out_channels >= self.n_waypoints:
            return self.out_channels // self.n_waypoints
        return self.out_channels

    @property
    def feature_dim(self) -> int:
        return self.n_waypoints * (self.channels_per_step + KIN_FEATURES)


DESK_MODEL = ModelConfig(stem_width=8, block_widths=(8, 12, 16, 24),
                         out_channels=64, head_hidden=64)
TINY_MODEL = ModelConfig(stem_width=4, block_widths=(4, 4, 4, 4),
                         out_channels=8, head_hidden=16)


class _ResUnit(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_in, 1)
        self.conv2 = nn.Conv2d(c_in, c_in, 3, stride=stride, padding=1)
        self.conv3 = nn.Conv2d(c_in, c_out, 1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride)
        self.act = nn.ReLU()

    def forward(self, x):
        h = self.act(self.conv1(x))
        h = self.act(self.conv2(h))
        h = self.conv3(h)
        return self.act(h + self.skip(x))


class Backbone(nn.Module):
    """Raster (B, C_in, H, W) -> feature map (B, C, H/8, W/8)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.stem_width
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU())
        strides = (2, 2, 2, 1)
        widths = (w,) + tuple(cfg.block_widths)
        self.blocks = nn.Sequential(*[
            _ResUnit(widths[i], widths[i + 1], strides[i]) for i in range(4)])
        self.head = nn.Sequential(
            nn.Conv2d(widths[-1], cfg.out_channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(cfg.out_channels, cfg.out_channels, 3, padding=1))

    def forward(self, x):
        return self.head(self.blocks(self.stem(x)))


class _Head(nn.Module):
    """3-layer perceptron from the trajectory feature to a scalar."""

    def __init__(self, d_in, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 1))

    def forward(self, f):
        return self.net(f).squeeze(-1)


class QModel(nn.Module):
    """Q(s, trajectory) = short-horizon head + beyond-horizon head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.r_head = _Head(cfg.feature_dim, cfg.head_hidden)
        self.v_head = _Head(cfg.feature_dim, cfg.head_hidden)

    def feature_map(self, raster):
        return self.backbone(raster)

    def heads(self, f_tau):
        r = self.r_head(f_tau)
        v = self.v_head(f_tau)
        return r, v, r + v


def index_waypoints(fmap: torch.Tensor, pixels: torch.Tensor,
                    cfg: ModelConfig) -> torch.Tensor:
    """Bilinear backbone-feature lookup per waypoint.

    fmap: (C, Hf, Wf) for one state. pixels: (N, T, 2) fractional raster
    pixel indices (integer = pixel center). Waypoint t reads its own channel
    group of width channels_per_step; when C < T every step reads the full
    column. Out-of-range lookups clamp to the border.
    """
    c, hf, wf = fmap.shape
    n, t, _ = pixels.shape
    cps = cfg.channels_per_step
    # raster pixel -> feature cell: each feature cell covers 8 raster pixels
    coords = (pixels + 0.5) / 8.0 - 0.5
    rows = coords[..., 0].clamp(0.0, hf - 1.0)
    cols = coords[..., 1].clamp(0.0, wf - 1.0)
    r0 = rows.floor().long().clamp(0, hf - 1)
    c0 = cols.floor().long().clamp(0, wf - 1)
    r1 = (r0 + 1).clamp(0, hf - 1)
    c1 = (c0 + 1).clamp(0, wf - 1)
    wr = (rows - r0.to(rows.dtype)).unsqueeze(-1)
    wc = (cols - c0.to(cols.dtype)).unsqueeze(-1)

    out = []
    for step in range(t):
        g0 = step * cps if c >= cfg.n_waypoints else 0
        group = fmap[g0:g0 + cps]                      # (cps, Hf, Wf)
        f00 = group[:, r0[:, step], c0[:, step]].T     # (N, cps)
        f01 = group[:, r0[:, step], c1[:, step]].T
        f10 = group[:, r1[:, step], c0[:, step]].T
        f11 = group[:, r1[:, step], c1[:, step]].T
        w_r = wr[:, step]
        w_c = wc[:, step]
        top = f00 * (1 - w_c) + f01 * w_c
        bot = f10 * (1 - w_c) + f11 * w_c
        out.append(top * (1 - w_r) + bot * w_r)
    return torch.stack(out, dim=1)                     # (N, T, cps)


def assemble(indexed: torch.Tensor, kinematics: torch.Tensor) -> torch.Tensor:
    """Per-timestep [indexed || kinematics], flattened in timestep order."""
    n, t, _ = indexed.shape
    return torch.cat([indexed, kinematics], dim=-1).reshape(n, -1)


def score_trajectories(model: QModel, fmap: torch.Tensor,
                       pixels: torch.Tensor, kinematics: torch.Tensor):
    """(r, v, q) tensors of shape (N,) for N candidate trajectories."""
    indexed = index_waypoints(fmap, pixels, model.cfg)
    f_tau = assemble(indexed, kinematics)
    return model.heads(f_tau)


def raster_to_tensor(raster: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) numpy raster -> (C, H, W) torch tensor."""
    return torch.as_tensor(np.ascontiguousarray(raster.transpose(2, 0, 1)),
                           dtype=dtype)


def save_checkpoint(path, model: QModel, extra: dict | None = None):
    payload = {"format_version": 1,
               "config": vars(model.cfg) if not hasattr(model.cfg, "__dataclass_fields__")
               else {k: getattr(model.cfg, k) for k in model.cfg.__dataclass_fields__},
               "state_dict": model.state_dict()}
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[QModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != 1:
        raise ValueError("unsupported checkpoint format")
    cfg_doc = dict(payload["config"])
    cfg_doc["block_widths"] = tuple(cfg_doc["block_widths"])
    cfg = ModelConfig(**cfg_doc)
    model = QModel(cfg)
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
