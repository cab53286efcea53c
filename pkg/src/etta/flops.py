"""Analytic multiply-accumulate (MAC) cost model for the ViT under token merging.

Per block with ``n`` input tokens, ``r`` of which are merged away between the
attention and the MLP::

    qkv   3 n d^2        attention projections
    qk    n^2 d          Q K^T
    av    n^2 d          attention-weighted values
    proj  n d^2          output projection
    ffn   2 (n-r) d m    two MLP matmuls, m = mlp_ratio * d

Patch embedding costs ``num_patches * patch_dim * d`` and the head ``d * C``.
Norms, softmax, GELU and the merge itself are not counted.

Two totals are reported: raw MACs (the unit most vision papers label
"GFLOPs") and ``2 * MACs``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tokenagg import merge_schedule
from .vit import ViTConfig

VIT_B16 = ViTConfig(image_size=224, patch_size=16, channels=3, hidden_dim=768, num_layers=12,
                    num_heads=12, mlp_ratio=4, num_classes=1000)


@dataclass(frozen=True)
class LayerCost:
    tokens_in: int
    r: int
    qkv: int
    qk: int
    av: int
    proj: int
    ffn: int

    @property
    def total(self) -> int:
        return self.qkv + self.qk + self.av + self.proj + self.ffn


def layer_cost(n: int, r: int, d: int, mlp_dim: int) -> LayerCost:
    return LayerCost(n, r, 3 * n * d * d, n * n * d, n * n * d, n * d * d, 2 * (n - r) * d * mlp_dim)


@dataclass(frozen=True)
class FlopsReport:
    config: ViTConfig
    r: int
    layers: tuple[LayerCost, ...]
    patch_embed: int
    head: int
    baseline_total: int  # MACs of the same model at r = 0

    @property
    def total(self) -> int:
        return self.patch_embed + self.head + sum(c.total for c in self.layers)

    @property
    def ratio(self) -> float:
        return self.total / self.baseline_total

    @property
    def gmacs(self) -> float:
        return self.total / 1e9

    @property
    def gflops(self) -> float:
        return 2 * self.total / 1e9

    def as_dict(self) -> dict:
        return {
            "r": self.r,
            "macs": self.total,
            "baseline_macs": self.baseline_total,
            "gmacs": self.gmacs,
            "gflops": self.gflops,
            "ratio": self.ratio,
            "patch_embed": self.patch_embed,
            "head": self.head,
            "layers": [
                {"tokens_in": c.tokens_in, "r": c.r, "qkv": c.qkv, "qk": c.qk, "av": c.av,
                 "proj": c.proj, "ffn": c.ffn, "total": c.total}
                for c in self.layers
            ],
        }

    def table(self) -> str:
        rows = [f"{'layer':>5} {'N_in':>5} {'r':>3} {'MACs':>14}"]
        for i, c in enumerate(self.layers):
            rows.append(f"{i:>5} {c.tokens_in:>5} {c.r:>3} {c.total:>14,}")
        rows.append(f"patch embed {self.patch_embed:,}; head {self.head:,}")
        rows.append(f"total {self.gmacs:.3f} GMACs ({self.gflops:.3f} GFLOPs at 2/MAC); "
                    f"ratio vs r=0 {self.ratio:.4f}")
        return "\n".join(rows)


def _layers(cfg: ViTConfig, r: int) -> tuple[LayerCost, ...]:
    out, n = [], cfg.num_tokens
    for r_l in merge_schedule(cfg.num_tokens, cfg.num_layers, r):
        out.append(layer_cost(n, r_l, cfg.hidden_dim, cfg.mlp_dim))
        n -= r_l
    return tuple(out)


def count_flops(cfg: ViTConfig, r: int = 0) -> FlopsReport:
    """Cost of one image; raises ``ScheduleError`` if ``r`` is not schedulable."""
    patch = cfg.num_patches * cfg.patch_dim * cfg.hidden_dim
    head = cfg.hidden_dim * cfg.num_classes
    layers = _layers(cfg, r)
    base = patch + head + sum(c.total for c in _layers(cfg, 0))
    return FlopsReport(cfg, r, layers, patch, head, base)
