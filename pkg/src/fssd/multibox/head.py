"""Per-level 3x3 convolutional predictors."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from ..tensor_core import Tensor, functional as F
from ..tensor_core.layers import Conv2d, Module


class MultiboxHead(Module):
    def __init__(
        self,
        level_channels: Sequence[int],
        priors_per_loc: Sequence[int],
        num_classes: int,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        super().__init__()
        if len(level_channels) != len(priors_per_loc):
            raise ValueError("one anchor count per pyramid level is required")
        self.num_classes = num_classes
        self.priors_per_loc = tuple(priors_per_loc)
        self.loc = [Conv2d(c, 4 * a, 3, rng, dtype=dtype) for c, a in zip(level_channels, priors_per_loc)]
        self.conf = [Conv2d(c, num_classes * a, 3, rng, dtype=dtype) for c, a in zip(level_channels, priors_per_loc)]

    def __call__(self, pyramid: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
        return multibox_head(pyramid, self)


def multibox_head(pyramid: Sequence[Tensor], head: MultiboxHead) -> Tuple[Tensor, Tensor]:
    """Return loc (N, P, 4) and conf (N, P, classes) in (level, row, col, anchor) order."""
    if len(pyramid) != len(head.loc):
        raise ValueError(f"head has {len(head.loc)} levels, pyramid has {len(pyramid)}")
    locs: List[Tensor] = []
    confs: List[Tensor] = []
    for x, loc_conv, conf_conv in zip(pyramid, head.loc, head.conf):
        if x.shape[1] != loc_conv.weight.shape[1]:
            raise ValueError(f"level with {x.shape[1]} channels feeds a head expecting {loc_conv.weight.shape[1]}")
        locs.append(F.channels_last_rows(loc_conv(x), 4))
        confs.append(F.channels_last_rows(conf_conv(x), head.num_classes))
    return F.concat(locs, axis=1), F.concat(confs, axis=1)
