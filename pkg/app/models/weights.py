"""
Named parameter snapshots.

NetworkWeights is the unit of transfer between pipeline stages and of
checkpointing. Names follow the torch state-dict scheme with a component
prefix (``encoder.``, ``projector.``, ``predictor.``, ``decoder.``,
``segmentation_head.``), so independently constructed networks can be
compared and transferred name by name.
"""

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class NetworkWeights:
    """
    Immutable snapshot of a network's named tensors.

    Attributes:
        params: Ordered map from canonical name to tensor (parameters and
            batch-norm buffers).
        meta: Provenance tags: ``encoder`` (EncoderConfig dump),
            ``input_channels``, ``stage``, ``epoch``, ``seed``.
    """

    params: "OrderedDict[str, torch.Tensor]"
    meta: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str, meta: Dict[str, Any]) -> "NetworkWeights":
        """Snapshot a module's state dict under a name prefix."""
        params = OrderedDict(
            (f"{prefix}{name}", tensor.detach().clone())
            for name, tensor in module.state_dict().items()
        )
        return cls(params=params, meta=dict(meta))

    def subset(self, prefix: str) -> "NetworkWeights":
        """Entries whose name starts with ``prefix`` (names kept)."""
        params = OrderedDict((k, v) for k, v in self.params.items() if k.startswith(prefix))
        return NetworkWeights(params=params, meta=dict(self.meta))

    def state_dict_for(self, prefix: str) -> "OrderedDict[str, torch.Tensor]":
        """Entries under ``prefix`` with the prefix stripped, for ``load_state_dict``."""
        return OrderedDict(
            (k[len(prefix):], v.clone()) for k, v in self.params.items() if k.startswith(prefix)
        )

    def with_meta(self, **updates: Any) -> "NetworkWeights":
        meta = dict(self.meta)
        meta.update(updates)
        return NetworkWeights(params=OrderedDict(self.params), meta=meta)

    @property
    def names(self) -> List[str]:
        return list(self.params)

    @property
    def input_channels(self) -> int:
        return int(self.meta.get("input_channels", 1))

    def n_parameters(self, prefix: str = "") -> int:
        """Count of floating-point parameter entries (buffers included)."""
        return sum(
            v.numel() for k, v in self.params.items()
            if k.startswith(prefix) and v.is_floating_point() and "running_" not in k
        )

    def is_finite(self) -> bool:
        return all(
            bool(torch.isfinite(v).all()) for v in self.params.values() if v.is_floating_point()
        )

    def equals(self, other: "NetworkWeights", names: Iterable[str] = None) -> bool:
        """Bit-exact comparison on ``names`` (default: all names of both)."""
        if names is None:
            if list(self.params) != list(other.params):
                return False
            names = self.params
        return all(torch.equal(self.params[n], other.params[n]) for n in names)

    def digest(self) -> str:
        """sha256 over names, dtypes, shapes and raw bytes, in order."""
        hasher = hashlib.sha256()
        for name, tensor in self.params.items():
            array = np.ascontiguousarray(tensor.detach().cpu().numpy())
            hasher.update(name.encode("utf-8"))
            hasher.update(str(array.dtype).encode("utf-8"))
            hasher.update(str(tuple(array.shape)).encode("utf-8"))
            hasher.update(array.tobytes())
        return hasher.hexdigest()
