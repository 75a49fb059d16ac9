"""Sinusoidal positional encodings for 3D points and timestamps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import posenc_backward, posenc_forward
from .tensor import Tensor, concat


@dataclass(frozen=True)
class PositionalEncoding:
    """Frequency encoding: [x, sin(2^k pi x), cos(2^k pi x)] for k < octaves.

    Identity block comes first, then sin/cos pairs per octave; every block
    spans all input coordinates.
    """

    octaves: int
    include_identity: bool = True

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (1 if self.include_identity else 0) + input_dim * 2 * self.octaves

    def encode(self, x: Tensor) -> Tensor:
        """Tape-path encoding, fused into a single node with analytic backward."""
        out = self.encode_np(x.data)
        if not x.requires_grad:
            return Tensor(out)
        dim = x.data.shape[-1]
        lead = x.data.shape[:-1]
        freqs = self._freqs()
        identity = self.include_identity

        def bwd(g, acc):
            gx = posenc_backward(g.reshape(-1, out.shape[-1]),
                                 out.reshape(-1, out.shape[-1]), freqs, identity, dim)
            acc(x, gx.reshape(lead + (dim,)))

        return Tensor._result(out, (x,), bwd)

    def _freqs(self) -> np.ndarray:
        return np.pi * (2.0 ** np.arange(self.octaves, dtype=np.float64))

    def encode_np(self, x: np.ndarray) -> np.ndarray:
        """Constant-path encoding (no tape)."""
        x = np.asarray(x, dtype=np.float64)
        dim = x.shape[-1]
        lead = x.shape[:-1]
        out = posenc_forward(np.ascontiguousarray(x.reshape(-1, dim)),
                             self._freqs(), self.include_identity)
        return out.reshape(lead + (out.shape[-1],))

    def frequency_damping(self, input_dim: int) -> np.ndarray:
        """Per-column attenuation 2^-k for octave k (identity columns stay 1).

        Applied to first-layer weights at init so high octaves start quiet and
        the learned field is smooth at the numerical-gradient step scale.
        """
        blocks = [np.ones(input_dim)] if self.include_identity else []
        for k in range(self.octaves):
            blocks.extend([np.full(input_dim, 2.0**-k)] * 2)
        return np.concatenate(blocks)


XYZ_ENCODING = PositionalEncoding(octaves=10)  # 3 -> 63
TIME_ENCODING = PositionalEncoding(octaves=6)  # 1 -> 13
