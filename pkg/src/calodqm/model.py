"""Spatio-temporal autoencoder: CNN+GNN spatial encoder per time step,
LSTM temporal stage, variational bottleneck, LSTM+deconvolution decoder.

Every parameter and BN running buffer is exposed under the canonical
name grammar from :mod:`calodqm.core`, which is what makes checkpoint
surgery (copying and freezing by block prefix) possible.  The two
geometry-dependent tensors are ``encoder.fc.0.weight`` (post-flatten
fusion) and ``decoder.fc.2.weight`` (pre-deconvolution projection,
bias-free); everything else is shape-identical across geometries.

The conv stack downsamples by 4 per layer so the flatten stays small:
the recurrent stage then holds the bulk of the parameters, which is what
makes freezing the spatio-temporal blocks cut the trainable count by an
order of magnitude.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ParameterStore
from .preprocess import GraphTopology


@dataclass
class ModelSpec:
    n_ieta: int
    n_iphi: int
    n_depth: int
    T: int = 5
    cnn_channels: tuple[int, int] = (16, 32)
    gnn_hidden: int = 32
    gnn_layers: int = 2
    embed_dim: int = 128
    rnn_hidden: int = 512
    latent_dim: int = 32

    @property
    def k_depth(self) -> int:
        return min(2, self.n_depth)

    def conv_sizes(self) -> list[tuple[int, int]]:
        """(ieta, iphi) spatial size after each of the two conv layers."""
        s = (self.n_ieta, self.n_iphi)
        sizes = []
        for _ in range(2):
            s = (math.ceil(s[0] / 4), math.ceil(s[1] / 4))
            sizes.append(s)
        return sizes

    @property
    def flat_dim(self) -> int:
        h = self.conv_sizes()[-1]
        return self.cnn_channels[1] * h[0] * h[1] * self.n_depth

    def to_json(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["cnn_channels"] = tuple(d["cnn_channels"])
        return cls(**d)


@dataclass
class RnnState:
    """Hidden and cell state for the encoder and decoder LSTMs."""

    enc: tuple[torch.Tensor, torch.Tensor]
    dec: tuple[torch.Tensor, torch.Tensor]

    def detach(self) -> "RnnState":
        return RnnState(
            tuple(t.detach() for t in self.enc),
            tuple(t.detach() for t in self.dec),
        )


@dataclass
class LossParts:
    total: torch.Tensor
    mse: torch.Tensor
    kl: torch.Tensor
    l2: torch.Tensor


class ActivationFault(RuntimeError):
    """Non-finite activation, annotated with the stage that produced it."""


def _check_finite(t: torch.Tensor, stage: str) -> None:
    if not torch.isfinite(t).all():
        raise ActivationFault(f"non-finite activation after {stage}")


def _init_uniform_fanin(tensor: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=gen)


class _GraphConv(nn.Module):
    """Graph convolution over the RBX block graph.

    With all-ones adjacency blocks (self loops included) the
    symmetric-degree-normalized propagation reduces exactly to the
    per-block mean, so propagation is done by block pooling instead of a
    dense MxM product.
    """

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.linear = nn.Linear(in_features, out_features)

    def forward(self, h, member, inv_sizes):
        pooled = torch.matmul(member, h) * inv_sizes.unsqueeze(-1)
        prop = torch.matmul(member.transpose(0, 1), pooled)
        return F.relu(self.linear(prop))


class STAutoencoder(nn.Module):
    """The full autoencoder with canonical parameter naming."""

    def __init__(
        self,
        spec: ModelSpec,
        topo: GraphTopology,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.spec = spec
        c1, c2 = spec.cnn_channels
        kd = spec.k_depth

        self.enc_conv1 = nn.Conv3d(1, c1, (5, 5, kd), stride=(4, 4, 1), padding=(2, 2, 0))
        self.enc_bn1 = nn.BatchNorm3d(c1)
        self.enc_conv2 = nn.Conv3d(c1, c2, (5, 5, kd), stride=(4, 4, 1), padding=(2, 2, 0))
        self.enc_bn2 = nn.BatchNorm3d(c2)

        gnn_dims = [1] + [spec.gnn_hidden] * spec.gnn_layers
        self.gnn = nn.ModuleList(
            _GraphConv(gnn_dims[i], gnn_dims[i + 1]) for i in range(spec.gnn_layers)
        )

        self.enc_fuse = nn.Linear(spec.flat_dim + spec.gnn_hidden, spec.embed_dim)
        self.enc_rnn = nn.LSTM(spec.embed_dim, spec.rnn_hidden, batch_first=True)
        self.vae_mu = nn.Linear(spec.rnn_hidden, spec.latent_dim)
        self.vae_logvar = nn.Linear(spec.rnn_hidden, spec.latent_dim)

        self.dec_in = nn.Linear(spec.latent_dim, spec.rnn_hidden)
        self.dec_rnn = nn.LSTM(spec.rnn_hidden, spec.rnn_hidden, batch_first=True)
        self.dec_mid = nn.Linear(spec.rnn_hidden, spec.embed_dim)
        self.dec_out = nn.Linear(spec.embed_dim, spec.flat_dim, bias=False)
        self.dec_conv1 = nn.ConvTranspose3d(
            c2, c1, (5, 5, kd), stride=(4, 4, 1), padding=(2, 2, 0), output_padding=(3, 3, 0)
        )
        self.dec_bn1 = nn.BatchNorm3d(c1)
        self.dec_conv2 = nn.ConvTranspose3d(
            c1, 1, (5, 5, kd), stride=(4, 4, 1), padding=(2, 2, 0), output_padding=(3, 3, 0)
        )

        # graph structure buffers (not part of the parameter store)
        member = torch.zeros(topo.n_blocks, topo.n_nodes)
        member[topo.block_of, torch.arange(topo.n_nodes)] = 1.0
        sizes = member.sum(dim=1).clamp(min=1.0)
        self.register_buffer("gnn_member", member)
        self.register_buffer("gnn_inv_sizes", 1.0 / sizes)
        bins = torch.as_tensor(topo.node_bins)
        flat_idx = (
            bins[:, 0] * spec.n_iphi * spec.n_depth + bins[:, 1] * spec.n_depth + bins[:, 2]
        )
        self.register_buffer("node_flat_idx", flat_idx)

        self._param_map = self._build_param_map()
        self._bn_blocks = {
            "encoder.cnn.0": self.enc_bn1,
            "encoder.cnn.1": self.enc_bn2,
            "decoder.cnn.0": self.dec_bn1,
        }
        self._reset_parameters(seed)
        if dtype != torch.float32:
            self.to(dtype)
        self._dtype = dtype

    # ------------------------------------------------------------------
    # parameter naming

    def _build_param_map(self) -> dict[str, torch.Tensor]:
        m: dict[str, torch.Tensor] = {}

        def conv_block(prefix, conv, bn):
            m[f"{prefix}.weight"] = conv.weight
            m[f"{prefix}.bias"] = conv.bias
            if bn is not None:
                m[f"{prefix}.bn_scale"] = bn.weight
                m[f"{prefix}.bn_shift"] = bn.bias
                m[f"{prefix}.bn_running_mean"] = bn.running_mean
                m[f"{prefix}.bn_running_var"] = bn.running_var

        def lstm_block(prefix, lstm):
            m[f"{prefix}.0.weight"] = lstm.weight_ih_l0
            m[f"{prefix}.0.bias"] = lstm.bias_ih_l0
            m[f"{prefix}.1.weight"] = lstm.weight_hh_l0
            m[f"{prefix}.1.bias"] = lstm.bias_hh_l0

        conv_block("encoder.cnn.0", self.enc_conv1, self.enc_bn1)
        conv_block("encoder.cnn.1", self.enc_conv2, self.enc_bn2)
        for i, layer in enumerate(self.gnn):
            m[f"encoder.gnn.{i}.weight"] = layer.linear.weight
            m[f"encoder.gnn.{i}.bias"] = layer.linear.bias
        m["encoder.fc.0.weight"] = self.enc_fuse.weight
        m["encoder.fc.0.bias"] = self.enc_fuse.bias
        lstm_block("encoder.rnn", self.enc_rnn)
        m["encoder.vae.0.weight"] = self.vae_mu.weight
        m["encoder.vae.0.bias"] = self.vae_mu.bias
        m["encoder.vae.1.weight"] = self.vae_logvar.weight
        m["encoder.vae.1.bias"] = self.vae_logvar.bias

        m["decoder.fc.0.weight"] = self.dec_in.weight
        m["decoder.fc.0.bias"] = self.dec_in.bias
        lstm_block("decoder.rnn", self.dec_rnn)
        m["decoder.fc.1.weight"] = self.dec_mid.weight
        m["decoder.fc.1.bias"] = self.dec_mid.bias
        m["decoder.fc.2.weight"] = self.dec_out.weight
        conv_block("decoder.cnn.0", self.dec_conv1, self.dec_bn1)
        conv_block("decoder.cnn.1", self.dec_conv2, None)
        return m

    def param_names(self) -> list[str]:
        return sorted(self._param_map)

    def named_tensor(self, name: str) -> torch.Tensor:
        return self._param_map[name]

    def _reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name in self.param_names():
                t = self._param_map[name]
                kind = name.rsplit(".", 1)[1]
                if kind == "weight":
                    if t.dim() >= 2:
                        fan_in = int(np.prod(t.shape[1:]))
                    else:
                        fan_in = t.shape[0]
                    _init_uniform_fanin(t, fan_in, gen)
                elif kind == "bias":
                    t.zero_()
                elif kind == "bn_scale":
                    t.fill_(1.0)
                elif kind == "bn_shift":
                    t.zero_()
                elif kind == "bn_running_mean":
                    t.zero_()
                elif kind == "bn_running_var":
                    t.fill_(1.0)

    # ------------------------------------------------------------------
    # store interop

    def to_store(self) -> ParameterStore:
        store = ParameterStore()
        for name in self.param_names():
            t = self._param_map[name]
            trainable = isinstance(t, nn.Parameter) and t.requires_grad
            store.add(name, t.detach().cpu().numpy(), trainable)
        return store

    def load_store(self, store: ParameterStore) -> None:
        missing = set(self.param_names()) - set(store.names())
        extra = set(store.names()) - set(self.param_names())
        if missing or extra:
            raise ValueError(f"store does not match model (missing={missing}, extra={extra})")
        with torch.no_grad():
            for name in self.param_names():
                t = self._param_map[name]
                entry = store.get(name)
                if tuple(entry.values.shape) != tuple(t.shape):
                    raise ValueError(f"shape mismatch for {name!r}")
                t.copy_(torch.as_tensor(entry.values, dtype=t.dtype))
        self.apply_trainability(store)

    def apply_trainability(self, store: ParameterStore) -> None:
        for name in self.param_names():
            t = self._param_map[name]
            if isinstance(t, nn.Parameter):
                t.requires_grad_(store.get(name).trainable)

    def bn_stats_modules(self) -> list[tuple[nn.Module, bool]]:
        """(BN module, stats should update) per BN block.

        Running statistics update iff the block's bn_scale is trainable:
        trainable blocks and frozen-with-BN-exception blocks keep
        updating, fully frozen blocks run in inference mode.
        """
        out = []
        for prefix, bn in self._bn_blocks.items():
            scale = self._param_map[f"{prefix}.bn_scale"]
            out.append((bn, bool(scale.requires_grad)))
        return out

    def weight_l2(self) -> torch.Tensor:
        """Sum of squares of trainable weight-kind parameters."""
        total = torch.zeros((), dtype=self._dtype)
        for name, t in self._param_map.items():
            if name.endswith(".weight") and isinstance(t, nn.Parameter) and t.requires_grad:
                total = total + (t.to(self._dtype) ** 2).sum()
        return total

    # ------------------------------------------------------------------
    # forward graph

    def zero_state(self, batch: int) -> RnnState:
        h = self.spec.rnn_hidden
        z = lambda: torch.zeros(1, batch, h, dtype=self._dtype)
        return RnnState(enc=(z(), z()), dec=(z(), z()))

    def _conv_step(self, x):
        kd = self.spec.k_depth
        pad = (0, kd - 1)
        h = F.pad(x, pad)
        h = F.relu(self.enc_bn1(self.enc_conv1(h)))
        h = F.pad(h, pad)
        h = F.relu(self.enc_bn2(self.enc_conv2(h)))
        return h.flatten(1)

    def _gnn_step(self, x_flat_cells):
        h = x_flat_cells[:, self.node_flat_idx].unsqueeze(-1)
        for layer in self.gnn:
            h = layer(h, self.gnn_member, self.gnn_inv_sizes)
        return h.mean(dim=1)

    def encode(self, x: torch.Tensor, state: Optional[RnnState] = None):
        """x: (B, T, n_ieta, n_iphi, n_depth) -> (mu, logvar, enc_state)."""
        B, T = x.shape[:2]
        spec = self.spec
        flat = x.reshape(B * T, 1, spec.n_ieta, spec.n_iphi, spec.n_depth)
        f_cnn = self._conv_step(flat)
        _check_finite(f_cnn, "encoder.cnn")
        f_gnn = self._gnn_step(flat.reshape(B * T, -1))
        _check_finite(f_gnn, "encoder.gnn")
        fused = F.relu(self.enc_fuse(torch.cat([f_cnn, f_gnn], dim=1)))
        seq = fused.reshape(B, T, spec.embed_dim)
        enc_state_in = None if state is None else state.enc
        out, enc_state = self.enc_rnn(seq, enc_state_in)
        _check_finite(out, "encoder.rnn")
        mu = self.vae_mu(out)
        logvar = self.vae_logvar(out)
        _check_finite(mu, "encoder.vae")
        return mu, logvar, enc_state

    def decode(self, z: torch.Tensor, state: Optional[RnnState] = None):
        """z: (B, T, latent) -> (recon, dec_state)."""
        B, T = z.shape[:2]
        spec = self.spec
        seq = F.relu(self.dec_in(z))
        dec_state_in = None if state is None else state.dec
        out, dec_state = self.dec_rnn(seq, dec_state_in)
        _check_finite(out, "decoder.rnn")
        mid = F.relu(self.dec_mid(out.reshape(B * T, spec.rnn_hidden)))
        flat = self.dec_out(mid)
        h2 = self.spec.conv_sizes()[-1]
        h = flat.reshape(B * T, spec.cnn_channels[1], h2[0], h2[1], spec.n_depth)
        s1 = self.spec.conv_sizes()[0]
        h = F.relu(self.dec_bn1(self.dec_conv1(h)))
        h = h[:, :, : s1[0], : s1[1], : spec.n_depth]
        h = self.dec_conv2(h)
        h = h[:, :, : spec.n_ieta, : spec.n_iphi, : spec.n_depth]
        _check_finite(h, "decoder.cnn")
        recon = torch.sigmoid(h).reshape(B, T, spec.n_ieta, spec.n_iphi, spec.n_depth)
        return recon, dec_state

    def forward(
        self,
        x: torch.Tensor,
        state: Optional[RnnState] = None,
        sample: bool = False,
        eps: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ):
        mu, logvar, enc_state = self.encode(x, state)
        if sample:
            if eps is None:
                eps = torch.randn(mu.shape, dtype=mu.dtype, generator=generator)
            z = mu + torch.exp(0.5 * logvar) * eps
        else:
            z = mu
        recon, dec_state = self.decode(z, state)
        return recon, (mu, logvar, z), RnnState(enc=enc_state, dec=dec_state)


def build_model(
    spec: ModelSpec, topo: GraphTopology, seed: int = 0, dtype: torch.dtype = torch.float32
) -> STAutoencoder:
    return STAutoencoder(spec, topo, seed=seed, dtype=dtype)


def compute_loss(
    x: torch.Tensor,
    recon: torch.Tensor,
    mu: torch.Tensor,
    logvar: torch.Tensor,
    model: STAutoencoder,
    valid_mask: torch.Tensor,
    lam: float = 0.003,
    rho: float = 1e-7,
) -> LossParts:
    """Masked MSE plus KL penalty plus L2 on trainable weights.

    MSE averages the per-map (1/M) sum of squared errors over valid
    channels across batch and time.  The KL term is the closed-form
    Gaussian divergence added to the minimized loss.
    """
    mask = valid_mask.to(dtype=x.dtype)
    n_valid = mask.sum()
    sq = ((x - recon) ** 2 * mask).sum(dim=(-3, -2, -1)) / n_valid
    mse = sq.mean()
    kl = (-0.5 * (1.0 + logvar - mu**2 - torch.exp(logvar)).sum(dim=-1)).mean()
    l2 = model.weight_l2()
    total = mse + lam * kl + rho * l2
    return LossParts(total=total, mse=mse, kl=kl, l2=l2)
