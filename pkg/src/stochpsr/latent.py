"""Autodecoder extension: per-scan latent codes, corpus training, code inference and NLL scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import NormalizationTransform, OrientedPointCloud, RunConfig, normalize_cloud
from .errors import DegenerateInput, InvalidConfig
from .field import DTYPE, make_pair
from .queries import StochasticImplicit
from .training import STREAM_INFER, STREAM_TRAIN, Trainer, _freeze, fine_tune

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(eq=False)
class LatentTable:
    """One code per training scan, rows of a ``(scans, width)`` tensor."""

    codes: torch.Tensor
    code_init_sigma: float = 0.01

    def __post_init__(self):
        if self.codes.ndim != 2:
            raise InvalidConfig("latent table must be a (scans, width) matrix")
        if not torch.isfinite(self.codes).all():
            raise InvalidConfig("latent codes must be finite")

    @property
    def n(self):
        return self.codes.shape[0]

    @property
    def width(self):
        return self.codes.shape[1]

    def __getitem__(self, k):
        return self.codes[k].detach().clone()

    @classmethod
    def initial(cls, scans, width, sigma, seed):
        gen = torch.Generator().manual_seed(int(seed) % (2**63))
        codes = sigma * torch.randn(scans, width, generator=gen, dtype=DTYPE)
        return cls(codes, sigma)


@dataclass(eq=False)
class CorpusModel:
    """Shared networks trained over a scan corpus plus the learned codes."""

    mean_net: object
    cov_net: object
    table: LatentTable
    transform: NormalizationTransform
    config: RunConfig
    scans: list
    history: list = field(default_factory=list)

    @property
    def d(self):
        return self.transform.d

    def implicit_for_code(self, z, cloud=None) -> StochasticImplicit:
        """The shared networks specialized to code ``z`` (``cloud`` in the normalized frame)."""
        z = torch.as_tensor(np.asarray(z, dtype=np.float64)).detach().clone()
        cloud = cloud if cloud is not None else self.scans[0]
        return StochasticImplicit(self.mean_net, self.cov_net, self.transform, self.config, cloud, code=z,
                                  latent_table=self.table.codes.detach().clone(), history=list(self.history))

    def implicit_for(self, k) -> StochasticImplicit:
        return self.implicit_for_code(self.table[k], self.scans[k])

    @classmethod
    def from_implicit(cls, implicit: StochasticImplicit):
        if implicit.latent_table is None:
            raise InvalidConfig("checkpoint carries no latent table")
        table = LatentTable(implicit.latent_table.clone(), implicit.config.code_init_sigma)
        return cls(implicit.mean_net, implicit.cov_net, table, implicit.transform, implicit.config,
                   [implicit.cloud], list(implicit.history))


def shared_transform(scans):
    """One normalization for every scan: the unit-cube map of their union."""
    merged = scans[0]
    for s in scans[1:]:
        merged = merged.merge(s)
    return normalize_cloud(merged)[1]


def train_corpus(scans, config: RunConfig, transform=None, callback=None) -> CorpusModel:
    """Jointly fit shared networks and one latent code per scan (world-frame scans)."""
    scans = list(scans)
    if not scans:
        raise DegenerateInput("empty scan corpus")
    d = scans[0].d
    if any(s.d != d for s in scans):
        raise DegenerateInput("scans differ in dimension")
    if config.latent_width < 1:
        raise InvalidConfig("latent_width must be positive for corpus training")
    torch.set_num_threads(config.threads)
    config = config.replace(d=d)
    transform = transform or shared_transform(scans)
    scans_n = [transform.apply_cloud(s) for s in scans]
    mean_net, cov_net = make_pair(d, config.hidden_width, config.depth, config.omega0, config.latent_width,
                                  seed=config.seed)
    table = LatentTable.initial(len(scans), config.latent_width, config.code_init_sigma, config.seed + 1)
    codes = table.codes.requires_grad_(True)
    trainer = Trainer(mean_net, cov_net, config, codes=codes)
    history = trainer.fit(scans_n, config.epochs, STREAM_TRAIN, callback=callback)
    _freeze(mean_net, cov_net)
    table = LatentTable(codes.detach().clone(), config.code_init_sigma)
    return CorpusModel(mean_net, cov_net, table, transform, config, scans_n, history)


def infer_code(model: CorpusModel, scan: OrientedPointCloud, iters=None, config: RunConfig | None = None,
               finetune_epochs=0):
    """Fit a code for a new world-frame scan with the networks frozen.

    Each iteration draws one batch of fresh data and takes one Adam step per
    loss component on the code alone.  Returns ``(code, implicit)``; with
    ``finetune_epochs > 0`` the specialized implicit is then briefly fine-tuned
    (weights unfrozen, code fixed).
    """
    config = (config or model.config).replace(d=model.d)
    iters = config.infer_iters if iters is None else int(iters)
    if iters < 0:
        raise InvalidConfig("iters must be >= 0")
    torch.set_num_threads(config.threads)
    scan_n = model.transform.apply_cloud(scan)
    gen = torch.Generator().manual_seed(int(config.seed) % (2**63))
    z = (config.code_init_sigma * torch.randn(1, model.table.width, generator=gen, dtype=DTYPE))
    z.requires_grad_(True)
    before = [p.detach().clone() for p in list(model.mean_net.parameters()) + list(model.cov_net.parameters())]
    batch_cfg = config.replace(samples_per_epoch=config.batch_size)
    trainer = Trainer(model.mean_net, model.cov_net, batch_cfg, codes=z, train_nets=False,
                      lr=config.latent_learning_rate)
    trainer.fit(scan_n, iters, STREAM_INFER)
    after = list(model.mean_net.parameters()) + list(model.cov_net.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, after)), "frozen weights changed"
    code = z.detach()[0].clone()
    implicit = model.implicit_for_code(code, scan_n)
    implicit.config = config
    if finetune_epochs > 0:
        implicit = implicit.copy()
        implicit = fine_tune(implicit, None, config, finetune_epochs)
    return code, implicit


def nll_terms(mean, variance):
    """Per-point ``-log N(0; mean, variance)``."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.maximum(np.asarray(variance, dtype=np.float64), np.finfo(np.float64).tiny)
    return 0.5 * (mean * mean / var + np.log(var) + _LOG_2PI)


def cloud_nll(implicit, cloud) -> float:
    """Mean negative log density of observing a zero field value at each point of ``cloud`` (world frame)."""
    pts = cloud.points if isinstance(cloud, OrientedPointCloud) else np.asarray(cloud, dtype=np.float64)
    return float(nll_terms(implicit.mean(pts), implicit.variance(pts)).mean())
