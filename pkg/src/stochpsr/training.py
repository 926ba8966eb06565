"""Dirichlet and screening losses, per-epoch data, and the Adam training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import OrientedPointCloud, RunConfig, loose_box, normalize_cloud
from .errors import TrainingDiverged
from .field import make_pair
from .gp import SmearKernel, assemble_posterior, sample_box
from .queries import StochasticImplicit, save_implicit

log = logging.getLogger(__name__)

COMPONENTS = ("dirichlet_mean", "dirichlet_cov", "screen_mean", "screen_cov")


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with decoupled weight decay.

    Each parameter keeps its own step count, so parameters that receive no
    gradient in a step (the other network, or frozen weights) are left alone.
    """

    def __init__(self, params, lr=1e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {id(p): {"t": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)} for p in self.params}

    @torch.no_grad()
    def step(self, grads=None):
        """Update every parameter with a gradient (``p.grad`` unless ``grads`` maps id -> tensor)."""
        for p in self.params:
            g = p.grad if grads is None else grads.get(id(p))
            if g is None:
                continue
            st = self.state[id(p)]
            st["t"] += 1
            t = st["t"]
            st["m"].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            st["v"].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            m_hat = st["m"] / (1 - self.beta1**t)
            v_hat = st["v"] / (1 - self.beta2**t)
            p.mul_(1 - self.lr * self.weight_decay)
            p.sub_(self.lr * m_hat / (v_hat.sqrt() + self.eps))


@dataclass
class TrainState:
    optimizer: Adam
    step: int = 0
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses


def dirichlet_mean_loss(x, mu, mean_net, box_volume, z=None):
    """``|B|/b * sum ||mu_i - grad g(x_i)||^2``."""
    grad = mean_net.value_and_grad(x, z).grad
    return box_volume / x.shape[0] * ((mu - grad) ** 2).sum()


def dirichlet_cov_loss(x1, x2, sigma, cov_net, box_volume, z=None):
    """``|B|^2/b * sum ||sigma_ij I - D c(x_i, x_j)||_F^2`` over sampled pairs."""
    D = cov_net.mixed(x1, x2, z).mixed
    eye = torch.eye(D.shape[-1], dtype=D.dtype)
    resid = sigma[:, None, None] * eye - D
    return box_volume**2 / x1.shape[0] * (resid**2).sum()


def screen_mean_loss(p, mean_net, z=None):
    return (mean_net(p, z=z) ** 2).mean()


def screen_cov_loss(p, cov_net, z=None):
    return (cov_net(p, p, z=z) ** 2).mean()


def screen_losses(p, mean_net, cov_net, z=None):
    return screen_mean_loss(p, mean_net, z), screen_cov_loss(p, cov_net, z)


def combine(components, lambda_screen):
    c = components
    return c["dirichlet_mean"] + c["dirichlet_cov"] + lambda_screen * (c["screen_mean"] + c["screen_cov"])


# ---------------------------------------------------------------------------
# per-epoch data


@dataclass(eq=False)
class EpochData:
    """Four datasets for one epoch, all in normalized coordinates.

    ``*_scan`` arrays give the scan (latent code) index of every entry; they
    are all zero for single-cloud training.
    """

    mean_x: np.ndarray
    mean_target: np.ndarray
    mean_scan: np.ndarray
    cov_x1: np.ndarray
    cov_x2: np.ndarray
    cov_target: np.ndarray
    cov_scan: np.ndarray
    screen_mean_p: np.ndarray
    screen_mean_scan: np.ndarray
    screen_cov_p: np.ndarray
    screen_cov_scan: np.ndarray

    def __len__(self):
        return len(self.mean_x)


def _split(total, parts):
    base, rem = divmod(total, parts)
    return [base + (1 if k < rem else 0) for k in range(parts)]


def _draw_points(n_cloud, count, rng):
    """``count`` indices into a cloud: whole permutations, with repetition if needed."""
    reps = -(-count // n_cloud)
    idx = np.concatenate([rng.permutation(n_cloud) for _ in range(reps)])
    return idx[:count]


def build_epoch_data(clouds, config: RunConfig, rng) -> EpochData:
    """Fresh datasets for one epoch from one or several normalized clouds.

    ``samples_per_epoch`` entries per dataset are split evenly across clouds.
    """
    if isinstance(clouds, OrientedPointCloud):
        clouds = [clouds]
    d = clouds[0].d
    box = loose_box(d, config.box_margin)
    kernel = SmearKernel(config.kernel_sigma, d)
    parts = {k: [] for k in EpochData.__dataclass_fields__}
    for scan, (cloud, count) in enumerate(zip(clouds, _split(config.samples_per_epoch, len(clouds)))):
        if count == 0:
            continue
        if config.sample_at_points:
            samples = cloud.points[_draw_points(cloud.n, 2 * count, rng)]
        else:
            samples = sample_box(box, 2 * count, rng)
        post = assemble_posterior(cloud, samples, kernel)
        mean_idx = np.arange(count)
        parts["mean_x"].append(samples[mean_idx])
        parts["mean_target"].append(post.mean_vectors[mean_idx])
        # covariance pairs: uniform i.i.d. over the second half of the samples
        i = count + rng.integers(0, count, size=count)
        j = count + rng.integers(0, count, size=count)
        n_diag = int(round(config.diag_pair_fraction * count))
        j[:n_diag] = i[:n_diag]
        parts["cov_x1"].append(samples[i])
        parts["cov_x2"].append(samples[j])
        parts["cov_target"].append(post.cov_entries(i, j))
        parts["screen_mean_p"].append(cloud.points[_draw_points(cloud.n, count, rng)])
        parts["screen_cov_p"].append(cloud.points[_draw_points(cloud.n, count, rng)])
        for key in ("mean_scan", "cov_scan", "screen_mean_scan", "screen_cov_scan"):
            parts[key].append(np.full(count, scan, dtype=np.int64))
    data = {k: np.concatenate(v) for k, v in parts.items()}
    # shuffle each dataset so batches mix scans
    for keys in (("mean_x", "mean_target", "mean_scan"), ("cov_x1", "cov_x2", "cov_target", "cov_scan"),
                 ("screen_mean_p", "screen_mean_scan"), ("screen_cov_p", "screen_cov_scan")):
        perm = rng.permutation(len(data[keys[0]]))
        for k in keys:
            data[k] = data[k][perm]
    return EpochData(**data)


# ---------------------------------------------------------------------------
# training loop


def epoch_rng(seed, stream, epoch):
    return np.random.default_rng([int(seed), int(stream), int(epoch)])


class Trainer:
    """Runs epochs over a mean/covariance pair, optionally with latent codes.

    ``codes`` is a ``(scans, width)`` leaf tensor or ``None``.  Setting
    ``train_nets=False`` freezes the network weights (test-time code fitting);
    ``train_codes=False`` holds the codes fixed.
    """

    def __init__(self, mean_net, cov_net, config: RunConfig, codes=None, train_nets=True, lr=None,
                 train_codes=True):
        self.mean_net = mean_net
        self.cov_net = cov_net
        self.config = config
        self.codes = codes
        self.train_nets = train_nets
        self.train_codes = codes is not None and train_codes
        params = []
        if train_nets:
            params += list(mean_net.parameters()) + list(cov_net.parameters())
        if self.train_codes:
            params.append(codes)
        for p in list(mean_net.parameters()) + list(cov_net.parameters()):
            p.requires_grad_(train_nets)
        wd = config.weight_decay if train_nets else 0.0
        self.state = TrainState(Adam(params, lr=lr if lr is not None else config.learning_rate, weight_decay=wd))
        self.box_volume = loose_box(config.d, config.box_margin).volume

    def _z(self, scan_idx):
        return None if self.codes is None else self.codes[torch.from_numpy(scan_idx)]

    def batch_loss(self, kind, data: EpochData, sl):
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a[sl]))
        if kind == "dirichlet_mean":
            return dirichlet_mean_loss(t(data.mean_x), t(data.mean_target), self.mean_net, self.box_volume,
                                       self._z(data.mean_scan[sl]))
        if kind == "dirichlet_cov":
            return dirichlet_cov_loss(t(data.cov_x1), t(data.cov_x2), t(data.cov_target), self.cov_net,
                                      self.box_volume, self._z(data.cov_scan[sl]))
        if kind == "screen_mean":
            return screen_mean_loss(t(data.screen_mean_p), self.mean_net, self._z(data.screen_mean_scan[sl]))
        return screen_cov_loss(t(data.screen_cov_p), self.cov_net, self._z(data.screen_cov_scan[sl]))

    def _params_for(self, kind):
        params = []
        if self.train_nets:
            net = self.mean_net if kind in ("dirichlet_mean", "screen_mean") else self.cov_net
            params += list(net.parameters())
        if self.train_codes:
            params.append(self.codes)
        return params

    def run_epoch(self, data: EpochData):
        """One pass: batches rotate mean, cov, mean-screen, cov-screen, one Adam step each."""
        cfg = self.config
        bs = cfg.batch_size
        n_batches = -(-len(data) // bs)
        sums = dict.fromkeys(COMPONENTS, 0.0)
        for r in range(n_batches):
            sl = slice(r * bs, min((r + 1) * bs, len(data)))
            for kind in COMPONENTS:
                loss = self.batch_loss(kind, data, sl)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite {kind} loss at step {self.state.step}")
                sums[kind] += value
                weight = cfg.lambda_screen if kind.startswith("screen") else 1.0
                params = self._params_for(kind)
                if weight == 0.0 or not params:
                    continue
                grads = torch.autograd.grad(weight * loss, params, allow_unused=True)
                self.state.optimizer.step({id(p): g for p, g in zip(params, grads) if g is not None})
                self.state.step += 1
        comps = {k: v / n_batches for k, v in sums.items()}
        comps["total"] = combine(comps, cfg.lambda_screen)
        return comps

    def snapshot(self):
        snap = {"mean": {k: v.clone() for k, v in self.mean_net.state_dict().items()},
                "cov": {k: v.clone() for k, v in self.cov_net.state_dict().items()}}
        if self.codes is not None:
            snap["codes"] = self.codes.detach().clone()
        return snap

    def fit(self, clouds, epochs, stream, start_epoch=0, callback=None):
        history = []
        for epoch in range(start_epoch, start_epoch + epochs):
            good = self.snapshot()
            data = build_epoch_data(clouds, self.config, epoch_rng(self.config.seed, stream, epoch))
            try:
                comps = self.run_epoch(data)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), last_good=good, epoch=epoch) from None
            comps["epoch"] = epoch
            history.append(comps)
            self.state.history.append(comps)
            log.info("epoch %d: " + " ".join(f"{k}=%.6g" for k in COMPONENTS) + " total=%.6g", epoch,
                     *(comps[k] for k in COMPONENTS), comps["total"])
            if callback is not None:
                callback(epoch, comps)
        return history


# stream ids keep pretraining, fine-tuning and evaluation draws independent
STREAM_TRAIN, STREAM_FINETUNE, STREAM_EVAL, STREAM_INFER = 1, 2, 3, 4


def _prepare(cloud, config, transform):
    if transform is None:
        cloud_n, transform = normalize_cloud(cloud)
    else:
        cloud_n = transform.apply_cloud(cloud)
    return cloud_n, transform, config.replace(d=cloud.d)


def train(cloud: OrientedPointCloud, config: RunConfig, transform=None, callback=None,
          checkpoint_dir=None) -> StochasticImplicit:
    """Train mean and covariance fields on a world-space cloud.

    The cloud is normalized to the unit cube unless ``transform`` is given.
    With ``checkpoint_dir`` and ``config.checkpoint_every > 0`` a checkpoint is
    written every that many epochs.
    """
    torch.set_num_threads(config.threads)
    cloud_n, transform, config = _prepare(cloud, config, transform)
    mean_net, cov_net = make_pair(cloud.d, config.hidden_width, config.depth, config.omega0, seed=config.seed)
    trainer = Trainer(mean_net, cov_net, config)

    def on_epoch(epoch, comps):
        every = config.checkpoint_every
        if checkpoint_dir is not None and every > 0 and (epoch + 1) % every == 0:
            snap = StochasticImplicit(mean_net, cov_net, transform, config, cloud_n,
                                      history=list(trainer.state.history))
            save_implicit(snap, Path(checkpoint_dir) / f"epoch{epoch + 1:05d}.nssi")
        if callback is not None:
            callback(epoch, comps)

    history = trainer.fit(cloud_n, config.epochs, STREAM_TRAIN, callback=on_epoch)
    _freeze(mean_net, cov_net)
    return StochasticImplicit(mean_net, cov_net, transform, config, cloud_n, history=history)


def _freeze(*nets):
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(False)


def fine_tune(implicit: StochasticImplicit, new_points: OrientedPointCloud | None, config: RunConfig | None = None,
              epochs: int | None = None, callback=None) -> StochasticImplicit:
    """Warm-started training on the old cloud merged with ``new_points`` (world frame)."""
    config = (config or implicit.config).replace(d=implicit.d)
    epochs = config.finetune_epochs if epochs is None else epochs
    torch.set_num_threads(config.threads)
    out = implicit.copy()
    out.config = config
    if new_points is not None and new_points.n:
        out.cloud = implicit.cloud.merge(implicit.transform.apply_cloud(new_points))
    if epochs == 0:
        return out
    codes = None if out.code is None else out.code.detach().reshape(1, -1)
    trainer = Trainer(out.mean_net, out.cov_net, config, codes=codes, train_codes=False)
    start = len(implicit.history)
    history = trainer.fit(out.cloud, epochs, STREAM_FINETUNE, start_epoch=start, callback=callback)
    _freeze(out.mean_net, out.cov_net)
    out.history = list(implicit.history) + history
    return out


def evaluate_losses(implicit: StochasticImplicit, samples=None, seed=0, sample_at_points=False, cloud=None):
    """Loss components on a fresh draw of data (no parameter updates).

    Defaults to ``samples_per_epoch`` uniform box samples against the
    implicit's own cloud; ``cloud`` (normalized frame) overrides the data source.
    """
    cfg = implicit.config.replace(sample_at_points=sample_at_points)
    if samples is not None:
        cfg = cfg.replace(samples_per_epoch=int(samples))
    data = build_epoch_data(cloud if cloud is not None else implicit.cloud, cfg, epoch_rng(seed, STREAM_EVAL, 0))
    box_volume = implicit.box.volume
    z = implicit.code
    t = torch.from_numpy
    sums = dict.fromkeys(COMPONENTS, 0.0)
    bs = cfg.batch_size
    n = len(data)
    with torch.enable_grad():
        for k in range(0, n, bs):
            sl = slice(k, min(k + bs, n))
            w = (sl.stop - sl.start) / n
            sums["dirichlet_mean"] += w * float(dirichlet_mean_loss(t(data.mean_x[sl]), t(data.mean_target[sl]),
                                                                   implicit.mean_net, box_volume, z))
            sums["dirichlet_cov"] += w * float(dirichlet_cov_loss(t(data.cov_x1[sl]), t(data.cov_x2[sl]),
                                                                  t(data.cov_target[sl]), implicit.cov_net,
                                                                  box_volume, z))
            sm = screen_mean_loss(t(data.screen_mean_p[sl]), implicit.mean_net, z)
            sc = screen_cov_loss(t(data.screen_cov_p[sl]), implicit.cov_net, z)
            sums["screen_mean"] += w * float(sm)
            sums["screen_cov"] += w * float(sc)
    sums["total"] = combine(sums, cfg.lambda_screen)
    return sums


def write_loss_csv(history, path):
    with open(path, "w") as fh:
        fh.write("epoch," + ",".join(COMPONENTS) + ",total\n")
        for row in history:
            fh.write(f"{row['epoch']}," + ",".join(repr(float(row[k])) for k in COMPONENTS)
                     + f",{float(row['total'])!r}\n")
