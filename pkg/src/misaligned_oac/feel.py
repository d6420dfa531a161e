"""Federated edge learning rounds over the simulated misaligned channel.

One round: broadcast the global model, train locally on each active
device, send the scaled updates ``B_m (theta_m - theta)`` as complex
packets over the channel, estimate their sum at the server and apply
``theta += theta_plus_hat / sum(B_m)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .channel import SymbolBlock, observe_slot
from .errors import InsufficientData, LengthMismatch, OACError, ZeroSignalPower
from .estimators import estimate
from .model import DeviceProfile, calibrate_n0, validate_geometry

# ---------------------------------------------------------------- packetization


@dataclass(frozen=True)
class PacketPlan:
    d: int
    L: int

    @property
    def n_symbols(self) -> int:
        return (self.d + 1) // 2

    @property
    def packet_count(self) -> int:
        return max(1, math.ceil(self.d / (2 * self.L)))

    @property
    def pad_len(self) -> int:
        return 2 * self.L * self.packet_count - self.d


def encode_update(theta_prime, L: int) -> list:
    """Split a real vector into complex packets of ``L`` symbols.

    The first half of the (even-padded) vector rides on the real parts, the
    second half on the imaginary parts; the last packet is zero-padded.
    """
    theta_prime = np.asarray(theta_prime, dtype=float).ravel()
    if L < 1:
        raise ValueError("packet length must be >= 1")
    plan = PacketPlan(theta_prime.size, L)
    padded = np.zeros(2 * plan.n_symbols)
    padded[: theta_prime.size] = theta_prime
    half = plan.n_symbols
    s = padded[:half] + 1j * padded[half:]
    flat = np.zeros(plan.packet_count * L, dtype=complex)
    flat[:half] = s
    return list(flat.reshape(plan.packet_count, L))


def decode_sum(estimates, d: int) -> np.ndarray:
    """Inverse of :func:`encode_update` applied to the estimated sum packets."""
    flat = np.concatenate([np.asarray(e, dtype=complex).ravel() for e in estimates]) if len(estimates) else np.zeros(0, complex)
    half = (d + 1) // 2
    if flat.size < half:
        raise LengthMismatch(f"{flat.size} symbols cannot carry {d} parameters")
    s = flat[:half]
    return np.concatenate([s.real, s.imag])[:d]


# ---------------------------------------------------------------- data and task


@dataclass(frozen=True)
class LabeledData:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return LabeledData(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class BlobTask:
    """Multinomial logistic regression on labelled Gaussian clusters.

    Class means are drawn once per task seed with norm ``separation``;
    samples add unit-variance isotropic noise.
    """

    features: int = 10
    classes: int = 10
    separation: float = 3.0
    train_size: int = 4000
    test_size: int = 2000
    seed: int = 0

    @property
    def n_params(self) -> int:
        return self.classes * (self.features + 1)

    def means(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0])
        mu = rng.standard_normal((self.classes, self.features))
        return self.separation * mu / np.linalg.norm(mu, axis=1, keepdims=True)

    def _sample(self, n, stream):
        rng = np.random.default_rng([self.seed, stream])
        y = np.arange(n) % self.classes
        rng.shuffle(y)
        x = self.means()[y] + rng.standard_normal((n, self.features))
        return LabeledData(x, y)

    def datasets(self):
        return self._sample(self.train_size, 1), self._sample(self.test_size, 2)

    def init_params(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def _unpack(self, theta):
        C, p = self.classes, self.features
        return theta[: C * p].reshape(C, p), theta[C * p :]

    def logits(self, theta, x):
        W, b = self._unpack(theta)
        return x @ W.T + b

    def gradient(self, theta, x, y):
        """Gradient of the mean cross-entropy."""
        z = self.logits(theta, x)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(y)), y] -= 1.0
        p /= len(y)
        return np.concatenate([(p.T @ x).ravel(), p.sum(axis=0)])

    def accuracy(self, theta, data: LabeledData) -> float:
        with np.errstate(all="ignore"):
            z = self.logits(theta, data.x)
        ok = np.all(np.isfinite(z), axis=1)
        pred = np.argmax(np.where(np.isfinite(z), z, -np.inf), axis=1)
        return float(np.mean(ok & (pred == data.y)))


def local_train(theta, shard: LabeledData, epochs: int, lr: float, *, task: BlobTask, seed=0, batch_size: int = 20):
    """Mini-batch SGD from ``theta`` on one device's data."""
    theta = np.array(theta, dtype=float)
    if epochs <= 0 or lr == 0 or len(shard) == 0:
        return theta
    rng = np.random.default_rng(seed)
    n = len(shard)
    with np.errstate(all="ignore"):
        for _ in range(epochs):
            perm = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = perm[start : start + batch_size]
                theta -= lr * task.gradient(theta, shard.x[idx], shard.y[idx])
    return theta


def partition_shards(labels, M_total: int, random_fraction: float, shard_size=None, seed=0) -> list:
    """Non-iid split: a uniform random part per device plus one label-sorted shard.

    Each device first draws ``floor(random_fraction * N / M_total)`` examples
    uniformly; the rest is sorted by label and cut into ``M_total`` shards of
    ``shard_size`` (default: as large as possible). Examples left over after
    the shards are dealt round-robin so the union is the whole dataset.
    Returns one index array per device.
    """
    labels = np.asarray(getattr(labels, "y", labels))
    N = labels.size
    if M_total < 1:
        raise ValueError("M_total must be >= 1")
    if not 0.0 <= random_fraction <= 1.0:
        raise ValueError("random_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    per_dev = int(random_fraction * N / M_total)
    perm = rng.permutation(N)
    random_part = perm[: per_dev * M_total].reshape(M_total, per_dev)
    rest = perm[per_dev * M_total :]
    rest = rest[np.argsort(labels[rest], kind="stable")]
    if shard_size is None:
        shard_size = rest.size // M_total
    if shard_size * M_total > rest.size:
        raise InsufficientData(
            f"{rest.size} residual examples cannot fill {M_total} shards of {shard_size}"
        )
    if per_dev == 0 and shard_size == 0:
        raise InsufficientData(f"{N} examples cannot be split over {M_total} devices")
    shards = rest[: shard_size * M_total].reshape(M_total, shard_size)
    leftover = rest[shard_size * M_total :]
    out = []
    for m in range(M_total):
        extra = leftover[m::M_total]
        out.append(np.sort(np.concatenate([random_part[m], shards[m], extra])))
    return out


# ---------------------------------------------------------------- channel draws


@dataclass(frozen=True)
class ChannelConfig:
    """Distribution of per-slot impairments.

    Offsets: one device at 0, one at ``tau_max``, the rest uniform in
    between. Phases ``U(0, phi_max)``; amplitudes 1 or ``Rayleigh(amp_sigma)``;
    CFO ``U(-cfo_max, cfo_max)``. ``redraw='run'`` keeps each device's draw
    for the whole run instead of redrawing every slot.
    """

    tau_max: float = 0.0
    phi_max: float = 0.0
    amp_sigma: Optional[float] = None
    cfo_max: float = 0.0
    packet_length: int = 64
    redraw: str = "slot"

    def __post_init__(self):
        if not 0.0 <= self.tau_max < 1.0:
            raise ValueError("tau_max must be in [0, 1)")
        if self.redraw not in ("slot", "run"):
            raise ValueError("redraw must be 'slot' or 'run'")

    def sample_offsets(self, rng, K: int) -> np.ndarray:
        if K == 1:
            return np.zeros(1)
        taus = np.concatenate([[0.0, self.tau_max], rng.uniform(0.0, self.tau_max, K - 2)])
        return rng.permutation(taus)

    def sample(self, rng, dataset_sizes) -> list:
        K = len(dataset_sizes)
        taus = self.sample_offsets(rng, K)
        phases = rng.uniform(0.0, self.phi_max, K)
        amps = np.ones(K) if self.amp_sigma is None else rng.rayleigh(self.amp_sigma, K)
        cfos = rng.uniform(-self.cfo_max, self.cfo_max, K) if self.cfo_max > 0 else np.zeros(K)
        return [
            DeviceProfile(float(taus[m]), float(amps[m]), float(phases[m]), float(cfos[m]), int(dataset_sizes[m]))
            for m in range(K)
        ]


# ---------------------------------------------------------------- rounds


@dataclass
class RoundRecord:
    round: int
    active: tuple
    symbol_mse: float
    test_accuracy: float
    flags: tuple = ()


@dataclass
class FeelState:
    """Global model and device data; ``rng_seed`` plus ``round`` fix all randomness."""

    global_model: np.ndarray
    round: int
    device_shards: list
    rng_seed: int
    history: list = field(default_factory=list)
    persistent_profiles: dict = field(default_factory=dict)

    @property
    def dataset_sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.device_shards])


@dataclass(frozen=True)
class FeelSetup:
    task: BlobTask
    train: LabeledData
    test: LabeledData
    channel: ChannelConfig
    epochs: int = 1
    lr: float = 0.1
    batch_size: int = 20


def init_state(setup: FeelSetup, n_devices: int, *, random_fraction=0.8, shard_size=None, seed=0) -> FeelState:
    parts = partition_shards(setup.train.y, n_devices, random_fraction, shard_size, seed=[seed, 1])
    return FeelState(setup.task.init_params(), 0, [setup.train.subset(p) for p in parts], seed)


def _seed(rng) -> int:
    return int(rng.integers(0, 2**63 - 1))


def _profiles(state, setup, rng, active, sizes):
    if setup.channel.redraw == "slot":
        return setup.channel.sample(rng, sizes)
    out = []
    for dev, B in zip(active, sizes):
        if dev not in state.persistent_profiles:
            drng = np.random.default_rng([state.rng_seed, 2, int(dev)])
            p = setup.channel.sample(drng, [B])[0]
            p = replace(p, tau=float(drng.uniform(0.0, setup.channel.tau_max)))
            state.persistent_profiles[dev] = p
        out.append(replace(state.persistent_profiles[dev], dataset_size=int(B)))
    return out


def run_round(state: FeelState, setup: FeelSetup, estimator_id: str, esn0_db: float, k_active: int) -> FeelState:
    """One FEEL iteration; returns the next state with a :class:`RoundRecord` appended."""
    n_dev = len(state.device_shards)
    if not 1 <= k_active <= n_dev:
        raise ValueError(f"k_active={k_active} must be in [1, {n_dev}]")
    rng = np.random.default_rng([state.rng_seed, 3, state.round])
    sel_rng, train_rng, chan_rng = rng.spawn(3)
    theta = state.global_model
    active = np.sort(sel_rng.choice(n_dev, size=k_active, replace=False))
    sizes = state.dataset_sizes[active]
    flags = set()

    if not np.all(np.isfinite(theta)):
        flags.add("diverged")
        new = replace(state, round=state.round + 1, history=list(state.history))
        new.history.append(RoundRecord(state.round, tuple(active), math.nan, setup.task.accuracy(theta, setup.test), tuple(sorted(flags))))
        return new

    updates = []
    for dev, B in zip(active, sizes):
        local = local_train(
            theta, state.device_shards[dev], setup.epochs, setup.lr,
            task=setup.task, seed=_seed(train_rng), batch_size=setup.batch_size,
        )
        updates.append(B * (local - theta))

    L = setup.channel.packet_length
    packets = np.array([encode_update(u, L) for u in updates])  # (K, P, L)
    estimates = []
    sq_err = []
    for p in range(packets.shape[1]):
        profiles = _profiles(state, setup, chan_rng, active, sizes)
        geom = validate_geometry(profiles)
        block = SymbolBlock(packets[:, p, :][list(geom.order)])
        try:
            n0 = calibrate_n0(geom, block, esn0_db)
        except ZeroSignalPower:
            n0 = 0.0
            flags.add("zero_power_packet")
        obs = observe_slot(geom, block, n0=n0, seed=_seed(chan_rng), standard=estimator_id == "direct_ml")
        try:
            with np.errstate(all="ignore"):
                rep = estimate(estimator_id, obs)
        except OACError as exc:
            # abort the round: keep the model, record why
            flags.add(f"aborted:{type(exc).__name__}")
            new = replace(state, round=state.round + 1, history=list(state.history))
            new.history.append(RoundRecord(state.round, tuple(int(a) for a in active), math.nan,
                                           setup.task.accuracy(theta, setup.test), tuple(sorted(flags))))
            return new
        flags.update(rep.flags)
        estimates.append(rep.estimate)
        sq_err.append(np.abs(rep.estimate - block.target_sum) ** 2)

    theta_plus = decode_sum(estimates, theta.size)
    with np.errstate(all="ignore"):
        theta_new = theta + theta_plus / sizes.sum()
    if not np.all(np.isfinite(theta_new)):
        flags.add("diverged")
    acc = setup.task.accuracy(theta_new, setup.test)
    with np.errstate(all="ignore"):
        mse = float(np.mean(np.concatenate(sq_err)))
    new = replace(state, global_model=theta_new, round=state.round + 1, history=list(state.history))
    new.history.append(RoundRecord(state.round, tuple(int(a) for a in active), mse, acc, tuple(sorted(flags))))
    return new


def run_feel(setup: FeelSetup, *, n_devices: int, k_active: int, rounds: int, estimator_id: str,
             esn0_db: float, seed: int = 0, random_fraction: float = 0.8, shard_size=None) -> FeelState:
    state = init_state(setup, n_devices, random_fraction=random_fraction, shard_size=shard_size, seed=seed)
    for _ in range(rounds):
        state = run_round(state, setup, estimator_id, esn0_db, k_active)
    return state


def fedavg_reference(state: FeelState, setup: FeelSetup, k_active: int) -> np.ndarray:
    """Error-free aggregate of the round ``run_round`` would run next (same seeds)."""
    rng = np.random.default_rng([state.rng_seed, 3, state.round])
    sel_rng, train_rng, _ = rng.spawn(3)
    theta = state.global_model
    active = np.sort(sel_rng.choice(len(state.device_shards), size=k_active, replace=False))
    sizes = state.dataset_sizes[active]
    total = np.zeros_like(theta)
    for dev, B in zip(active, sizes):
        local = local_train(theta, state.device_shards[dev], setup.epochs, setup.lr,
                            task=setup.task, seed=_seed(train_rng), batch_size=setup.batch_size)
        total += B * (local - theta)
    return theta + total / sizes.sum()
