"""The training loop as a deterministic discrete-event simulation.

One logical timeline: each round activates one device (sampled by
participation weight, with an optional fairness cap forcing starved
devices), runs the forward/backward exchange against the server's possibly
stale embedding cache, and advances the clocks.  Asynchrony is modeled by
the stochastic schedule plus cache staleness, not by threads, so identical
configs and seeds give bit-identical traces, ledgers, and parameters.

Byte accounting follows the transmitted tensors exactly: per round the
scalar-feedback algorithms pay 2*B*embed_dim*width + B*id_width uplink and
one scalar downlink; the first-order forward-noise baseline pays
B*embed_dim*width each way (plus ids).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .data import batch_sample
from .errors import ConfigError, ProtocolStateError
from .numerics import DirectionSampler, SeededStream, derive_seed
from .privacy import noise_scale, realized_epsilon, solve_mu
from .zo import (
    ScalarFeedback,
    ZoConfig,
    device_apply_feedback,
    privatize_batch,
    server_fo_step,
    server_zo_step,
)

ALGORITHMS = ("dpzv", "dpzv_no_clip", "dpzv_no_noise", "fo_forward_noise")
SERVER_MODES = ("sgd", "zo")


@dataclass
class RunConfig:
    rounds: int
    batch_size: int
    master_seed: int
    num_devices: int
    embed_dims: list
    algorithm: str = "dpzv"
    server_mode: str = "sgd"
    device_kind: str = mdl.KIND_LINEAR
    device_hidden: int = 16
    head_hidden: int = 32
    param_dtype: str = "float32"
    device_lr: list = None
    server_lr: float = 0.1
    lam: list = None
    server_lam: float = 1e-3
    divisor_mode: str = "two_lambda"
    clip_c: float = 10.0
    participation: list = None
    staleness_cap: int = None  # None disables the fairness cap
    epsilon: float = None
    delta: float = None
    sigma_dp: float = None
    scalar_width: int = 4
    id_width: int = 4
    eval_every: int = 100

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.server_mode not in SERVER_MODES:
            raise ConfigError(f"unknown server mode {self.server_mode!r}")
        if self.rounds < 0 or self.batch_size < 1 or self.num_devices < 1:
            raise ConfigError("rounds, batch size and device count must be positive")
        if self.scalar_width not in (4, 8):
            raise ConfigError(f"scalar width must be 4 or 8, got {self.scalar_width}")
        m = self.num_devices
        self.embed_dims = _per_device(self.embed_dims, m, "embed_dims")
        self.device_lr = _per_device(self.device_lr if self.device_lr is not None else 0.05, m, "device_lr")
        self.lam = _per_device(self.lam if self.lam is not None else 1e-3, m, "lam")
        self.participation = _per_device(
            self.participation if self.participation is not None else 1.0, m, "participation"
        )
        if any(q < 0 for q in self.participation):
            raise ConfigError("participation weights must be nonnegative")
        if all(q == 0 for q in self.participation):
            raise ConfigError("at least one device needs a positive participation weight")
        has_target = self.epsilon is not None or self.delta is not None
        if has_target and self.sigma_dp is not None:
            raise ConfigError("give either an (epsilon, delta) target or sigma_dp, not both")
        if self.epsilon is not None and self.delta is None:
            raise ConfigError("an epsilon target needs a delta")
        if has_target and self.algorithm in ("dpzv_no_clip", "dpzv_no_noise"):
            raise ConfigError(
                f"{self.algorithm} cannot honor an (epsilon, delta) target; "
                "give an explicit sigma_dp or none"
            )
        if (
            self.algorithm in ("dpzv", "fo_forward_noise")
            and not has_target
            and self.sigma_dp is None
        ):
            raise ConfigError(
                "give exactly one of an (epsilon, delta) target or an explicit "
                "sigma_dp (0.0 for a non-private run)"
            )

    @property
    def np_dtype(self):
        return np.float32 if self.param_dtype == "float32" else np.float64

    @property
    def wire_dtype(self):
        return np.float32 if self.scalar_width == 4 else np.float64


def _per_device(value, m, what):
    if isinstance(value, (list, tuple, np.ndarray)):
        vals = list(value)
        if len(vals) != m:
            raise ConfigError(f"{what} needs one entry per device ({m}), got {len(vals)}")
        return vals
    if value is None:
        raise ConfigError(f"{what} must be set")
    return [value] * m


@dataclass
class CommLedger:
    """Per-round, per-device byte counters for uplink and downlink."""

    records: list = field(default_factory=list)

    def add(self, round_idx, device_id, up_payload, up_ids, down):
        self.records.append(
            {
                "round": round_idx,
                "device": device_id,
                "uplink_payload_bytes": int(up_payload),
                "uplink_id_bytes": int(up_ids),
                "downlink_bytes": int(down),
            }
        )

    def total_bytes(self, include_ids=True):
        total = 0
        for r in self.records:
            total += r["uplink_payload_bytes"] + r["downlink_bytes"]
            if include_ids:
                total += r["uplink_id_bytes"]
        return total

    def extend(self, other):
        self.records.extend(other.records)


class EmbeddingCache:
    """Latest per-device, per-sample embeddings with update stamps.

    Stored as one [D x sum(embed_dims)] matrix with per-device column
    slices plus a [M x D] stamp array recording the round each entry was
    written.  Entries age as a block until their device is next served.
    """

    def __init__(self, num_samples, embed_dims, dtype):
        self.slices = []
        start = 0
        for e in embed_dims:
            self.slices.append(slice(start, start + e))
            start += e
        self.concat = np.zeros((num_samples, start), dtype=dtype)
        self.stamps = np.full((len(embed_dims), num_samples), -1, dtype=np.int64)
        self.populated = False

    @property
    def concat_dim(self):
        return self.concat.shape[1]

    def refresh(self, device_id, ids, values, stamp):
        current = self.stamps[device_id, ids]
        if np.any(stamp < current):
            raise ProtocolStateError("cache stamps may never decrease")
        self.concat[ids, self.slices[device_id]] = values
        self.stamps[device_id, ids] = stamp

    def entry(self, device_id, sample_id):
        return (
            self.concat[sample_id, self.slices[device_id]].copy(),
            int(self.stamps[device_id, sample_id]),
        )

    def batch_concat(self, ids):
        return self.concat[ids]


@dataclass
class DeviceState:
    device_id: int
    model: mdl.DeviceModel
    q: float
    eta: float
    lam: float
    t_local: int = 0
    perturb_stream: SeededStream = None
    batch_stream: SeededStream = None
    fwd_noise_stream: SeededStream = None
    sampler: DirectionSampler = field(default_factory=DirectionSampler)


@dataclass
class ServerState:
    head: mdl.ServerHead
    cache: EmbeddingCache
    ledger: CommLedger
    t: int = 0
    noise_stream: SeededStream = None
    zo_stream: SeededStream = None
    sampler: DirectionSampler = field(default_factory=DirectionSampler)
    run_sigma: float = 0.0       # scalar noise std for the downlink channel
    baseline_sigma: float = 0.0  # per-coordinate forward noise std (baseline)


@dataclass
class RoundRecord:
    round: int
    device_id: int
    train_loss: float
    delta: float
    noise: float
    uplink_payload_bytes: int
    uplink_id_bytes: int
    downlink_bytes: int
    staleness: int

    def debug_line(self):
        return (
            f"round={self.round} device={self.device_id} "
            f"loss={self.train_loss:.10g} delta={self.delta:.10g} "
            f"noise={self.noise:.10g} up={self.uplink_payload_bytes} "
            f"up_ids={self.uplink_id_bytes} down={self.downlink_bytes} "
            f"staleness={self.staleness}"
        )


@dataclass
class TraceRow:
    round: int
    device_id: int
    train_loss: float
    eval_acc: float  # None on rounds without an evaluation
    uplink_bytes: int
    downlink_bytes: int
    cum_bytes: int
    max_staleness: int
    realized_epsilon: float

    CSV_HEADER = "round,device,train_loss,eval_acc,uplink_bytes,downlink_bytes,cum_bytes,max_staleness,realized_epsilon"

    def csv_line(self):
        acc = "" if self.eval_acc is None else f"{self.eval_acc:.10g}"
        eps = "inf" if math.isinf(self.realized_epsilon) else f"{self.realized_epsilon:.10g}"
        return (
            f"{self.round},{self.device_id},{self.train_loss:.10g},{acc},"
            f"{self.uplink_bytes},{self.downlink_bytes},{self.cum_bytes},"
            f"{self.max_staleness},{eps}"
        )


@dataclass
class MetricsTrace:
    rows: list
    ledger: CommLedger
    records: list

    def to_csv(self, fh):
        fh.write(TraceRow.CSV_HEADER + "\n")
        for row in self.rows:
            fh.write(row.csv_line() + "\n")

    def final_accuracy(self):
        accs = [r.eval_acc for r in self.rows if r.eval_acc is not None]
        return accs[-1] if accs else None

    def rounds_to_target(self, target):
        """First round whose evaluation accuracy reaches target, else -1."""
        for row in self.rows:
            if row.eval_acc is not None and row.eval_acc >= target:
                return row.round
        return -1

    def bytes_to_target(self, target):
        """Cumulative bytes at the first evaluation reaching target, else inf."""
        for row in self.rows:
            if row.eval_acc is not None and row.eval_acc >= target:
                return row.cum_bytes
        return math.inf


def comm_volume(trace, include_ids=True):
    """Total uplink + downlink bytes over all rounds and devices."""
    return trace.ledger.total_bytes(include_ids=include_ids)


# -- construction --------------------------------------------------------------


def build_simulation(cfg, dataset):
    """Instantiate server and device states from the config and master seed."""
    if dataset.num_devices != cfg.num_devices:
        raise ConfigError(
            f"dataset has {dataset.num_devices} feature blocks, config says "
            f"{cfg.num_devices} devices"
        )
    dtype = cfg.np_dtype
    devices = []
    for m in range(cfg.num_devices):
        init_stream = SeededStream(derive_seed(cfg.master_seed, f"device/{m}/init"))
        dm = mdl.init_device_model(
            cfg.device_kind,
            dataset.input_dims[m],
            cfg.embed_dims[m],
            init_stream,
            hidden=cfg.device_hidden,
            dtype=dtype,
        )
        devices.append(
            DeviceState(
                device_id=m,
                model=dm,
                q=cfg.participation[m],
                eta=cfg.device_lr[m],
                lam=cfg.lam[m],
                perturb_stream=SeededStream(derive_seed(cfg.master_seed, f"device/{m}/perturb")),
                batch_stream=SeededStream(derive_seed(cfg.master_seed, f"device/{m}/batch")),
                fwd_noise_stream=SeededStream(derive_seed(cfg.master_seed, f"device/{m}/fwdnoise")),
            )
        )
    concat_dim = sum(cfg.embed_dims)
    head_stream = SeededStream(derive_seed(cfg.master_seed, "server/init"))
    head = mdl.init_server_head(
        concat_dim, cfg.head_hidden, dataset.num_classes, head_stream, dtype=dtype
    )
    server = ServerState(
        head=head,
        cache=EmbeddingCache(dataset.num_samples, cfg.embed_dims, dtype),
        ledger=CommLedger(),
        noise_stream=SeededStream(derive_seed(cfg.master_seed, "server/noise")),
        zo_stream=SeededStream(derive_seed(cfg.master_seed, "server/perturb")),
    )
    return server, devices


DEFAULT_REPORT_DELTA = 1e-3


def resolve_noise(cfg, dataset_size):
    """The scalar noise std for the run, calibrating from (eps, delta) if set.

    Returns (sigma_dp, delta_for_reporting, mu or None).  Runs configured
    with an explicit sigma_dp carry no delta, so the realized-epsilon trace
    column falls back to the documented reporting delta.
    """
    if cfg.algorithm == "dpzv_no_noise":
        return 0.0, cfg.delta, None
    if cfg.epsilon is not None:
        if math.isinf(cfg.epsilon):
            return 0.0, cfg.delta, None
        mu = solve_mu(cfg.epsilon, cfg.delta)
        return noise_scale(cfg.clip_c, cfg.rounds, dataset_size, mu), cfg.delta, mu
    sigma = cfg.sigma_dp or 0.0
    report_delta = cfg.delta
    if sigma > 0 and report_delta is None:
        report_delta = DEFAULT_REPORT_DELTA
    return sigma, report_delta, None


# -- protocol operations --------------------------------------------------------


def warmup(server, devices, dataset, cfg):
    """Populate every cache entry from the initial device models.

    Uplink bytes for the full embedding tables are charged to round 0.
    """
    if server.cache.populated:
        raise ProtocolStateError("warmup ran twice on one simulation")
    all_ids = np.arange(dataset.num_samples)
    for dev in devices:
        h = mdl.forward_embedding(dev.model, dataset.device_features[dev.device_id])
        wire = h.astype(cfg.wire_dtype)
        server.cache.refresh(dev.device_id, all_ids, wire.astype(cfg.np_dtype), 0)
        server.ledger.add(
            0,
            dev.device_id,
            up_payload=dataset.num_samples * dev.model.embed_dim * cfg.scalar_width,
            up_ids=0,
            down=0,
        )
        dev.t_local = 0
    server.cache.populated = True
    server.t = 0


def schedule_next(devices, stream, current_round=1, cap=None):
    """Pick the device to serve this round.

    Draw proportional to participation weights; if the fairness cap is on
    and some device has already sat idle for ``cap`` completed rounds, the
    lowest-id such device is force-selected instead.
    """
    if not devices:
        raise ConfigError("no devices to schedule")
    weights = np.array([d.q for d in devices], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ConfigError("all participation weights are zero")
    r = stream.uniform() * total
    chosen = 0
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if r < acc:
            chosen = i
            break
    else:
        chosen = len(devices) - 1
    if cap is not None:
        overdue = [
            d.device_id for d in devices if (current_round - 1 - d.t_local) >= cap
        ]
        if overdue:
            return min(overdue)
    return devices[chosen].device_id


def _observed_staleness(devices, serving_id, round_idx):
    ages = [
        round_idx - 1 - d.t_local for d in devices if d.device_id != serving_id
    ]
    return max(ages) if ages else 0


def round_dpzv(server, device, dataset, cfg, round_idx):
    """One scalar-feedback round for ``device`` (Algorithm steps a..j)."""
    if not server.cache.populated:
        raise ProtocolStateError("round executed before warmup")
    m = device.device_id
    ids, blocks, y = batch_sample(dataset, cfg.batch_size, device.batch_stream)
    Xm = blocks[m]

    seed = device.perturb_stream.next_seed()
    record = mdl.PerturbRecord(seed=seed, lam=device.lam)
    mdl.perturb_in_place(device.model.params, record, +1, device.sampler)
    h_plus = mdl.forward_embedding(device.model, Xm)
    mdl.perturb_in_place(device.model.params, record, -1, device.sampler)
    h_minus = mdl.forward_embedding(device.model, Xm)
    mdl.perturb_in_place(device.model.params, record, 0, device.sampler)

    e_m = device.model.embed_dim
    up_payload = 2 * cfg.batch_size * e_m * cfg.scalar_width
    up_ids = cfg.batch_size * cfg.id_width

    h_plus_w = h_plus.astype(cfg.wire_dtype).astype(cfg.np_dtype)
    h_minus_w = h_minus.astype(cfg.wire_dtype).astype(cfg.np_dtype)

    sl = server.cache.slices[m]
    rows_minus = server.cache.batch_concat(ids)  # fancy index: fresh copy
    rows_plus = rows_minus.copy()
    rows_plus[:, sl] = h_plus_w
    rows_minus[:, sl] = h_minus_w
    f_plus = mdl.head_loss(server.head, rows_plus, y)
    f_minus = mdl.head_loss(server.head, rows_minus, y)

    zocfg = ZoConfig(
        lam=device.lam,
        divisor_mode=cfg.divisor_mode,
        clip_c=cfg.clip_c,
        sigma_dp=server.run_sigma,
    )
    deltas = (f_plus - f_minus) / zocfg.divisor
    if cfg.algorithm == "dpzv":
        fb = privatize_batch(deltas, zocfg, server.noise_stream, round_idx, m)
    elif cfg.algorithm == "dpzv_no_clip":
        noise = server.noise_stream.gaussian(server.run_sigma)
        fb = ScalarFeedback(float(deltas.mean()) + noise, noise, round_idx, m)
    elif cfg.algorithm == "dpzv_no_noise":
        clipped = np.clip(deltas, -cfg.clip_c, cfg.clip_c)
        fb = ScalarFeedback(float(clipped.mean()), 0.0, round_idx, m)
    else:
        raise ConfigError(f"round_dpzv cannot run algorithm {cfg.algorithm!r}")

    down = cfg.scalar_width
    lim = float(np.finfo(cfg.wire_dtype).max)
    wire_delta = float(np.dtype(cfg.wire_dtype).type(min(max(fb.delta, -lim), lim)))
    fb_wire = ScalarFeedback(wire_delta, fb.noise, fb.round, fb.device_id)
    device_apply_feedback(device.model.params, fb_wire, device.eta, record, device.sampler)

    base = server.cache.batch_concat(ids)
    if cfg.server_mode == "sgd":
        server_fo_step(server.head, base, y, cfg.server_lr)
    else:
        server_zocfg = ZoConfig(
            lam=cfg.server_lam, divisor_mode=cfg.divisor_mode,
            clip_c=cfg.clip_c, sigma_dp=0.0,
        )
        server_zo_step(
            server.head, base, y, server_zocfg, cfg.server_lr,
            server.zo_stream, server.sampler,
        )

    midpoint = (h_plus_w + h_minus_w) * np.dtype(cfg.np_dtype).type(0.5)
    server.cache.refresh(m, ids, midpoint, round_idx)

    server.ledger.add(round_idx, m, up_payload, up_ids, down)
    server.t = round_idx
    device.t_local = round_idx

    train_loss = float((f_plus.mean() + f_minus.mean()) * 0.5)
    return RoundRecord(
        round=round_idx,
        device_id=m,
        train_loss=train_loss,
        delta=fb_wire.delta,
        noise=fb.noise,
        uplink_payload_bytes=up_payload,
        uplink_id_bytes=up_ids,
        downlink_bytes=down,
        staleness=0,
    )


def baseline_fo_round(server, device, dataset, cfg, round_idx):
    """First-order forward-noise baseline round.

    The device clips each sample's embedding to norm C, adds per-coordinate
    Gaussian noise, and uplinks the result; the server backpropagates
    through the head and downlinks the per-sample embedding gradients
    (B * embed_dim scalars, against one scalar for the ZO path).
    """
    if not server.cache.populated:
        raise ProtocolStateError("round executed before warmup")
    m = device.device_id
    ids, blocks, y = batch_sample(dataset, cfg.batch_size, device.batch_stream)
    Xm = blocks[m]

    h = mdl.forward_embedding(device.model, Xm)
    h64 = h.astype(np.float64)
    norms = np.sqrt((h64 * h64).sum(axis=1))
    finite = np.isfinite(norms)
    scale = np.ones_like(norms)
    over = finite & (norms > cfg.clip_c)
    scale[over] = cfg.clip_c / norms[over]
    h_clipped = h64 * scale[:, None]
    # a diverged (non-finite) embedding clips to the ball like anything else;
    # map it to the origin so the trace stays numerically defined
    h_clipped[~finite] = 0.0
    noise = device.fwd_noise_stream.gaussians(
        h_clipped.size, server.baseline_sigma
    ).reshape(h_clipped.shape)
    h_noisy = (h_clipped + noise).astype(cfg.wire_dtype).astype(cfg.np_dtype)

    e_m = device.model.embed_dim
    up_payload = cfg.batch_size * e_m * cfg.scalar_width
    up_ids = cfg.batch_size * cfg.id_width

    server.cache.refresh(m, ids, h_noisy, round_idx)
    concat = server.cache.batch_concat(ids)
    losses = mdl.head_loss(server.head, concat, y)
    _, g_inputs = mdl.head_gradient_with_inputs(server.head, concat, y)
    g_m = g_inputs[:, server.cache.slices[m]]
    down = cfg.batch_size * e_m * cfg.scalar_width
    # saturate at the wire dtype's range instead of overflowing to inf
    lim = float(np.finfo(cfg.wire_dtype).max)
    g_wire = np.clip(g_m, -lim, lim).astype(cfg.wire_dtype).astype(np.float64)

    mdl.apply_embedding_gradient(device.model, Xm, g_wire, device.eta)
    server_fo_step(server.head, concat, y, cfg.server_lr)

    server.ledger.add(round_idx, m, up_payload, up_ids, down)
    server.t = round_idx
    device.t_local = round_idx

    return RoundRecord(
        round=round_idx,
        device_id=m,
        train_loss=float(losses.mean()),
        delta=0.0,
        noise=0.0,
        uplink_payload_bytes=up_payload,
        uplink_id_bytes=up_ids,
        downlink_bytes=down,
        staleness=0,
    )


def evaluate(server, devices, dataset):
    """Mean loss and accuracy of the current global model on the dataset."""
    parts = [
        mdl.forward_embedding(d.model, dataset.device_features[d.device_id])
        for d in devices
    ]
    concat = np.concatenate(parts, axis=1)
    losses = mdl.head_loss(server.head, concat, dataset.labels)
    logits = mdl.head_logits(server.head, concat)
    acc = float((logits.argmax(axis=1) == dataset.labels).mean())
    return float(losses.mean()), acc


def run_training(cfg, dataset, return_states=False):
    """Warmup plus cfg.rounds protocol rounds; returns the metrics trace."""
    server, devices = build_simulation(cfg, dataset)
    sigma, delta_report, _ = resolve_noise(cfg, dataset.num_samples)
    server.run_sigma = sigma
    server.baseline_sigma = cfg.batch_size * sigma
    scheduler = SeededStream(derive_seed(cfg.master_seed, "scheduler"))

    warmup(server, devices, dataset, cfg)
    rows = []
    records = []
    cum = server.ledger.total_bytes()
    loss0, acc0 = evaluate(server, devices, dataset)
    rows.append(
        TraceRow(
            round=0, device_id=-1, train_loss=loss0, eval_acc=acc0,
            uplink_bytes=cum, downlink_bytes=0, cum_bytes=cum,
            max_staleness=0, realized_epsilon=0.0,
        )
    )

    is_baseline = cfg.algorithm == "fo_forward_noise"
    for t in range(1, cfg.rounds + 1):
        m = schedule_next(devices, scheduler, t, cfg.staleness_cap)
        staleness = _observed_staleness(devices, m, t)
        if is_baseline:
            rec = baseline_fo_round(server, devices[m], dataset, cfg, t)
        else:
            rec = round_dpzv(server, devices[m], dataset, cfg, t)
        rec.staleness = staleness
        records.append(rec)

        eval_due = (cfg.eval_every > 0 and t % cfg.eval_every == 0) or t == cfg.rounds
        acc = evaluate(server, devices, dataset)[1] if eval_due else None
        up = rec.uplink_payload_bytes + rec.uplink_id_bytes
        cum += up + rec.downlink_bytes
        if sigma == 0.0 or delta_report is None:
            eps = math.inf if t > 0 else 0.0
        else:
            eps = realized_epsilon(
                cfg.clip_c, cfg.batch_size, dataset.num_samples, sigma, t, delta_report
            )
        rows.append(
            TraceRow(
                round=t, device_id=m, train_loss=rec.train_loss, eval_acc=acc,
                uplink_bytes=up, downlink_bytes=rec.downlink_bytes,
                cum_bytes=cum, max_staleness=staleness, realized_epsilon=eps,
            )
        )
    trace = MetricsTrace(rows=rows, ledger=server.ledger, records=records)
    if return_states:
        return trace, (server, devices)
    return trace
