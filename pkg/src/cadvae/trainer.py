"""Two-phase CAD-VAE training with explicit parameter-group routing.

Phase A takes one Adam step on encoder, decoder, f_y and f_s using the sum
of every encoder-facing loss. The CMI, LRI and TC terms see frozen copies of
their heads, so only the encoder moves through them. Phase B then trains the
opponents and the TC discriminator on detached latents.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .data import Batch, LabeledDataset, batch_iter
from .errors import ConfigError, DivergenceError, FormatError, UsageError
from .latent import LatentLayout, reparameterize
from .networks import GROUPS, CadVae, ModelSpec
from .objectives import (
    LossReport,
    cmi_loss,
    elbo_loss,
    joint_classification_losses,
    lri_loss,
    opponent_losses,
    tc_losses,
)

log = logging.getLogger(__name__)

MAIN_GROUPS = ("encoder", "decoder", "f_y", "f_s")
OPPONENT_GROUPS = ("f_y_op", "f_s_op")
DISC_GROUPS = ("disc",)


@dataclass(frozen=True)
class TrainConfig:
    lambda_cmi: float = 5.0
    lambda_lri: float = 60.0
    gamma_tc: float = 1.0
    lr_main: float = 1e-3
    lr_opponent: float = 1e-3
    lr_disc: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    d_x: int = 416
    d_y: int = 32
    d_s: int = 32
    d_r: int = 32
    seed: int = 0
    cmi_conditional_variant: bool = False
    tc_per_dimension: bool = False
    phase_b_steps: int = 1
    image_channels: int = 3
    image_size: int = 16
    n_y: int = 10
    n_s: int = 10
    debug_routing: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lambda_cmi <= 10.0:
            raise ConfigError(f"lambda_cmi must lie in [0, 10], got {self.lambda_cmi}")
        if not 0.0 <= self.lambda_lri <= 100.0:
            raise ConfigError(f"lambda_lri must lie in [0, 100], got {self.lambda_lri}")
        if self.gamma_tc < 0:
            raise ConfigError("gamma_tc must be >= 0")
        if min(self.lr_main, self.lr_opponent, self.lr_disc) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 2 or self.epochs < 0 or self.phase_b_steps < 1:
            raise ConfigError("batch_size >= 2, epochs >= 0 and phase_b_steps >= 1 required")
        if min(self.d_x, self.d_y, self.d_s, self.d_r) < 1:
            raise ConfigError("all latent dimensions must be >= 1")

    @property
    def layout(self) -> LatentLayout:
        return LatentLayout(self.d_x, self.d_y, self.d_s, self.d_r)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            image_shape=(self.image_channels, self.image_size, self.image_size),
            layout=self.layout,
            n_y=self.n_y,
            n_s=self.n_s,
            opponents_see_r=self.cmi_conditional_variant,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    def for_dataset(self, ds: LabeledDataset) -> "TrainConfig":
        c, h, w = ds.image_shape
        if h != w:
            raise ConfigError(f"square images required, got {h}x{w}")
        return replace(self, image_channels=c, image_size=h, n_y=ds.n_y, n_s=ds.n_s)


# ---------------------------------------------------------------------------
# optimizer and rng


class Adam:
    def __init__(self, groups, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = tuple(groups)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def init_moments(self, params: dict):
        for g in self.groups:
            for name, t in params[g].items():
                self.m[f"{g}/{name}"] = np.zeros(t.shape)
                self.v[f"{g}/{name}"] = np.zeros(t.shape)

    def step(self, params_by_group: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        updates = []
        for g in self.groups:
            params = params_by_group[g]
            for name in params.names():
                key = f"{g}/{name}"
                grad = params.grad(name)
                m = b1 * self.m[key] + (1.0 - b1) * grad
                v = b2 * self.v[key] + (1.0 - b2) * grad * grad
                new = params[name].data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                if not np.all(np.isfinite(new)):
                    raise DivergenceError(f"parameter {key}")
                updates.append((params, name, key, m, v, new))
        for params, name, key, m, v, new in updates:
            self.m[key], self.v[key] = m, v
            params.assign(name, new)


class CounterRng:
    """Seed plus draw counter; every draw gets an independent stream."""

    def __init__(self, seed=0, counter=0):
        self.seed = int(seed)
        self.counter = int(counter)

    def next(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed, self.counter])
        self.counter += 1
        return gen

    def to_bytes(self):
        return struct.pack("<QQ", self.seed, self.counter)

    @classmethod
    def from_bytes(cls, buf):
        return cls(*struct.unpack("<QQ", buf))


@dataclass
class TrainState:
    config: TrainConfig
    model: CadVae
    optimizers: dict
    rng: CounterRng
    step: int = 0
    epoch: int = 0
    last_probe: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        model = CadVae.init(config.model_spec(), seed=config.seed)
        opts = {
            "main": Adam(MAIN_GROUPS, config.lr_main),
            "opponent": Adam(OPPONENT_GROUPS, config.lr_opponent),
            "disc": Adam(DISC_GROUPS, config.lr_disc),
        }
        for opt in opts.values():
            opt.init_moments(model.params)
        return cls(config, model, opts, CounterRng(config.seed + 1))


# ---------------------------------------------------------------------------
# one step


def _finite(name, t: Tensor):
    v = t.item()
    if not np.isfinite(v):
        raise DivergenceError(name, v)
    return v


def _check_routing(model: CadVae, live_groups, phase):
    for g in GROUPS:
        has = any(t.grad is not None and np.any(t.grad != 0) for _, t in model.params[g].items())
        if has and g not in live_groups:
            raise AssertionError(f"{phase}: unexpected gradient on {g}")


def _zero(model):
    for g in GROUPS:
        model.params[g].zero_grad()


def train_step(state: TrainState, batch: Batch) -> LossReport:
    cfg = state.config
    model = state.model
    layout = model.layout
    x = Tensor(batch.x)
    y, s = batch.y, batch.s
    noise = state.rng.next().standard_normal((len(batch), layout.total))
    perm_rng = state.rng.next()
    _zero(model)

    # Phase A
    post = model.encode(x)
    z = reparameterize(post, noise, layout)
    values = {}
    recon, kl = elbo_loss(x, model.decode(z), post)
    values["recon"], values["kl"] = _finite("recon", recon), _finite("kl", kl)
    l_y, l_s = joint_classification_losses(model.head("f_y"), model.head("f_s"), z.zY, z.zS, z.zR, y, s)
    zd = z.detached()
    zr_opp = z.zR if cfg.cmi_conditional_variant else None

    def weighted(coef, make):
        # zero-weighted terms are evaluated off-graph so they cannot leak gradient
        if coef == 0:
            return make(zd), None
        val = make(z)
        return val, ad.mul_scalar(val, coef)

    l_cmi, w_cmi = weighted(cfg.lambda_cmi, lambda zz: cmi_loss(
        model.head("f_y_op", frozen=True), model.head("f_s_op", frozen=True), zz.zY, zz.zS,
        zz.zR if cfg.cmi_conditional_variant else None))
    l_lri, w_lri = weighted(cfg.lambda_lri, lambda zz: lri_loss(
        model.head("f_y", frozen=True), model.head("f_s", frozen=True), zz.zY, zz.zS, zz.zR, y, s))
    l_tc, l_disc = tc_losses(model.head("disc"), z.zY, z.zS, z.zR, perm_rng, per_dimension=cfg.tc_per_dimension)
    if cfg.gamma_tc == 0:
        w_tc = None
    else:
        w_tc = ad.mul_scalar(l_tc, cfg.gamma_tc)

    for name, t in (("l_y", l_y), ("l_s", l_s),
                    ("l_cmi", l_cmi), ("l_lri", l_lri), ("l_tc", l_tc)):
        values[name] = _finite(name, t)
    total = recon + kl + l_y + l_s
    for w in (w_cmi, w_lri, w_tc):
        if w is not None:
            total = total + w
    values["total_main"] = _finite("total_main", total)
    ad.backward(total)
    if cfg.debug_routing:
        _check_routing(model, MAIN_GROUPS, "phase A")
    state.optimizers["main"].step(model.params)

    # Phase B
    probe = {}
    for k in range(cfg.phase_b_steps):
        y_op, s_op = model.head("f_y_op"), model.head("f_s_op")
        zr_in = zd.zR if cfg.cmi_conditional_variant else None
        if k == 0:
            ly_in = ad.concat([zd.zS, zd.zR], axis=1) if zr_in is not None else zd.zS
            sy_in = ad.concat([zd.zY, zd.zR], axis=1) if zr_in is not None else zd.zY
            probe["acc_y_from_zS"] = float(np.mean(y_op.logits(ly_in).data.argmax(1) == y))
            probe["acc_s_from_zY"] = float(np.mean(s_op.logits(sy_in).data.argmax(1) == s))
        l_y_op, l_s_op = opponent_losses(y_op, s_op, zd.zY, zd.zS, y, s, zr_in)
        if k == 0:
            values["l_y_op"] = _finite("l_y_op", l_y_op)
            values["l_s_op"] = _finite("l_s_op", l_s_op)
        ad.backward(ad.add(l_y_op, l_s_op))
        if cfg.debug_routing:
            _check_routing(model, OPPONENT_GROUPS, "phase B (opponents)")
        state.optimizers["opponent"].step(model.params)

        if k > 0:
            _, l_disc = tc_losses(model.head("disc"), zd.zY, zd.zS, zd.zR, state.rng.next(),
                                  per_dimension=cfg.tc_per_dimension)
        if k == 0:
            values["l_disc"] = _finite("l_disc", l_disc)
        _zero(model)
        ad.backward(l_disc)
        if cfg.debug_routing:
            _check_routing(model, DISC_GROUPS, "phase B (disc)")
        state.optimizers["disc"].step(model.params)

    _zero(model)
    state.step += 1
    state.last_probe = probe
    return LossReport(**{f.name: values[f.name] for f in fields(LossReport)})


def gradient_cosine(model: CadVae, batch: Batch, cmi_conditional=False) -> float:
    """Cosine between the encoder gradients of l_cmi and l_lri on one batch.

    Evaluated at the posterior means, so no randomness is consumed and the
    training trajectory is unaffected. Returns 0.0 when either gradient vanishes.
    """
    grads = []
    for which in ("cmi", "lri"):
        _zero(model)
        part = model.encode(Tensor(batch.x)).mean_partition(model.layout)
        if which == "cmi":
            loss = cmi_loss(model.head("f_y_op", frozen=True), model.head("f_s_op", frozen=True),
                            part.zY, part.zS, part.zR if cmi_conditional else None)
        else:
            loss = lri_loss(model.head("f_y", frozen=True), model.head("f_s", frozen=True),
                            part.zY, part.zS, part.zR, batch.y, batch.s)
        ad.backward(loss)
        enc = model.params["encoder"]
        grads.append(np.concatenate([enc.grad(n).ravel() for n in enc.names()]))
    _zero(model)
    na, nb = np.linalg.norm(grads[0]), np.linalg.norm(grads[1])
    if na == 0 or nb == 0:
        return 0.0
    return float(grads[0] @ grads[1] / (na * nb))


# ---------------------------------------------------------------------------
# fit


def _epoch_seed(cfg: TrainConfig, epoch: int):
    return [cfg.seed, 7919, epoch]


def validation_leakage(model: CadVae, ds: LabeledDataset) -> dict:
    """Accuracy of the trained opponents on posterior means of ``ds``."""
    mu = model.posterior_means(ds.images)
    lay = model.layout
    zY = mu[:, lay.d_x:lay.d_x + lay.d_y]
    zS = mu[:, lay.d_x + lay.d_y:lay.d_x + lay.d_y + lay.d_s]
    zR = mu[:, lay.total - lay.d_r:]
    y_op, s_op = model.head("f_y_op", frozen=True), model.head("f_s_op", frozen=True)
    zs_in = np.concatenate([zS, zR], 1) if y_op.in_dim != zS.shape[1] else zS
    zy_in = np.concatenate([zY, zR], 1) if s_op.in_dim != zY.shape[1] else zY
    return {
        "val_acc_y_from_zS": float(np.mean(y_op.logits(Tensor(zs_in)).data.argmax(1) == ds.y)),
        "val_acc_s_from_zY": float(np.mean(s_op.logits(Tensor(zy_in)).data.argmax(1) == ds.s)),
    }


def fit(dataset: LabeledDataset, config: TrainConfig, val: LabeledDataset = None,
        out_dir=None, state: TrainState = None, progress=None):
    """Train for ``config.epochs`` epochs (continuing from ``state`` if given).

    Returns ``(state, history)`` where history holds ``steps`` (one
    LossReport per step) and ``epochs`` (per-epoch means and probes). With
    ``out_dir`` a JSONL log and a checkpoint per epoch are written there.
    """
    config = config.for_dataset(dataset)
    if state is None:
        state = TrainState.fresh(config)
    elif state.config != config:
        raise ConfigError("state was trained with a different configuration")
    history = {"steps": [], "epochs": []}
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "a", encoding="utf-8")
    try:
        while state.epoch < config.epochs:
            reports, probes = [], []
            grad_cos = None
            for batch in batch_iter(dataset, config.batch_size, _epoch_seed(config, state.epoch)):
                if grad_cos is None:
                    grad_cos = gradient_cosine(state.model, batch, config.cmi_conditional_variant)
                try:
                    reports.append(train_step(state, batch))
                except DivergenceError:
                    log.error("divergence at epoch %d step %d", state.epoch, state.step)
                    raise
                probes.append(state.last_probe)
            state.epoch += 1
            record = {"epoch": state.epoch, "steps": len(reports)}
            for f in fields(LossReport):
                record[f.name] = float(np.mean([getattr(r, f.name) for r in reports]))
            for key in probes[0] if probes else ():
                record[key] = float(np.mean([p[key] for p in probes]))
            record["grad_cos_cmi_lri"] = grad_cos
            if val is not None:
                record.update(validation_leakage(state.model, val))
            history["steps"].extend(reports)
            history["epochs"].append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
                save_checkpoint(os.path.join(out_dir, "checkpoint.cadc"), state)
            if progress is not None:
                progress(record)
            log.info("epoch %d: %s", state.epoch, record)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state, history


# ---------------------------------------------------------------------------
# checkpoints
#
# magic "CADC" | version u16 | config digest (32 bytes) | parameter entries |
# optimizer/state entries | rng state (16 bytes). Entry block: count u32, then
# per entry name length u16, UTF-8 name, rank u8, extents u32 x rank, f64
# payload. All little-endian. The config text goes to "<path>.cfg".

CKPT_MAGIC = b"CADC"
CKPT_VERSION = 1


def _pack_entries(entries):
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if n < 0 or self.off + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", offset=self.off)
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def entries(self):
        (count,) = self.unpack("<I", "entry count")
        out = []
        for _ in range(count):
            (nlen,) = self.unpack("<H", "name length")
            start = self.off
            try:
                name = self.take(nlen, "name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError("entry name is not UTF-8", offset=start) from exc
            (rank,) = self.unpack("<B", "rank")
            shape = self.unpack(f"<{rank}I", "extents")
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(self.take(8 * size, f"payload of {name}"), dtype="<f8").reshape(shape)
            out.append((name, start, data.astype(np.float64)))
        return out


def checkpoint_bytes(state: TrainState) -> bytes:
    params = [
        (f"{g}/{name}", t.data) for g in GROUPS for name, t in state.model.params[g].items()
    ]
    extra = []
    for key, opt in state.optimizers.items():
        extra.append((f"{key}/t", np.array(float(opt.t))))
        for pname in opt.m:
            extra.append((f"{key}/m/{pname}", opt.m[pname]))
            extra.append((f"{key}/v/{pname}", opt.v[pname]))
    extra.append(("state/step", np.array(float(state.step))))
    extra.append(("state/epoch", np.array(float(state.epoch))))
    return b"".join([
        CKPT_MAGIC,
        struct.pack("<H", CKPT_VERSION),
        state.config.digest(),
        _pack_entries(params),
        _pack_entries(extra),
        state.rng.to_bytes(),
    ])


def save_checkpoint(path, state: TrainState):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(state))
    with open(f"{path}.cfg", "w", encoding="utf-8") as fh:
        fh.write(state.config.to_text())
    os.replace(tmp, path)


def parse_checkpoint(buf: bytes, config: TrainConfig) -> TrainState:
    r = _Reader(buf)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if r.take(32, "config digest") != config.digest():
        raise FormatError("config digest does not match the supplied configuration", offset=6)
    state = TrainState.fresh(config)
    expected = {f"{g}/{n}": (g, n) for g in GROUPS for n in state.model.params[g].names()}
    seen = set()
    for name, off, data in r.entries():
        if name not in expected or name in seen:
            raise FormatError(f"unexpected parameter entry {name!r}", offset=off)
        g, n = expected[name]
        if data.shape != state.model.params[g][n].shape:
            raise FormatError(f"shape mismatch for {name}: {data.shape}", offset=off)
        state.model.params[g].assign(n, data)
        seen.add(name)
    if seen != set(expected):
        raise FormatError(f"missing parameter entries {sorted(set(expected) - seen)[:3]}", offset=r.off)
    extras = {}
    known = {"state/step", "state/epoch"}
    for key, opt in state.optimizers.items():
        known.add(f"{key}/t")
        known.update(f"{key}/{slot}/{p}" for p in opt.m for slot in ("m", "v"))
    for name, off, data in r.entries():
        if name not in known or name in extras:
            raise FormatError(f"unexpected state entry {name!r}", offset=off)
        extras[name] = (off, data)
    for key, opt in state.optimizers.items():
        if f"{key}/t" not in extras:
            raise FormatError(f"missing optimizer counter {key}/t", offset=r.off)
        opt.t = int(extras[f"{key}/t"][1])
        for pname in list(opt.m):
            for slot, store in (("m", opt.m), ("v", opt.v)):
                k = f"{key}/{slot}/{pname}"
                if k not in extras:
                    raise FormatError(f"missing optimizer moment {k}", offset=r.off)
                off, data = extras[k]
                if data.shape != store[pname].shape:
                    raise FormatError(f"shape mismatch for {k}", offset=off)
                store[pname] = data
    try:
        state.step = int(extras["state/step"][1])
        state.epoch = int(extras["state/epoch"][1])
    except KeyError as exc:
        raise FormatError(f"missing state entry {exc}", offset=r.off) from exc
    state.rng = CounterRng.from_bytes(r.take(16, "rng state"))
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes", offset=r.off)
    return state


def load_checkpoint(path, config: TrainConfig = None) -> TrainState:
    """Load a checkpoint; the config defaults to the ``.cfg`` sidecar."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if config is None:
        from .cli import parse_config_text  # local import: cli depends on trainer

        cfg_path = f"{path}.cfg"
        if not os.path.exists(cfg_path):
            raise FormatError(f"no config sidecar at {cfg_path}")
        with open(cfg_path, encoding="utf-8") as fh:
            config = parse_config_text(fh.read(), TrainConfig)
    return parse_checkpoint(buf, config)
