"""Training procedure: dual learning rates, decoupled weight decay,
plateau-driven decay with encoder freezing, early stopping, teacher
forcing, and gradient accumulation.

Accumulation windows are exact: per-micro-batch loss terms are combined
on the autodiff tape into a single window objective before one backward
pass, so a 2 x 32 window produces the same update as one 64-sample batch
up to float summation order.

Checkpoints are directories holding a JSON manifest (configs, taxonomy
edges, token-id maps, vocab hash, rng state, metric history) plus one raw
float32 little-endian blob per named parameter, and the optimizer moment
vectors so a resumed run continues bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .codec import Ordering, PAD_ID, encode
from .encoder import EncoderConfig, PrecomputedStates, TextVocab, tokenize_text
from .decoder import DecoderConfig
from .errors import ConfigError, EmptyCorpus, NonFiniteLoss, ShapeMismatch
from .loss import LossConfig, LossVariant, combine_pieces, compute_loss, loss_pieces
from .model import ModelBundle
from .taxonomy import LabelHierarchy

__all__ = [
    "TrainConfig", "TrainResult", "PreparedData", "AdamW",
    "prepare_data", "make_targets", "train", "evaluate_epoch",
    "save_checkpoint", "load_checkpoint", "grad_norm",
]


@dataclass
class TrainConfig:
    lr_encoder: float = 5e-5
    lr_decoder: float = 3e-4
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    improve_eps: float = 1e-6
    encoder_freeze_threshold: float = 5e-7
    early_stop_patience: int = 10
    micro_batch: int = 32
    accumulation_steps: int = 2
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    loss: LossConfig = field(default_factory=LossConfig)
    val_plain_ce: bool = False

    def __post_init__(self):
        if min(self.lr_encoder, self.lr_decoder) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be positive")
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps must be >= 1")
        if self.micro_batch < 1:
            raise ConfigError("micro_batch must be >= 1")

    def val_loss_config(self) -> LossConfig:
        if self.val_plain_ce:
            return LossConfig(variant=LossVariant.PLAIN_CE,
                              smoothing=self.loss.smoothing,
                              ignore_id=self.loss.ignore_id)
        return self.loss


def _decays(name: str, p: Parameter) -> bool:
    """Weight decay applies to matrices only; norm gains, biases, and
    embeddings are exempt."""
    return p.data.ndim >= 2 and "embed" not in name


class AdamW:
    """Bias-corrected adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.groups: list[dict] = []
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def add_group(self, name: str, params: dict[str, Parameter], lr: float) -> None:
        self.groups.append({"name": name, "params": params, "lr": lr,
                            "frozen": False, "t": 0})

    def group(self, name: str) -> dict:
        for g in self.groups:
            if g["name"] == name:
                return g
        raise KeyError(name)

    def step(self) -> None:
        for g in self.groups:
            if g["frozen"] or not g["params"]:
                continue
            g["t"] += 1
            t = g["t"]
            c1 = 1.0 - self.beta1 ** t
            c2 = 1.0 - self.beta2 ** t
            for pname, p in g["params"].items():
                grad = p.grad
                if grad is None:
                    grad = np.zeros_like(p.data)
                elif grad.shape != p.data.shape:
                    raise ShapeMismatch(
                        f"{pname}: grad shape {grad.shape} != param {p.data.shape}")
                key = f"{g['name']}/{pname}"
                st = self.state.setdefault(key, {
                    "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
                st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * grad
                st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * grad * grad
                step_dir = (st["m"] / c1) / (np.sqrt(st["v"] / c2) + self.eps)
                if self.weight_decay and _decays(pname, p):
                    step_dir = step_dir + self.weight_decay * p.data
                p.data = p.data - g["lr"] * step_dir

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"].values():
                p.grad = None

    def freeze_group(self, name: str) -> None:
        g = self.group(name)
        g["frozen"] = True
        for p in g["params"].values():
            p.requires_grad = False
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "groups": [{"name": g["name"], "lr": g["lr"], "frozen": g["frozen"],
                        "t": g["t"]} for g in self.groups],
            "moments": {k: {"m": v["m"], "v": v["v"]} for k, v in self.state.items()},
        }

    def load_state_dict(self, meta: dict, moments: dict) -> None:
        for saved in meta["groups"]:
            g = self.group(saved["name"])
            g["lr"] = float(saved["lr"])
            g["t"] = int(saved["t"])
            if saved["frozen"]:
                self.freeze_group(saved["name"])
        self.state = moments


def grad_norm(params: dict[str, Parameter]) -> float:
    """L2 norm over all present gradients; absent gradients count as zero."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    """Tensorized split: tokenized text (or precomputed states) plus the
    encoded teacher-forcing label sequences."""

    ids: list[str]
    seq_ids: np.ndarray
    seq_mask: np.ndarray
    gold: list[set]
    text_ids: np.ndarray | None = None
    text_mask: np.ndarray | None = None
    enc_hidden: np.ndarray | None = None
    enc_mask: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.ids)

    def encoder_inputs(self, idx: np.ndarray):
        """(hidden-or-ids, mask) for a batch index; hidden for precomputed."""
        if self.enc_hidden is not None:
            return self.enc_hidden[idx], self.enc_mask[idx]
        return None, self.text_mask[idx]


def make_targets(seq_ids: np.ndarray) -> np.ndarray:
    """Next-token targets: ids shifted left, final column PAD (ignored)."""
    targets = np.full_like(seq_ids, PAD_ID)
    targets[:, :-1] = seq_ids[:, 1:]
    return targets


def prepare_data(
    bundle: ModelBundle,
    samples,
    seed: int = 0,
    store: PrecomputedStates | None = None,
) -> PreparedData:
    """Tokenize texts and encode label sets for one split.

    The shuffled ordering draws its per-sample permutations from a
    generator seeded here, so preparation is reproducible.
    """
    rng = np.random.default_rng(seed)
    n = len(samples)
    if n == 0:
        raise EmptyCorpus("no samples to prepare")
    cap = bundle.capacity
    seq_ids = np.zeros((n, cap), dtype=np.int32)
    seq_mask = np.zeros((n, cap), dtype=np.int8)
    ids, gold = [], []
    for i, s in enumerate(samples):
        seq = encode(s.labels, bundle.hierarchy, bundle.vocab, bundle.ordering,
                     cap, rng=rng)
        seq_ids[i] = seq.ids
        seq_mask[i] = seq.mask
        ids.append(s.id)
        gold.append(set(s.labels))

    if bundle.enc_cfg.mode == "precomputed":
        if store is None:
            raise ConfigError("precomputed encoder mode needs a states store")
        if store.d_model != bundle.dec_cfg.d_model:
            raise ConfigError(
                f"store d_model {store.d_model} != model {bundle.dec_cfg.d_model}")
        hidden = np.zeros((n, store.max_len, store.d_model), dtype=np.float32)
        mask = np.zeros((n, store.max_len), dtype=np.int8)
        for i, s in enumerate(samples):
            enc = store.read(s.id)
            hidden[i] = enc.hidden
            mask[i] = enc.mask
        return PreparedData(ids, seq_ids, seq_mask, gold,
                            enc_hidden=hidden, enc_mask=mask)

    t = bundle.enc_cfg.max_len
    text_ids = np.zeros((n, t), dtype=np.int32)
    text_mask = np.zeros((n, t), dtype=np.int8)
    for i, s in enumerate(samples):
        text_ids[i], text_mask[i] = tokenize_text(s.text, bundle.text_vocab, t)
    return PreparedData(ids, seq_ids, seq_mask, gold,
                        text_ids=text_ids, text_mask=text_mask)


def _micro_logits(bundle: ModelBundle, data: PreparedData, idx: np.ndarray,
                  train_mode: bool, rng) -> Tensor:
    hidden, enc_mask = data.encoder_inputs(idx)
    if hidden is None:
        h = bundle.encode_batch(data.text_ids[idx], enc_mask, train_mode, rng)
    else:
        h = Tensor(hidden)
    return bundle.decoder_logits(data.seq_ids[idx], data.seq_mask[idx],
                                 h, enc_mask, train_mode, rng)


def evaluate_epoch(bundle: ModelBundle, data: PreparedData,
                   loss_cfg: LossConfig, micro_batch: int = 32) -> float:
    """Mean teacher-forced loss over fixed-order batches, dropout off."""
    if data.n == 0:
        raise EmptyCorpus("empty validation split")
    targets = make_targets(data.seq_ids)
    losses = []
    with ad.no_grad():
        for lo in range(0, data.n, micro_batch):
            idx = np.arange(lo, min(lo + micro_batch, data.n))
            logits = _micro_logits(bundle, data, idx, train_mode=False, rng=None)
            losses.append(compute_loss(logits, targets[idx], loss_cfg).item())
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def _vocab_hash(bundle: ModelBundle) -> str:
    payload = json.dumps(
        {"labels": bundle.vocab.label_to_id,
         "symbols": bundle.vocab.symbol_of}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_checkpoint(out_dir, bundle: ModelBundle, train_state: dict | None = None,
                    optimizer: AdamW | None = None) -> Path:
    """Write a self-contained checkpoint directory."""
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    params = bundle.all_params()
    manifest = {
        "format": 1,
        "enc_cfg": asdict(bundle.enc_cfg),
        "dec_cfg": asdict(bundle.dec_cfg),
        "ordering": bundle.ordering.value,
        "capacity": bundle.capacity,
        "taxonomy": {"labels": bundle.hierarchy.labels,
                     "parents": bundle.hierarchy.parent},
        "label_map": bundle.vocab.symbol_of,
        "token_ids": {bundle.vocab.token_string(i): i for i in range(bundle.vocab.size)},
        "vocab_hash": _vocab_hash(bundle),
        "text_vocab": bundle.text_vocab.to_json() if bundle.text_vocab else None,
        "param_shapes": {k: list(p.data.shape) for k, p in params.items()},
        "train_state": train_state,
    }
    if optimizer is not None:
        sd = optimizer.state_dict()
        manifest["optimizer"] = sd["groups"]
        mdir = out / "moments"
        mdir.mkdir(exist_ok=True)
        for key, mv in sd["moments"].items():
            stem = key.replace("/", ".")
            (mdir / f"{stem}.m.bin").write_bytes(mv["m"].astype("<f4").tobytes())
            (mdir / f"{stem}.v.bin").write_bytes(mv["v"].astype("<f4").tobytes())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    for k, p in params.items():
        (out / "params" / f"{k}.bin").write_bytes(p.data.astype("<f4").tobytes())
    return out


def load_checkpoint(ckpt_dir) -> tuple[ModelBundle, dict]:
    """Rebuild a ModelBundle (and manifest) from a checkpoint directory."""
    out = Path(ckpt_dir)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    h = LabelHierarchy.from_parts(manifest["taxonomy"]["labels"],
                                  manifest["taxonomy"]["parents"])
    enc_cfg = EncoderConfig(**manifest["enc_cfg"])
    dec_cfg = DecoderConfig(**manifest["dec_cfg"])
    text_vocab = (TextVocab.from_json(manifest["text_vocab"])
                  if manifest.get("text_vocab") else None)
    bundle = ModelBundle.build(
        h, Ordering(manifest["ordering"]), manifest["capacity"],
        enc_cfg, dec_cfg, seed=0, text_vocab=text_vocab)
    if _vocab_hash(bundle) != manifest["vocab_hash"]:
        raise ConfigError("checkpoint vocabulary does not match its taxonomy")
    for k, p in bundle.all_params().items():
        blob = (out / "params" / f"{k}.bin").read_bytes()
        arr = np.frombuffer(blob, dtype="<f4").reshape(manifest["param_shapes"][k])
        p.data = arr.copy()
    return bundle, manifest


def _load_moments(ckpt_dir, manifest: dict, optimizer: AdamW) -> None:
    moments = {}
    mdir = Path(ckpt_dir) / "moments"
    for g in optimizer.groups:
        for pname, p in g["params"].items():
            stem = f"{g['name']}.{pname}"
            mfile = mdir / f"{stem}.m.bin"
            if not mfile.exists():
                continue
            m = np.frombuffer(mfile.read_bytes(), dtype="<f4").reshape(p.data.shape)
            v = np.frombuffer((mdir / f"{stem}.v.bin").read_bytes(),
                              dtype="<f4").reshape(p.data.shape)
            moments[f"{g['name']}/{pname}"] = {"m": m.copy(), "v": v.copy()}
    optimizer.load_state_dict({"groups": manifest["optimizer"]}, moments)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val: float
    epochs_run: int
    stopped: str
    best_dir: Path | None = None
    last_dir: Path | None = None


def train(
    bundle: ModelBundle,
    train_data: PreparedData,
    dev_data: PreparedData,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    on_epoch_end=None,
) -> TrainResult:
    """Run the full loop; returns history plus best/last checkpoint paths.

    ``on_epoch_end(epoch, row, bundle)`` may return True to request a stop
    after the current epoch. With ``resume`` pointing at a ``last``
    checkpoint directory the run continues exactly where it left off.
    """
    if train_data.n == 0:
        raise EmptyCorpus("empty training split")
    if dev_data.n == 0:
        raise EmptyCorpus("empty dev split")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl" if out is not None else None

    opt = AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    opt.add_group("enc", dict(bundle.enc_params), cfg.lr_encoder)
    opt.add_group("dec", dict(bundle.dec_params), cfg.lr_decoder)

    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    sched = {"best_val": float("inf"), "bad": 0, "stall": 0}
    best = {"epoch": 0, "val": float("inf")}
    start_epoch = 1

    if resume is not None:
        loaded, manifest = load_checkpoint(resume)
        for k, p in bundle.all_params().items():
            p.data = loaded.all_params()[k].data
        state = manifest["train_state"]
        _load_moments(resume, manifest, opt)
        rng.bit_generator.state = state["rng_state"]
        history = list(state["history"])
        sched = dict(state["scheduler"])
        best = dict(state["best"])
        start_epoch = int(state["epoch"]) + 1

    targets_all = make_targets(train_data.seq_ids)
    val_cfg = cfg.val_loss_config()
    stopped = "max_epochs"
    epoch = start_epoch - 1

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.time()
        frozen_now = opt.group("enc")["frozen"]
        perm = rng.permutation(train_data.n)
        window_losses: list[float] = []
        pieces = []
        n_micros = int(np.ceil(train_data.n / cfg.micro_batch))
        for w in range(n_micros):
            idx = perm[w * cfg.micro_batch:(w + 1) * cfg.micro_batch]
            logits = _micro_logits(bundle, train_data, idx, True, rng)
            pieces.append(loss_pieces(logits, targets_all[idx], cfg.loss))
            if len(pieces) == cfg.accumulation_steps or w == n_micros - 1:
                loss = combine_pieces(pieces, cfg.loss)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLoss(
                        f"epoch {epoch} step {len(window_losses)}: loss={value}, "
                        f"lr_enc={opt.group('enc')['lr']:g}, "
                        f"lr_dec={opt.group('dec')['lr']:g}")
                ad.backward(loss)
                opt.step()
                opt.zero_grad()
                window_losses.append(value)
                pieces = []

        val_loss = evaluate_epoch(bundle, dev_data, val_cfg, cfg.micro_batch)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(window_losses)),
            "val_loss": val_loss,
            "lr_enc": opt.group("enc")["lr"],
            "lr_dec": opt.group("dec")["lr"],
            "frozen": bool(frozen_now),
            "wall_time": time.time() - t0,
        }
        history.append(row)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")

        if val_loss < best["val"]:
            best = {"epoch": epoch, "val": val_loss}
            if out is not None:
                save_checkpoint(out / "best", bundle,
                                {"epoch": epoch, "val_loss": val_loss})

        if sched["best_val"] - val_loss >= cfg.improve_eps:
            sched["best_val"] = val_loss
            sched["bad"] = 0
            sched["stall"] = 0
        else:
            sched["bad"] += 1
            sched["stall"] += 1
        if sched["bad"] >= cfg.plateau_patience:
            sched["bad"] = 0
            for g in opt.groups:
                g["lr"] *= cfg.plateau_factor
            if (not opt.group("enc")["frozen"]
                    and opt.group("enc")["lr"] < cfg.encoder_freeze_threshold):
                opt.freeze_group("enc")

        if out is not None:
            save_checkpoint(out / "last", bundle, {
                "epoch": epoch,
                "history": history,
                "scheduler": sched,
                "best": best,
                "rng_state": rng.bit_generator.state,
            }, optimizer=opt)

        if on_epoch_end is not None and on_epoch_end(epoch, row, bundle):
            stopped = "callback"
            break
        if sched["stall"] >= cfg.early_stop_patience:
            stopped = "early_stop"
            break
    else:
        stopped = "max_epochs"

    return TrainResult(
        history=history,
        best_epoch=best["epoch"],
        best_val=best["val"],
        epochs_run=epoch,
        stopped=stopped,
        best_dir=(out / "best") if out is not None and best["epoch"] > 0 else None,
        last_dir=(out / "last") if out is not None else None,
    )
